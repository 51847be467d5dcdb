//! WAV decoding, resampling, manifests and the feature cache.

use lhgnn_core::audio::{
    load_features, load_wav, logmel, read_lmel, read_manifest, write_lmel, write_manifest,
    ManifestEntry, Split, N_MELS, SAMPLE_RATE, TARGET_FRAMES,
};
use lhgnn_core::Tensor;

fn write_wav(path: &std::path::Path, rate: u32, channels: u16, frames: &[[i16; 2]]) {
    let spec = hound::WavSpec {
        channels,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for f in frames {
        for &s in &f[..channels as usize] {
            w.write_sample(s).unwrap();
        }
    }
    w.finalize().unwrap();
}

#[test]
fn stereo_int16_is_averaged_and_scaled() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.wav");
    write_wav(
        &path,
        SAMPLE_RATE,
        2,
        &[[16384, 0], [-32768, -32768], [0, 8192]],
    );
    let clip = load_wav(&path).unwrap();
    assert_eq!(clip.sample_rate, SAMPLE_RATE);
    assert_eq!(clip.samples, vec![0.25, -1.0, 0.125]);
}

#[test]
fn other_rates_are_resampled_to_16k() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.wav");
    let frames: Vec<[i16; 2]> = (0..8000).map(|i| [(i % 100) as i16, 0]).collect();
    write_wav(&path, 8000, 1, &frames);
    let clip = load_wav(&path).unwrap();
    assert_eq!(clip.sample_rate, SAMPLE_RATE);
    assert_eq!(clip.samples.len(), 16000);
    assert_eq!(
        logmel(&clip).unwrap().frames.shape(),
        &[TARGET_FRAMES, N_MELS]
    );
}

#[test]
fn missing_and_corrupt_files_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_wav(dir.path().join("nope.wav")).is_err());
    let junk = dir.path().join("junk.wav");
    std::fs::write(&junk, b"not a wav").unwrap();
    assert!(load_wav(&junk).is_err());
    let bad = dir.path().join("bad.lmel");
    std::fs::write(&bad, b"LMEL").unwrap();
    assert!(read_lmel(&bad).is_err());
}

#[test]
fn manifest_entries_load_wav_or_cached_features() {
    let dir = tempfile::tempdir().unwrap();
    write_wav(
        &dir.path().join("c.wav"),
        SAMPLE_RATE,
        1,
        &vec![[100, 0]; 4000],
    );
    let cached = Tensor::from_vec(&[4, 3], (0..12).map(|v| v as f32).collect()).unwrap();
    write_lmel(dir.path().join("d.lmel"), &cached).unwrap();
    let entries = vec![
        ManifestEntry {
            path: "c.wav".into(),
            labels: vec![1, 4],
            split: Split::Train,
        },
        ManifestEntry {
            path: "d.lmel".into(),
            labels: vec![],
            split: Split::Test,
        },
    ];
    let manifest = dir.path().join("m.jsonl");
    write_manifest(&manifest, &entries).unwrap();
    let text = std::fs::read_to_string(&manifest).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        r#"{"path":"c.wav","labels":[1,4],"split":"train"}"#
    );
    let back = read_manifest(&manifest).unwrap();
    assert_eq!(back, entries);
    assert_eq!(
        load_features(&back[0], dir.path()).unwrap().shape(),
        &[TARGET_FRAMES, N_MELS]
    );
    assert_eq!(load_features(&back[1], dir.path()).unwrap(), cached);
}

#[test]
fn malformed_manifest_lines_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.jsonl");
    std::fs::write(
        &manifest,
        "{\"path\": \"x.wav\", \"labels\": [1], \"split\": \"dev\"}\n",
    )
    .unwrap();
    assert!(read_manifest(&manifest).is_err());
}
