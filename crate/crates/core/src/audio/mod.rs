//! Audio ingestion and log-mel features.
//!
//! Clips are mixed to mono and resampled to 16 kHz, framed with a 400-sample
//! Hann window and a 160-sample hop, transformed with a 512-point FFT, pooled
//! into 128 HTK-scale triangular mel bands over 0–8 kHz and log-compressed.
//! The time axis is then cropped or padded to 1024 frames.

mod cache;
mod manifest;

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

pub use cache::{read_lmel, write_lmel, LMEL_MAGIC, LMEL_VERSION};
pub use manifest::{load_features, read_manifest, write_manifest, ManifestEntry, Split};

use crate::error::{dim_err, param_err, Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW: usize = 400;
pub const HOP: usize = 160;
pub const N_FFT: usize = 512;
pub const N_MELS: usize = 128;
pub const TARGET_FRAMES: usize = 1024;
pub const LOG_FLOOR: f32 = 1e-6;
pub const F_MIN: f64 = 0.0;
pub const F_MAX: f64 = 8_000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

/// `[T × 128]` log-mel energies at 100 frames per second.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMel {
    pub frames: Tensor<f32>,
}

/// Reads a PCM WAV file, averages channels to mono and resamples to 16 kHz.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(e.to_string()))?,
        hound::SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(e.to_string()))?
        }
    };
    let mono: Vec<f32> = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect();
    Ok(AudioClip {
        samples: resample_linear(&mono, spec.sample_rate, SAMPLE_RATE),
        sample_rate: SAMPLE_RATE,
    })
}

/// Linear-interpolation resampling to `⌊L·to/from⌋` samples.
pub fn resample_linear(samples: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || samples.is_empty() {
        return samples.to_vec();
    }
    let n_out = (samples.len() as u64 * to as u64 / from as u64) as usize;
    let step = from as f64 / to as f64;
    let last = samples.len() - 1;
    (0..n_out)
        .map(|j| {
            let pos = j as f64 * step;
            let i0 = (pos.floor() as usize).min(last);
            let frac = (pos - i0 as f64) as f32;
            let i1 = (i0 + 1).min(last);
            samples[i0] * (1.0 - frac) + samples[i1] * frac
        })
        .collect()
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters with unit peak on the HTK mel scale.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `[n_mels × (n_fft/2 + 1)]`, row-major.
    weights: Vec<f32>,
    centers_hz: Vec<f64>,
    n_bins: usize,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Self {
        let n_bins = n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let mut weights = vec![0.0f32; n_mels * n_bins];
        for m in 0..n_mels {
            let (l, c, u) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = ((f - l) / (c - l)).min((u - f) / (u - c)).max(0.0);
                weights[m * n_bins + k] = w as f32;
            }
        }
        Self {
            weights,
            centers_hz: edges[1..=n_mels].to_vec(),
            n_bins,
        }
    }

    pub fn standard() -> Self {
        Self::new(N_MELS, N_FFT, SAMPLE_RATE, F_MIN, F_MAX)
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn n_mels(&self) -> usize {
        self.centers_hz.len()
    }

    pub fn apply(&self, power: &[f32], out: &mut [f32]) {
        for (o, row) in out.iter_mut().zip(self.weights.chunks_exact(self.n_bins)) {
            *o = row.iter().zip(power).map(|(w, p)| w * p).sum();
        }
    }
}

/// Number of frames before padding or cropping.
pub fn frame_count(len: usize) -> usize {
    1 + len.max(WINDOW).saturating_sub(WINDOW) / HOP
}

fn hann(n: usize) -> Vec<f32> {
    // periodic form
    (0..n)
        .map(|i| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()) as f32)
        .collect()
}

/// Frame-level mel energies before the log, `[frames × 128]`, unpadded.
pub fn mel_energies(clip: &AudioClip) -> Result<Tensor<f32>> {
    if clip.sample_rate != SAMPLE_RATE {
        return Err(param_err!(
            "log-mel expects {SAMPLE_RATE} Hz audio, got {}",
            clip.sample_rate
        ));
    }
    let mut signal = clip.samples.clone();
    if signal.len() < WINDOW {
        signal.resize(WINDOW, 0.0);
    }
    let frames = frame_count(signal.len());
    let fb = MelFilterbank::standard();
    let window = hann(WINDOW);
    let fft: Arc<dyn Fft<f32>> = FftPlanner::new().plan_fft_forward(N_FFT);
    let mut buf = vec![Complex::new(0.0f32, 0.0); N_FFT];
    let mut power = vec![0.0f32; N_FFT / 2 + 1];
    let mut out = vec![0.0f32; frames * N_MELS];
    for (t, row) in out.chunks_exact_mut(N_MELS).enumerate() {
        let seg = &signal[t * HOP..t * HOP + WINDOW];
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(if i < WINDOW { seg[i] * window[i] } else { 0.0 }, 0.0);
        }
        fft.process(&mut buf);
        for (p, b) in power.iter_mut().zip(&buf) {
            *p = b.norm_sqr();
        }
        fb.apply(&power, row);
    }
    Tensor::from_vec(&[frames, N_MELS], out)
}

/// Log-mel features cropped or padded (with the log floor) to `target` frames.
pub fn logmel_frames(clip: &AudioClip, target: usize) -> Result<LogMel> {
    let energies = mel_energies(clip)?;
    let have = energies.shape()[0];
    let floor = LOG_FLOOR.ln();
    let mut data = vec![floor; target * N_MELS];
    let keep = have.min(target) * N_MELS;
    for (d, &e) in data[..keep].iter_mut().zip(energies.data()) {
        *d = (e + LOG_FLOOR).ln();
    }
    let frames = Tensor::from_vec(&[target, N_MELS], data)?;
    frames.ensure_finite("logmel")?;
    Ok(LogMel { frames })
}

/// The fixed `1024 × 128` model input.
pub fn logmel(clip: &AudioClip) -> Result<LogMel> {
    logmel_frames(clip, TARGET_FRAMES)
}

/// `(x − mean) / std` elementwise.
pub fn normalize(x: &LogMel, mean: f32, std: f32) -> Result<LogMel> {
    if std.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(param_err!("std must be positive, got {std}"));
    }
    Ok(LogMel {
        frames: x.frames.map(|v| (v - mean) / std),
    })
}

/// Dataset-level mean and standard deviation in two passes.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FeatureStats {
    pub mean: f32,
    pub std: f32,
}

impl FeatureStats {
    /// `load(i)` is called twice per item, once per pass.
    pub fn compute<F>(count: usize, mut load: F) -> Result<Self>
    where
        F: FnMut(usize) -> Result<Tensor<f32>>,
    {
        if count == 0 {
            return Err(param_err!("statistics over an empty set"));
        }
        let (mut sum, mut n) = (0.0f64, 0usize);
        for i in 0..count {
            let t = load(i)?;
            sum += t.data().iter().map(|&v| v as f64).sum::<f64>();
            n += t.len();
        }
        let mean = sum / n as f64;
        let mut sq = 0.0f64;
        for i in 0..count {
            let t = load(i)?;
            sq += t
                .data()
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>();
        }
        let std = (sq / n as f64).sqrt();
        if std <= 0.0 {
            return Err(dim_err!("features are constant; std is zero"));
        }
        Ok(Self {
            mean: mean as f32,
            std: std as f32,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, secs: f64, amp: f32) -> AudioClip {
        let n = (secs * SAMPLE_RATE as f64) as usize;
        AudioClip {
            samples: (0..n)
                .map(|i| {
                    amp * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin()
                        as f32
                })
                .collect(),
            sample_rate: SAMPLE_RATE,
        }
    }

    #[test]
    fn ten_seconds_fill_the_fixed_shape() {
        let clip = sine(440.0, 10.0, 0.5);
        assert_eq!(frame_count(clip.samples.len()), 998);
        assert_eq!(logmel(&clip).unwrap().frames.shape(), &[1024, 128]);
    }

    #[test]
    fn silence_is_the_log_floor() {
        let clip = AudioClip {
            samples: vec![0.0; 4000],
            sample_rate: SAMPLE_RATE,
        };
        let lm = logmel(&clip).unwrap();
        assert!(lm.frames.data().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn short_clip_is_padded_to_one_window() {
        let clip = AudioClip {
            samples: vec![0.1; 10],
            sample_rate: SAMPLE_RATE,
        };
        assert_eq!(mel_energies(&clip).unwrap().shape(), &[1, 128]);
    }

    #[test]
    fn frame_count_formula() {
        assert_eq!(frame_count(400), 1);
        assert_eq!(frame_count(559), 1);
        assert_eq!(frame_count(560), 2);
        assert_eq!(frame_count(16_000), 98);
    }

    #[test]
    fn resampler_halves_length() {
        let x: Vec<f32> = (0..20).map(|i| i as f32).collect();
        let y = resample_linear(&x, 32_000, 16_000);
        assert_eq!(y.len(), 10);
        assert_eq!(y[3], 6.0);
        assert_eq!(resample_linear(&x, 16_000, 16_000), x);
    }

    #[test]
    fn wrong_rate_is_rejected() {
        let clip = AudioClip {
            samples: vec![0.0; 800],
            sample_rate: 8_000,
        };
        assert!(mel_energies(&clip).is_err());
    }

    #[test]
    fn normalize_examples() {
        let x = LogMel {
            frames: Tensor::from_vec(&[2, 2], vec![3.0, 3.0, 3.0, 3.0]).unwrap(),
        };
        assert_eq!(normalize(&x, 0.0, 1.0).unwrap(), x);
        assert!(normalize(&x, 3.0, 2.0)
            .unwrap()
            .frames
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(normalize(&x, 0.0, 0.0).is_err());
        assert!(normalize(&x, 0.0, -1.0).is_err());
    }
}
