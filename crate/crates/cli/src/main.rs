use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use lhgnn_core::audio::{
    load_features, read_manifest, write_lmel, write_manifest, FeatureStats, ManifestEntry, Split,
};
use lhgnn_core::clustering::{fuzzy_cmeans, kmeans, nearest_centroids};
use lhgnn_core::model::{Checkpoint, Lhgnn};
use lhgnn_core::train::{
    average_checkpoints, evaluate, model_gradcheck, synthetic_multilabel, train_from_manifest,
    AugmentConfig, Dataset, ExperimentConfig, RunConfig, Task,
};
use lhgnn_core::{ClusteringMethod, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "lhgnn",
    version,
    about = "Local-higher-order graph network for audio tagging"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract log-mel features for every clip and write a cached manifest.
    Features {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dataset mean and standard deviation of the features of one split.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
    },
    /// Train from a JSON experiment config; metric records go to stdout.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overrides `train.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, optionally averaged with others.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Further checkpoints averaged with `--ckpt`.
        #[arg(long, value_delimiter = ',')]
        average: Vec<PathBuf>,
        /// One weight per averaged checkpoint (default uniform).
        #[arg(long, value_delimiter = ',')]
        weights: Vec<f64>,
        /// Defaults to the manifest recorded in the checkpoint.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        /// Write the (averaged) weights here.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, value_enum, default_value = "tiny")]
        scale: Scale,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        batch: usize,
    },
    /// Stage geometry and parameter count of a configuration.
    ParamCount {
        /// Experiment config; the reference model when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Cluster random points and dump centroids and memberships as JSON.
    ClusterDemo {
        #[arg(long, default_value_t = 32)]
        nodes: usize,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 4)]
        centroids: usize,
        #[arg(long, default_value_t = 2)]
        top_k: usize,
        #[arg(long, default_value_t = 2.0)]
        fuzziness: f64,
        #[arg(long, default_value_t = 1)]
        iters: usize,
        #[arg(long, value_enum, default_value = "fuzzy-c-means")]
        method: Method,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a small learnable multilabel dataset with a matching config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 1.0)]
        noise: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Tiny,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    FuzzyCMeans,
    KMeans,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Features { manifest, out } => features(&manifest, &out)?,
        Command::Stats { manifest, split } => {
            let data = Dataset::from_manifest(&manifest, split)?;
            let stats = FeatureStats::compute(data.len(), |i| Ok(data.features[i].clone()))?;
            println!("{}", serde_json::to_string(&stats)?);
        }
        Command::Train { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            // relative paths in the config resolve against the config file
            let base = config.parent().unwrap_or(Path::new("."));
            let resolve = |p: &Option<String>| {
                p.as_ref()
                    .map(|p| base.join(p).to_string_lossy().into_owned())
            };
            cfg.train.manifest = resolve(&cfg.train.manifest);
            cfg.train.out_dir = match out {
                Some(out) => Some(out.to_string_lossy().into_owned()),
                None => resolve(&cfg.train.out_dir),
            };
            let outcome = train_from_manifest(&cfg, seed, |r| {
                println!("{}", serde_json::to_string(r).expect("records serialize"));
            })?;
            for path in &outcome.checkpoints {
                eprintln!("saved {}", path.display());
            }
        }
        Command::Eval {
            ckpt,
            average,
            weights,
            manifest,
            split,
            batch_size,
            save,
        } => eval(&ckpt, &average, &weights, manifest, split, batch_size, save)?,
        Command::Gradcheck { scale, seed, batch } => {
            let cfg = match scale {
                Scale::Tiny => ModelConfig::tiny(5),
            };
            let report = model_gradcheck(&cfg, batch, seed, Task::Multilabel)?;
            for p in &report.params {
                println!("{:<40} {:>7} {:.3e}", p.name, p.elements, p.max_rel_error);
            }
            println!(
                "checked {} elements, max relative error {:.3e}",
                report.checked, report.max_rel_error
            );
            if report.max_rel_error >= 1e-3 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::ParamCount { config } => {
            let model_cfg = match config {
                Some(path) => ExperimentConfig::load(path)?.model,
                None => ModelConfig::default(),
            };
            let model = Lhgnn::new(model_cfg)?;
            let store = model.init_params::<f32>(0)?;
            let buffers: usize = store
                .iter()
                .filter(|(_, e)| !e.requires_grad)
                .map(|(_, e)| e.tensor.len())
                .sum();
            let stages: Vec<_> = model
                .stages()
                .iter()
                .map(|s| {
                    json!({"height": s.height, "width": s.width, "channels": s.channels, "nodes": s.nodes,
                           "knn_k": s.knn_k, "centroids": s.centroids, "top_k": s.top_k})
                })
                .collect();
            let out =
                json!({"trainable": store.num_trainable(), "buffers": buffers, "stages": stages});
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::ClusterDemo {
            nodes,
            dim,
            centroids,
            top_k,
            fuzziness,
            iters,
            method,
            seed,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::from_vec(
                &[nodes, dim],
                (0..nodes * dim)
                    .map(|_| rng.gen_range(-1.0f32..1.0))
                    .collect(),
            )?;
            let (state, set) = match method {
                Method::FuzzyCMeans => fuzzy_cmeans(&x, centroids, top_k, fuzziness, iters)?,
                Method::KMeans => {
                    let state = kmeans(&x, centroids, iters)?;
                    let set = nearest_centroids(&x, &state.centroids, top_k)?;
                    (state, set)
                }
            };
            let rows = |t: &Tensor<f32>| {
                (0..t.shape()[0])
                    .map(|i| t.row(i).to_vec())
                    .collect::<Vec<_>>()
            };
            let method = match method {
                Method::FuzzyCMeans => ClusteringMethod::FuzzyCMeans,
                Method::KMeans => ClusteringMethod::KMeans,
            };
            let out = json!({
                "method": method,
                "fuzziness": state.fuzziness,
                "iterations": state.iterations,
                "nodes": rows(&x),
                "centroids": rows(&state.centroids),
                "memberships": rows(&state.memberships),
                "top_k": (0..nodes).map(|i| set.of(i).to_vec()).collect::<Vec<_>>(),
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Synth {
            out,
            samples,
            classes,
            noise,
            seed,
        } => synth(&out, samples, classes, noise, seed)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn features(manifest: &Path, out: &Path) -> Result<()> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries = read_manifest(manifest)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut cached = Vec::with_capacity(entries.len());
    for (i, entry) in entries.iter().enumerate() {
        let frames =
            load_features(entry, base).with_context(|| format!("extracting {}", entry.path))?;
        let stem = Path::new(&entry.path)
            .file_stem()
            .map_or("clip".into(), |s| s.to_string_lossy());
        let name = format!("{i:06}_{stem}.lmel");
        write_lmel(out.join(&name), &frames)?;
        cached.push(ManifestEntry {
            path: name,
            ..entry.clone()
        });
    }
    let path = out.join("features.jsonl");
    write_manifest(&path, &cached)?;
    eprintln!(
        "wrote {} feature files and {}",
        cached.len(),
        path.display()
    );
    Ok(())
}

fn eval(
    ckpt: &Path,
    average: &[PathBuf],
    weights: &[f64],
    manifest: Option<PathBuf>,
    split: Split,
    batch_size: usize,
    save: Option<PathBuf>,
) -> Result<()> {
    let mut ckpts = vec![Checkpoint::load(ckpt)?];
    for p in average {
        ckpts.push(Checkpoint::load(p)?);
    }
    let weights = if weights.is_empty() {
        vec![1.0 / ckpts.len() as f64; ckpts.len()]
    } else {
        weights.to_vec()
    };
    let merged = average_checkpoints(&ckpts, &weights)?;
    let cfg: ExperimentConfig = serde_json::from_value(merged.config.clone())
        .context("checkpoint does not carry an experiment config")?;
    let model = Lhgnn::new(cfg.model.clone())?;
    let mut store = model.init_params::<f32>(0)?;
    merged.apply_to(&mut store)?;
    if let Some(path) = save {
        merged.save(&path)?;
        eprintln!("saved averaged weights to {}", path.display());
    }
    let manifest = match manifest.or_else(|| cfg.train.manifest.as_ref().map(PathBuf::from)) {
        Some(m) => m,
        None => bail!("no manifest given and none recorded in the checkpoint"),
    };
    let data = Dataset::from_manifest(&manifest, split)?.normalized(cfg.train.norm);
    let ev = evaluate(&model, &store, &data, cfg.train.task, batch_size)?;
    let mut out = json!({
        "split": split,
        "samples": data.len(),
        "checkpoints": ckpts.len(),
        "loss": ev.loss,
    });
    out[cfg.train.task.metric_name()] = json!(ev.metric);
    println!("{}", serde_json::to_string(&out)?);
    Ok(())
}

fn synth(out: &Path, samples: usize, classes: usize, noise: f32, seed: u64) -> Result<()> {
    let model = ModelConfig::tiny(classes);
    let data = synthetic_multilabel(
        samples,
        model.input_frames,
        model.input_bins,
        classes,
        noise,
        seed,
    )?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let val_every = 4;
    let mut entries = Vec::with_capacity(samples);
    for (i, (frames, labels)) in data.features.iter().zip(&data.labels).enumerate() {
        let name = format!("synth_{i:04}.lmel");
        write_lmel(out.join(&name), frames)?;
        let split = if i % val_every == val_every - 1 {
            Split::Val
        } else {
            Split::Train
        };
        entries.push(ManifestEntry {
            path: name,
            labels: labels.clone(),
            split,
        });
    }
    write_manifest(out.join("manifest.jsonl"), &entries)?;
    let cfg = ExperimentConfig {
        model,
        augment: AugmentConfig {
            time_mask: 16,
            freq_mask: 4,
            ..AugmentConfig::default()
        },
        optim: Default::default(),
        train: RunConfig {
            epochs: 20,
            batch_size: 16,
            manifest: Some("manifest.jsonl".into()),
            out_dir: Some("run".into()),
            ..RunConfig::default()
        },
    };
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)
        .with_context(|| format!("writing config into {}", out.display()))?;
    eprintln!(
        "wrote {samples} clips, manifest.jsonl and config.json to {}",
        out.display()
    );
    Ok(())
}
