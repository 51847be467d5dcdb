use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{mixup, sample_lambda, spec_augment};
use super::config::ExperimentConfig;
use super::loss::{loss, target_row, Task};
use super::metrics::{accuracy, mean_average_precision};
use super::optim::{adamw_step, OptimState};
use crate::audio::{load_features, read_manifest, FeatureStats, Split};
use crate::error::{dim_err, Error, Result};
use crate::model::{apply_norm_updates, Checkpoint, ForwardCtx, Lhgnn};
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Spectrograms `[T × F]` with their class indices.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub features: Vec<Tensor<f32>>,
    pub labels: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(features: Vec<Tensor<f32>>, labels: Vec<Vec<usize>>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(dim_err!(
                "{} clips but {} label lists",
                features.len(),
                labels.len()
            ));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Dense `[n × classes]` targets for the given sample indices.
    pub fn targets(&self, indices: &[usize], classes: usize, task: Task) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(indices.len() * classes);
        for &i in indices {
            data.extend(target_row(&self.labels[i], classes, task)?);
        }
        Tensor::from_vec(&[indices.len(), classes], data)
    }

    /// Applies `(x − mean) / std` to every clip.
    pub fn normalized(mut self, stats: Option<FeatureStats>) -> Self {
        if let Some(s) = stats {
            for f in &mut self.features {
                *f = f.map(|v| (v - s.mean) / s.std);
            }
        }
        self
    }

    /// Loads one split of a JSON-lines manifest.
    pub fn from_manifest(path: impl AsRef<Path>, split: Split) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let entries: Vec<_> = read_manifest(path)?
            .into_iter()
            .filter(|e| e.split == split)
            .collect();
        let features = entries
            .iter()
            .map(|e| load_features(e, base))
            .collect::<Result<Vec<_>>>()?;
        Self::new(features, entries.into_iter().map(|e| e.labels).collect())
    }
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    #[serde(rename = "mAP", default, skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    pub wall_time_s: f64,
}

impl MetricRecord {
    /// The task metric, whichever it is.
    pub fn metric(&self) -> Option<f64> {
        self.map.or(self.accuracy)
    }
}

/// Loss, metric and scores of a model over a dataset.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub metric: Option<f64>,
    pub scores: Tensor<f32>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub store: ParamStore<f32>,
    pub log: Vec<MetricRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Task metric of `[n × classes]` logits; `None` when undefined.
pub fn task_metric(
    scores: &Tensor<f32>,
    data: &Dataset,
    indices: &[usize],
    task: Task,
) -> Result<Option<f64>> {
    let result = match task {
        Task::Multilabel => {
            let targets = data.targets(indices, scores.shape()[1], task)?;
            mean_average_precision(scores, &targets)
        }
        Task::Multiclass => {
            let labels: Vec<usize> = indices.iter().map(|&i| data.labels[i][0]).collect();
            accuracy(scores, &labels)
        }
    };
    match result {
        Ok(m) => Ok(Some(m)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Eval-mode pass over `data` with read-only weights.
pub fn evaluate(
    model: &Lhgnn,
    store: &ParamStore<f32>,
    data: &Dataset,
    task: Task,
    batch_size: usize,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let classes = model.config().num_classes;
    let indices: Vec<usize> = (0..data.len()).collect();
    let batches = indices
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let clips: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &data.features[i]).collect();
            let mut tape = Tape::inference();
            let mut ctx = ForwardCtx::eval();
            let x = tape.constant(model.input_batch(&clips)?)?;
            let logits = model.forward(&mut tape, store, &mut ctx, x)?;
            let targets = data.targets(chunk, classes, task)?;
            let l = loss(&mut tape, logits, &targets, task)?;
            Ok((
                tape.value(l).data()[0] as f64 * chunk.len() as f64,
                tape.value(logits).clone(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = batches.iter().map(|(l, _)| l).sum();
    let scores: Vec<f32> = batches
        .iter()
        .flat_map(|(_, s)| s.data().iter().copied())
        .collect();
    let scores = Tensor::from_vec(&[data.len(), classes], scores)?;
    Ok(Evaluation {
        loss: total / data.len() as f64,
        metric: task_metric(&scores, data, &indices, task)?,
        scores,
    })
}

/// Independent random stream for a `(seed, epoch, lane)` triple; lane 0 is
/// the shuffler and lane `w + 1` is worker `w`.
fn stream(seed: u64, epoch: usize, lane: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 20) | lane as u64);
    rng
}

struct Batch {
    members: Vec<usize>,
    inputs: Tensor<f32>,
    targets: Tensor<f32>,
}

fn build_batch<R: Rng>(
    model: &Lhgnn,
    cfg: &ExperimentConfig,
    data: &Dataset,
    members: &[usize],
    rng: &mut R,
) -> Result<Batch> {
    let classes = model.config().num_classes;
    let task = cfg.train.task;
    let aug = &cfg.augment;
    let mut clips = Vec::with_capacity(members.len());
    let mut targets = Vec::with_capacity(members.len() * classes);
    for &i in members {
        let ya = target_row(&data.labels[i], classes, task)?;
        let (x, y) = if aug.mixup_alpha > 0.0 {
            let j = rng.gen_range(0..data.len());
            let lambda = sample_lambda(aug.mixup_alpha, rng);
            let yb = target_row(&data.labels[j], classes, task)?;
            mixup((&data.features[i], &ya), (&data.features[j], &yb), lambda)?
        } else {
            (data.features[i].clone(), ya)
        };
        clips.push(spec_augment(&x, aug, rng));
        targets.extend(y);
    }
    let refs: Vec<&Tensor<f32>> = clips.iter().collect();
    Ok(Batch {
        members: members.to_vec(),
        inputs: model.input_batch(&refs)?,
        targets: Tensor::from_vec(&[members.len(), classes], targets)?,
    })
}

struct LogSink {
    file: Option<BufWriter<File>>,
    path: PathBuf,
}

impl LogSink {
    fn write(&mut self, record: &MetricRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            serde_json::to_writer(&mut *f, record)?;
            f.write_all(b"\n")
                .and_then(|_| f.flush())
                .map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
}

/// Runs the full epoch loop on in-memory data.
///
/// Workers build augmented batches on their own threads and hand them to the
/// trainer through bounded queues; the trainer alone mutates parameters.
/// Progress is reported through `observe` as each metric record is produced.
pub fn train(
    cfg: &ExperimentConfig,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    seed: u64,
    out_dir: Option<&Path>,
    mut observe: impl FnMut(&MetricRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if eval_set.is_some_and(|d| d.is_empty()) {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let model = Lhgnn::new(cfg.model.clone())?;
    let mut store = model.init_params::<f32>(seed)?;
    let mut optim = OptimState::new(&store, cfg.optim.clone());
    let config_json = serde_json::to_value(cfg)?;
    let task = cfg.train.task;
    let bs = cfg.train.batch_size;
    let workers = cfg.train.workers;
    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(bs);
    let total_steps = steps_per_epoch * cfg.train.epochs;

    let mut sink = LogSink {
        file: None,
        path: PathBuf::new(),
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        sink.path = dir.join("metrics.jsonl");
        let f = File::create(&sink.path).map_err(|e| Error::io(&sink.path, e))?;
        sink.file = Some(BufWriter::new(f));
    }

    let start = Instant::now();
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    for epoch in 0..cfg.train.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(seed, epoch, 0));
        let batches: Vec<&[usize]> = order.chunks(bs).collect();

        let mut loss_sum = 0.0f64;
        let mut seen = Vec::with_capacity(n);
        let mut scores = Vec::with_capacity(n * cfg.model.num_classes);
        std::thread::scope(|scope| -> Result<()> {
            let mut queues: Vec<Receiver<Result<Batch>>> = Vec::with_capacity(workers);
            for w in 0..workers {
                let (tx, rx) = sync_channel(cfg.train.queue_depth);
                queues.push(rx);
                let (model, batches) = (&model, &batches);
                scope.spawn(move || {
                    let mut rng = stream(seed, epoch, w + 1);
                    for members in batches.iter().skip(w).step_by(workers) {
                        let batch = build_batch(model, cfg, train_set, members, &mut rng);
                        let failed = batch.is_err();
                        if tx.send(batch).is_err() || failed {
                            break;
                        }
                    }
                });
            }
            for b in 0..batches.len() {
                let batch = queues[b % workers]
                    .recv()
                    .map_err(|_| Error::State("data worker stopped early".into()))??;
                let mut tape = Tape::new();
                let mut ctx = ForwardCtx::train();
                let x = tape.constant(batch.inputs)?;
                let logits = model.forward(&mut tape, &store, &mut ctx, x)?;
                let l = loss(&mut tape, logits, &batch.targets, task)?;
                let grads = tape.backward(l, &store)?;
                let lr = cfg.optim.lr_at(epoch * steps_per_epoch + b, total_steps);
                adamw_step(&mut store, &grads, &mut optim, lr)?;
                apply_norm_updates(&mut store, &ctx.norm_updates)?;
                loss_sum += tape.value(l).data()[0] as f64 * batch.members.len() as f64;
                scores.extend_from_slice(tape.value(logits).data());
                seen.extend(batch.members);
            }
            Ok(())
        })?;

        let scores = Tensor::from_vec(&[n, cfg.model.num_classes], scores)?;
        let mut record = MetricRecord {
            epoch,
            split: "train".into(),
            loss: loss_sum / n as f64,
            map: None,
            accuracy: None,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        set_metric(
            &mut record,
            task,
            task_metric(&scores, train_set, &seen, task)?,
        );
        sink.write(&record)?;
        observe(&record);
        log.push(record);

        if let Some(eval_set) = eval_set {
            let ev = evaluate(&model, &store, eval_set, task, bs)?;
            let split = cfg
                .train
                .eval_split
                .map_or("eval".to_string(), |s| s.to_string());
            let mut record = MetricRecord {
                epoch,
                split,
                loss: ev.loss,
                map: None,
                accuracy: None,
                wall_time_s: start.elapsed().as_secs_f64(),
            };
            set_metric(&mut record, task, ev.metric);
            sink.write(&record)?;
            observe(&record);
            log.push(record);
        }

        if let Some(dir) = out_dir {
            let path = dir.join(format!("epoch_{epoch:04}.ckpt"));
            Checkpoint::from_store(config_json.clone(), &store).save(&path)?;
            checkpoints.push(path);
        }
    }
    Ok(TrainOutcome {
        store,
        log,
        checkpoints,
    })
}

fn set_metric(record: &mut MetricRecord, task: Task, value: Option<f64>) {
    match task {
        Task::Multilabel => record.map = value,
        Task::Multiclass => record.accuracy = value,
    }
}

/// Loads the manifest named in the config and trains on its train split,
/// evaluating on `eval_split` each epoch.
pub fn train_from_manifest(
    cfg: &ExperimentConfig,
    seed: u64,
    mut observe: impl FnMut(&MetricRecord),
) -> Result<TrainOutcome> {
    let manifest = cfg
        .train
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("train.manifest is not set".into()))?;
    let norm = cfg.train.norm;
    let train_set = Dataset::from_manifest(manifest, Split::Train)?.normalized(norm);
    let eval_set = match cfg.train.eval_split {
        Some(split) => Some(Dataset::from_manifest(manifest, split)?.normalized(norm)),
        None => None,
    };
    let out_dir = cfg.train.out_dir.as_ref().map(PathBuf::from);
    train(
        cfg,
        &train_set,
        eval_set.as_ref(),
        seed,
        out_dir.as_deref(),
        &mut observe,
    )
}
