use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::loss::{loss, Task};
use crate::error::{Error, Result};
use crate::model::{BlockSelection, ForwardCtx, Lhgnn, ModelConfig, Segment};
use crate::params::{GradRecord, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor so that near-zero gradients compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Worst disagreement found in one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
    pub checked: usize,
    pub max_rel_error: f64,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compares reverse-mode gradients of the scalar built by `build` with
/// central differences `(L(θ+ε) − L(θ−ε)) / 2ε`, `ε = 1e-4·(1+|θ|)`, for
/// every element of every trainable parameter.
///
/// `build` is called once on a recording tape and then on inference tapes
/// with perturbed copies of `store`.
pub fn check_gradients<F>(store: &ParamStore<f64>, mut build: F) -> Result<GradcheckReport>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = build(&mut tape, store)?;
    let grads = tape.backward(out, store)?;
    drop(tape);
    check_against(store, &grads, |_, s| {
        let mut tape = Tape::inference();
        let out = build(&mut tape, s)?;
        Ok(tape.value(out).data()[0])
    })
}

/// Central differences of `eval` against precomputed gradients. `eval`
/// receives the name of the perturbed parameter along with the store.
pub fn check_against<F>(
    store: &ParamStore<f64>,
    grads: &GradRecord<f64>,
    mut eval: F,
) -> Result<GradcheckReport>
where
    F: FnMut(&str, &ParamStore<f64>) -> Result<f64>,
{
    let mut work = store.clone();
    let names: Vec<String> = store
        .iter()
        .filter(|(_, e)| e.requires_grad)
        .map(|(n, _)| n.to_string())
        .collect();
    let mut report = GradcheckReport {
        params: Vec::new(),
        checked: 0,
        max_rel_error: 0.0,
    };
    for name in names {
        let analytic = grads
            .get(&name)
            .ok_or_else(|| Error::State(format!("no gradient recorded for {name}")))?
            .clone();
        let mut check = ParamCheck {
            name: name.clone(),
            elements: analytic.len(),
            max_rel_error: 0.0,
            worst_index: 0,
        };
        for i in 0..analytic.len() {
            let theta = work.get(&name)?.data()[i];
            let eps = 1e-4 * (1.0 + theta.abs());
            work.get_mut(&name)?.data_mut()[i] = theta + eps;
            let up = eval(&name, &work)?;
            work.get_mut(&name)?.data_mut()[i] = theta - eps;
            let down = eval(&name, &work)?;
            work.get_mut(&name)?.data_mut()[i] = theta;
            let err = relative_error(analytic.data()[i], (up - down) / (2.0 * eps));
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = i;
            }
        }
        report.checked += check.elements;
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.params.push(check);
    }
    Ok(report)
}

/// Random `[B, T, F, 1]` input and dense targets for a model check.
fn random_problem(
    config: &ModelConfig,
    batch: usize,
    seed: u64,
    task: Task,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (t, f, k) = (config.input_frames, config.input_bins, config.num_classes);
    let input = Tensor::from_vec(
        &[batch, t, f, 1],
        (0..batch * t * f)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect(),
    )?;
    let mut targets = vec![0.0f64; batch * k];
    for b in 0..batch {
        match task {
            Task::Multilabel => targets[b * k..(b + 1) * k]
                .iter_mut()
                .for_each(|v| *v = if rng.gen_bool(0.3) { 1.0 } else { 0.0 }),
            Task::Multiclass => targets[b * k + rng.gen_range(0..k)] = 1.0,
        }
    }
    Ok((input, Tensor::from_vec(&[batch, k], targets)?))
}

/// A training-mode forward with every segment boundary kept, so that
/// later evaluations can restart part-way through the network.
pub struct SegmentedForward {
    model: Lhgnn,
    segments: Vec<Segment>,
    /// Input to each segment.
    boundaries: Vec<Tensor<f64>>,
    /// Number of LHG blocks before each segment.
    blocks_before: Vec<usize>,
    selections: Vec<BlockSelection<f64>>,
    targets: Tensor<f64>,
    task: Task,
}

impl SegmentedForward {
    /// Runs the recording forward and returns it with the loss gradients.
    pub fn record(
        model: &Lhgnn,
        store: &ParamStore<f64>,
        input: Tensor<f64>,
        targets: Tensor<f64>,
        task: Task,
    ) -> Result<(Self, f64, GradRecord<f64>)> {
        let segments = model.segments();
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::train();
        let mut h = tape.constant(input)?;
        let mut boundaries = Vec::with_capacity(segments.len());
        let mut blocks_before = Vec::with_capacity(segments.len());
        let mut blocks = 0;
        for &seg in &segments {
            boundaries.push(tape.value(h).clone());
            blocks_before.push(blocks);
            blocks += matches!(seg, Segment::Block(..)) as usize;
            h = model.run_segment(&mut tape, store, &mut ctx, seg, h)?;
        }
        let out = loss(&mut tape, h, &targets, task)?;
        let value = tape.value(out).data()[0];
        let grads = tape.backward(out, store)?;
        let me = Self {
            model: model.clone(),
            segments,
            boundaries,
            blocks_before,
            selections: ctx.selections,
            targets,
            task,
        };
        Ok((me, value, grads))
    }

    /// Loss when starting from the recorded input of `segments[from]`
    /// with the recorded graph selections.
    pub fn loss_from(&self, from: usize, store: &ParamStore<f64>) -> Result<f64> {
        let mut tape = Tape::inference();
        let mut ctx =
            ForwardCtx::replaying(true, self.selections[self.blocks_before[from]..].to_vec());
        let mut h = tape.constant(self.boundaries[from].clone())?;
        for &seg in &self.segments[from..] {
            h = self.model.run_segment(&mut tape, store, &mut ctx, seg, h)?;
        }
        let out = loss(&mut tape, h, &self.targets, self.task)?;
        Ok(tape.value(out).data()[0])
    }

    /// Loss when `name` is the only perturbed parameter.
    pub fn loss_for_param(&self, name: &str, store: &ParamStore<f64>) -> Result<f64> {
        let seg = Segment::of_param(name)
            .ok_or_else(|| Error::State(format!("{name} belongs to no segment")))?;
        let from = self
            .segments
            .iter()
            .position(|&s| s == seg)
            .ok_or_else(|| Error::State(format!("{name} belongs to no segment")))?;
        self.loss_from(from, store)
    }
}

/// End-to-end check of the whole network in 64-bit precision with random
/// inputs and targets. k-NN and clustering selections from the first
/// forward are frozen for the finite-difference evaluations, and each
/// evaluation restarts at the segment owning the perturbed parameter.
pub fn model_gradcheck(
    config: &ModelConfig,
    batch: usize,
    seed: u64,
    task: Task,
) -> Result<GradcheckReport> {
    let model = Lhgnn::new(config.clone())?;
    let store = model.init_params::<f64>(seed)?;
    let (input, targets) = random_problem(config, batch, seed, task)?;
    let (fwd, _, grads) = SegmentedForward::record(&model, &store, input, targets, task)?;
    check_against(&store, &grads, |name, s| fwd.loss_for_param(name, s))
}
