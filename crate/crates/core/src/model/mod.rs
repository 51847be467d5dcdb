//! The full network: convolutional stem, four stages of LHG blocks
//! (graph convolution + ConvFFN) with downsampling between stages, and a
//! pooled classification head. Feature maps are NHWC with time as height and
//! mel bins as width.

pub mod checkpoint;
mod config;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

pub use checkpoint::Checkpoint;
pub use config::{ModelConfig, StageGeometry, STEM_STRIDES};

use crate::clustering::{fuzzy_cmeans, kmeans, nearest_centroids, ClusteringMethod};
use crate::error::{dim_err, Error, Result};
use crate::knn::knn;
use crate::lhg::{graph_conv, KernelVars};
use crate::params::ParamStore;
use crate::tape::{Gather, NormStats, Tape, Var};
use crate::tensor::{Real, Tensor};

pub const NORM_MOMENTUM: f64 = 0.1;

/// Graph selections made by one LHG block for one batch.
#[derive(Clone, Debug)]
pub struct BlockSelection<T> {
    /// Per sample, row-major `[N × k]` neighbor indices.
    pub neighbors: Vec<Vec<usize>>,
    pub knn_k: usize,
    /// `[B, N, C]` elementwise max over each node's selected centroids.
    pub higher_max: Option<Tensor<T>>,
}

/// Per-forward state: training flag, graph selections and observed norm statistics.
#[derive(Debug)]
pub struct ForwardCtx<T> {
    pub training: bool,
    replay: bool,
    cursor: usize,
    pub selections: Vec<BlockSelection<T>>,
    pub norm_updates: Vec<(String, NormStats<T>)>,
}

impl<T: Real> ForwardCtx<T> {
    pub fn train() -> Self {
        Self::new(true)
    }

    pub fn eval() -> Self {
        Self::new(false)
    }

    fn new(training: bool) -> Self {
        Self {
            training,
            replay: false,
            cursor: 0,
            selections: Vec::new(),
            norm_updates: Vec::new(),
        }
    }

    /// Reuses the selections recorded by an earlier forward instead of
    /// recomputing k-NN and clustering (frozen-selection gradient checks).
    pub fn replaying(training: bool, selections: Vec<BlockSelection<T>>) -> Self {
        Self {
            replay: true,
            selections,
            ..Self::new(training)
        }
    }
}

/// A contiguous piece of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Stem,
    /// Downsample into stage `t` (0-based, `t ≥ 1`).
    Downsample(usize),
    /// Block `j` of stage `t`.
    Block(usize, usize),
    Head,
}

impl Segment {
    /// The segment owning a parameter, judged by its name prefix.
    pub fn of_param(name: &str) -> Option<Segment> {
        let mut parts = name.split('.');
        match parts.next()? {
            "stem" => Some(Segment::Stem),
            "head" => Some(Segment::Head),
            "downsample" => parts.next()?.parse().ok().map(Segment::Downsample),
            "stages" => {
                let t = parts.next()?.parse().ok()?;
                (parts.next()? == "blocks").then_some(())?;
                Some(Segment::Block(t, parts.next()?.parse().ok()?))
            }
            _ => None,
        }
    }
}

/// Stateless description of the network; weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Lhgnn {
    config: ModelConfig,
    stages: Vec<StageGeometry>,
}

fn normal_tensor<T: Real>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::of(dist.sample(rng))).collect()).expect("shape")
}

impl Lhgnn {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let stages = config.validate()?;
        Ok(Self { config, stages })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stages(&self) -> &[StageGeometry] {
        &self.stages
    }

    /// Freshly initialized weights: He-normal convolutions, `1/√fan_in`
    /// linear layers, zero biases, unit norm scale.
    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParamStore<T>> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let rng = &mut rng;

        let conv = |store: &mut ParamStore<T>,
                    rng: &mut ChaCha8Rng,
                    name: &str,
                    cin: usize,
                    cout: usize|
         -> Result<()> {
            let std = (2.0 / (9 * cin) as f64).sqrt();
            store.insert(
                format!("{name}.weight"),
                normal_tensor(&[3, 3, cin, cout], std, rng),
                true,
            )?;
            store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]), true)
        };
        let norm = |store: &mut ParamStore<T>, name: &str, c: usize| -> Result<()> {
            store.insert(format!("{name}.gamma"), Tensor::ones(&[c]), true)?;
            store.insert(format!("{name}.beta"), Tensor::zeros(&[c]), true)?;
            store.insert(format!("{name}.running_mean"), Tensor::zeros(&[c]), false)?;
            store.insert(format!("{name}.running_var"), Tensor::ones(&[c]), false)
        };
        let linear = |store: &mut ParamStore<T>,
                      rng: &mut ChaCha8Rng,
                      name: &str,
                      cin: usize,
                      cout: usize|
         -> Result<()> {
            let std = 1.0 / (cin as f64).sqrt();
            store.insert(
                format!("{name}.weight"),
                normal_tensor(&[cin, cout], std, rng),
                true,
            )?;
            store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]), true)
        };

        let mut cin = 1;
        for (i, &c) in cfg.stem_channels.iter().enumerate() {
            conv(&mut store, rng, &format!("stem.{i}"), cin, c)?;
            norm(&mut store, &format!("stem.{i}.norm"), c)?;
            cin = c;
        }
        for (t, (&c, &depth)) in cfg.channels.iter().zip(&cfg.depths).enumerate() {
            if t > 0 {
                let name = format!("downsample.{t}");
                conv(&mut store, rng, &name, cfg.channels[t - 1], c)?;
                norm(&mut store, &format!("{name}.norm"), c)?;
            }
            let wide = cfg.kernel.concat_width(c);
            let hidden = cfg.ffn_expansion * c;
            for j in 0..depth {
                let p = format!("stages.{t}.blocks.{j}");
                linear(&mut store, rng, &format!("{p}.graph.sigma"), wide, wide)?;
                linear(&mut store, rng, &format!("{p}.graph.proj"), wide, c)?;
                norm(&mut store, &format!("{p}.ffn.norm"), c)?;
                linear(&mut store, rng, &format!("{p}.ffn.expand"), c, hidden)?;
                store.insert(
                    format!("{p}.ffn.dw.weight"),
                    normal_tensor(&[3, 3, 1, hidden], (2.0f64 / 9.0).sqrt(), rng),
                    true,
                )?;
                store.insert(format!("{p}.ffn.dw.bias"), Tensor::zeros(&[hidden]), true)?;
                linear(&mut store, rng, &format!("{p}.ffn.proj"), hidden, c)?;
            }
        }
        linear(
            &mut store,
            rng,
            "head.hidden",
            cfg.channels[3],
            cfg.head_hidden,
        )?;
        linear(
            &mut store,
            rng,
            "head.out",
            cfg.head_hidden,
            cfg.num_classes,
        )?;
        Ok(store)
    }

    /// Stacks `[T × F]` spectrograms into a `[B, T, F, 1]` input batch.
    pub fn input_batch<T: Real>(&self, clips: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (t, f) = (self.config.input_frames, self.config.input_bins);
        let mut data = Vec::with_capacity(clips.len() * t * f);
        for clip in clips {
            if clip.shape() != [t, f] {
                return Err(dim_err!(
                    "model expects {t}×{f} inputs, got {:?}",
                    clip.shape()
                ));
            }
            data.extend_from_slice(clip.data());
        }
        Tensor::from_vec(&[clips.len(), t, f, 1], data)
    }

    fn norm<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        ctx: &mut ForwardCtx<T>,
        name: &str,
        x: Var,
    ) -> Result<Var> {
        let gamma = tape.param(store, &format!("{name}.gamma"))?;
        let beta = tape.param(store, &format!("{name}.beta"))?;
        if ctx.training {
            let (y, stats) = tape.norm(x, gamma, beta, None)?;
            ctx.norm_updates
                .push((name.to_string(), stats.expect("training statistics")));
            Ok(y)
        } else {
            let rm = store.get(&format!("{name}.running_mean"))?;
            let rv = store.get(&format!("{name}.running_var"))?;
            Ok(tape.norm(x, gamma, beta, Some((rm, rv)))?.0)
        }
    }

    fn conv<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        name: &str,
        x: Var,
        stride: usize,
        depthwise: bool,
    ) -> Result<Var> {
        let w = tape.param(store, &format!("{name}.weight"))?;
        let b = tape.param(store, &format!("{name}.bias"))?;
        tape.conv2d(x, w, b, stride, 1, depthwise)
    }

    fn linear<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        name: &str,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, &format!("{name}.weight"))?;
        let b = tape.param(store, &format!("{name}.bias"))?;
        tape.linear(x, w, b)
    }

    /// Four 3×3 convolutions (strides 2,1,2,1), each followed by norm and GELU.
    pub fn stem<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        ctx: &mut ForwardCtx<T>,
        x: Var,
    ) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1..] != [self.config.input_frames, self.config.input_bins, 1] {
            return Err(dim_err!(
                "stem expects [B, {}, {}, 1], got {s:?}",
                self.config.input_frames,
                self.config.input_bins
            ));
        }
        let mut h = x;
        for (i, stride) in STEM_STRIDES.into_iter().enumerate() {
            let name = format!("stem.{i}");
            h = self.conv(tape, store, &name, h, stride, false)?;
            h = self.norm(tape, store, ctx, &format!("{name}.norm"), h)?;
            h = tape.gelu(h)?;
        }
        Ok(h)
    }

    /// `x + proj(GELU(dw3×3(expand(norm(x)))))`.
    pub fn conv_ffn<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        ctx: &mut ForwardCtx<T>,
        prefix: &str,
        x: Var,
    ) -> Result<Var> {
        let n = self.norm(tape, store, ctx, &format!("{prefix}.norm"), x)?;
        let e = self.linear(tape, store, &format!("{prefix}.expand"), n)?;
        let d = self.conv(tape, store, &format!("{prefix}.dw"), e, 1, true)?;
        let g = tape.gelu(d)?;
        let p = self.linear(tape, store, &format!("{prefix}.proj"), g)?;
        tape.add(x, p)
    }

    /// 3×3 stride-2 convolution followed by norm, into stage `t` (1-based stages 2..4).
    pub fn downsample<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        ctx: &mut ForwardCtx<T>,
        t: usize,
        x: Var,
    ) -> Result<Var> {
        let name = format!("downsample.{t}");
        let y = self.conv(tape, store, &name, x, 2, false)?;
        self.norm(tape, store, ctx, &format!("{name}.norm"), y)
    }

    /// Global average pooling, 1×1 conv with GELU, then the class projection.
    pub fn head<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let pooled = tape.mean_spatial(x)?;
        let h = self.linear(tape, store, "head.hidden", pooled)?;
        let h = tape.gelu(h)?;
        self.linear(tape, store, "head.out", h)
    }

    fn select<T: Real>(&self, x: &Tensor<T>, geo: &StageGeometry) -> Result<BlockSelection<T>> {
        let (b, n, c) = (x.shape()[0], geo.nodes, geo.channels);
        let variant = self.config.kernel;
        let per_sample: Vec<Result<(Vec<usize>, Option<Tensor<T>>)>> = (0..b)
            .into_par_iter()
            .map(|bi| {
                let nodes =
                    Tensor::from_vec(&[n, c], x.data()[bi * n * c..(bi + 1) * n * c].to_vec())?;
                let neighbors = if variant.uses_local() {
                    knn(&nodes, geo.knn_k)?.into_indices()
                } else {
                    Vec::new()
                };
                let higher = if variant.uses_higher() {
                    let set = match self.config.clustering {
                        ClusteringMethod::FuzzyCMeans => {
                            fuzzy_cmeans(
                                &nodes,
                                geo.centroids,
                                geo.top_k,
                                self.config.fuzziness,
                                self.config.fcm_iters,
                            )?
                            .1
                        }
                        ClusteringMethod::KMeans => {
                            let st = kmeans(&nodes, geo.centroids, self.config.kmeans_iters)?;
                            nearest_centroids(&nodes, &st.centroids, geo.top_k)?
                        }
                    };
                    Some(set.max_vectors())
                } else {
                    None
                };
                Ok((neighbors, higher))
            })
            .collect();
        let mut neighbors = Vec::with_capacity(b);
        let mut maxes = Vec::new();
        for r in per_sample {
            let (nb, hm) = r?;
            neighbors.push(nb);
            if let Some(hm) = hm {
                maxes.extend_from_slice(hm.data());
            }
        }
        let higher_max = variant
            .uses_higher()
            .then(|| Tensor::from_vec(&[b, n, c], maxes))
            .transpose()?;
        Ok(BlockSelection {
            neighbors,
            knn_k: geo.knn_k,
            higher_max,
        })
    }

    /// Graph convolution over the flattened feature map, then ConvFFN.
    pub fn lhg_block<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        ctx: &mut ForwardCtx<T>,
        stage: usize,
        block: usize,
        x: Var,
    ) -> Result<Var> {
        let geo = &self.stages[stage];
        let shape = tape.shape(x).to_vec();
        if shape[1..] != [geo.height, geo.width, geo.channels] {
            return Err(dim_err!("stage {} block got {shape:?}", stage + 1));
        }
        let b = shape[0];
        let nodes = tape.reshape(x, &[b, geo.nodes, geo.channels])?;
        let sel = if ctx.replay {
            let sel = ctx
                .selections
                .get(ctx.cursor)
                .cloned()
                .ok_or_else(|| Error::State("no recorded selection to replay".into()))?;
            ctx.cursor += 1;
            sel
        } else {
            let sel = self.select(tape.value(nodes), geo)?;
            ctx.selections.push(sel.clone());
            sel
        };
        let hm = sel
            .higher_max
            .clone()
            .map(|t| tape.constant(t))
            .transpose()?;
        let p = format!("stages.{stage}.blocks.{block}");
        let vars = KernelVars {
            sigma_weight: tape.param(store, &format!("{p}.graph.sigma.weight"))?,
            sigma_bias: tape.param(store, &format!("{p}.graph.sigma.bias"))?,
            proj_weight: tape.param(store, &format!("{p}.graph.proj.weight"))?,
            proj_bias: tape.param(store, &format!("{p}.graph.proj.bias"))?,
        };
        let gather = Gather {
            indices: &sel.neighbors,
            per_node: sel.knn_k,
        };
        let (_, y) = graph_conv(tape, nodes, Some(gather), hm, &vars, self.config.kernel)?;
        let y = tape.reshape(y, &shape)?;
        self.conv_ffn(tape, store, ctx, &format!("{p}.ffn"), y)
    }

    /// The network as an ordered list of pieces.
    pub fn segments(&self) -> Vec<Segment> {
        let mut out = vec![Segment::Stem];
        for t in 0..4 {
            if t > 0 {
                out.push(Segment::Downsample(t));
            }
            out.extend((0..self.config.depths[t]).map(|j| Segment::Block(t, j)));
        }
        out.push(Segment::Head);
        out
    }

    /// Runs one segment on its input.
    pub fn run_segment<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        ctx: &mut ForwardCtx<T>,
        seg: Segment,
        x: Var,
    ) -> Result<Var> {
        match seg {
            Segment::Stem => self.stem(tape, store, ctx, x),
            Segment::Downsample(t) => self.downsample(tape, store, ctx, t, x),
            Segment::Block(t, j) => self.lhg_block(tape, store, ctx, t, j, x),
            Segment::Head => self.head(tape, store, x),
        }
    }

    /// Logits `[B, classes]` for a `[B, T, F, 1]` input.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        ctx: &mut ForwardCtx<T>,
        input: Var,
    ) -> Result<Var> {
        let mut h = input;
        for seg in self.segments() {
            h = self.run_segment(tape, store, ctx, seg, h)?;
        }
        Ok(h)
    }

    /// Eval-mode logits as a plain tensor.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, input: Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let mut ctx = ForwardCtx::eval();
        let x = tape.constant(input)?;
        let y = self.forward(&mut tape, store, &mut ctx, x)?;
        Ok(tape.value(y).clone())
    }
}

/// Folds observed batch statistics into the running estimates.
pub fn apply_norm_updates<T: Real>(
    store: &mut ParamStore<T>,
    updates: &[(String, NormStats<T>)],
) -> Result<()> {
    let mom = T::of(NORM_MOMENTUM);
    for (name, stats) in updates {
        for (suffix, obs) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let t = store.get_mut(&format!("{name}.{suffix}"))?;
            for (r, &o) in t.data_mut().iter_mut().zip(obs) {
                *r = (T::one() - mom) * *r + mom * o;
            }
        }
    }
    Ok(())
}
