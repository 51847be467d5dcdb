//! Local–higher-order graph convolution.
//!
//! For node `x_i` with neighbor set `S_i` and centroid set `L_i`:
//!
//! ```text
//! x''_i = GELU(W_σ · [x_i ‖ max(S_i − x_i) ‖ max(L_i − x_i)] + b_σ)
//! y_i   = x_i + W_h · x''_i + b_h
//! ```
//!
//! Neighbor indices and centroid vectors are inputs, not functions of `x`,
//! from the point of view of differentiation.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clustering::HigherOrderSet;
use crate::error::{dim_err, param_err, Result};
use crate::knn::NeighborSet;
use crate::tape::{Gather, Tape, Var};
use crate::tensor::{Real, Tensor};

/// Which relative terms feed the kernel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelVariant {
    /// `x_i ‖ max(S_i − x_i)`
    LocalOnly,
    /// `x_i ‖ max(L_i − x_i)`
    HigherOnly,
    /// `x_i ‖ max(S_i − x_i) ‖ max(L_i − x_i)`
    #[default]
    LocalHigher,
}

impl KernelVariant {
    pub fn uses_local(self) -> bool {
        !matches!(self, KernelVariant::HigherOnly)
    }

    pub fn uses_higher(self) -> bool {
        !matches!(self, KernelVariant::LocalOnly)
    }

    /// Width of the concatenated feature for `c` input channels.
    pub fn concat_width(self, c: usize) -> usize {
        match self {
            KernelVariant::LocalHigher => 3 * c,
            _ => 2 * c,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LhgConvParams<T = f32> {
    /// `[W × W]` with `W` the concat width.
    pub sigma_weight: Tensor<T>,
    pub sigma_bias: Tensor<T>,
    /// `[W × C]`
    pub proj_weight: Tensor<T>,
    pub proj_bias: Tensor<T>,
}

impl<T: Real> LhgConvParams<T> {
    pub fn zeros(c: usize, variant: KernelVariant) -> Self {
        let w = variant.concat_width(c);
        Self {
            sigma_weight: Tensor::zeros(&[w, w]),
            sigma_bias: Tensor::zeros(&[w]),
            proj_weight: Tensor::zeros(&[w, c]),
            proj_bias: Tensor::zeros(&[c]),
        }
    }

    /// Normal weights with std `1/√fan_in`, small normal biases.
    pub fn random<R: Rng>(c: usize, variant: KernelVariant, rng: &mut R) -> Self {
        let w = variant.concat_width(c);
        let mut draw = |shape: &[usize], std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            let n = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| T::of(normal.sample(rng))).collect())
                .expect("shape")
        };
        Self {
            sigma_weight: draw(&[w, w], 1.0 / (w as f64).sqrt()),
            sigma_bias: draw(&[w], 0.1),
            proj_weight: draw(&[w, c], 1.0 / (w as f64).sqrt()),
            proj_bias: draw(&[c], 0.1),
        }
    }

    fn check(&self, c: usize, variant: KernelVariant) -> Result<()> {
        let w = variant.concat_width(c);
        let ok = self.sigma_weight.shape() == [w, w]
            && self.sigma_bias.shape() == [w]
            && self.proj_weight.shape() == [w, c]
            && self.proj_bias.shape() == [c];
        if !ok {
            return Err(dim_err!(
                "kernel parameters do not match width {w} for {c} channels and {variant:?}"
            ));
        }
        Ok(())
    }
}

/// `max_j (others[j] − center)` per feature.
pub fn max_relative<T: Real>(center: &Tensor<T>, others: &Tensor<T>) -> Result<Tensor<T>> {
    let c = center.len();
    if others.rank() != 2 || others.shape()[1] != c {
        return Err(dim_err!(
            "others {:?} do not match center width {c}",
            others.shape()
        ));
    }
    if others.shape()[0] == 0 {
        return Err(param_err!("max_relative over an empty set"));
    }
    let mut out = others.row(0).to_vec();
    for j in 1..others.shape()[0] {
        for (o, &v) in out.iter_mut().zip(others.row(j)) {
            if v > *o {
                *o = v;
            }
        }
    }
    for (o, &x) in out.iter_mut().zip(center.data()) {
        *o = *o - x;
    }
    Tensor::from_vec(&[c], out)
}

/// Parameter nodes of one kernel on a tape.
#[derive(Clone, Copy, Debug)]
pub(crate) struct KernelVars {
    pub sigma_weight: Var,
    pub sigma_bias: Var,
    pub proj_weight: Var,
    pub proj_bias: Var,
}

/// Batched kernel on a tape. `x` is `[B, N, C]`; `local` holds the per-sample
/// neighbor lists, `higher_max` the constant `[B, N, C]` elementwise max over
/// each node's selected centroids. Returns `(x'', y)`.
pub(crate) fn graph_conv<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    local: Option<Gather<'_>>,
    higher_max: Option<Var>,
    w: &KernelVars,
    variant: KernelVariant,
) -> Result<(Var, Var)> {
    let mut parts = vec![x];
    if variant.uses_local() {
        let gather = local.ok_or_else(|| param_err!("{variant:?} needs neighbor sets"))?;
        parts.push(tape.max_relative(x, gather)?);
    }
    if variant.uses_higher() {
        let hm = higher_max.ok_or_else(|| param_err!("{variant:?} needs centroid sets"))?;
        parts.push(tape.sub(hm, x)?);
    }
    let cat = tape.concat(&parts)?;
    let pre = tape.linear(cat, w.sigma_weight, w.sigma_bias)?;
    let hidden = tape.gelu(pre)?;
    let proj = tape.linear(hidden, w.proj_weight, w.proj_bias)?;
    let y = tape.add(x, proj)?;
    Ok((hidden, y))
}

/// Single-sample kernel returning both the hidden `x''` (`[N × W]`) and the output `y` (`[N × C]`).
pub fn lhg_conv_with_hidden<T: Real>(
    nodes: &Tensor<T>,
    local: &NeighborSet,
    higher: &HigherOrderSet<T>,
    params: &LhgConvParams<T>,
    variant: KernelVariant,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if nodes.rank() != 2 {
        return Err(dim_err!(
            "expected an N×C node matrix, got {:?}",
            nodes.shape()
        ));
    }
    let (n, c) = (nodes.shape()[0], nodes.shape()[1]);
    params.check(c, variant)?;
    if variant.uses_local() && local.num_nodes() != n {
        return Err(dim_err!(
            "neighbor sets cover {} nodes, expected {n}",
            local.num_nodes()
        ));
    }
    if variant.uses_higher() && (higher.num_nodes() != n || higher.centroids().shape()[1] != c) {
        return Err(dim_err!("centroid sets do not match {n}×{c} nodes"));
    }
    let mut tape = Tape::inference();
    let x = tape.constant(nodes.clone().reshape(&[1, n, c])?)?;
    let idx = [local.indices().to_vec()];
    let gather = Gather {
        indices: &idx,
        per_node: local.k(),
    };
    let hm = if variant.uses_higher() {
        Some(tape.constant(higher.max_vectors().reshape(&[1, n, c])?)?)
    } else {
        None
    };
    let vars = KernelVars {
        sigma_weight: tape.constant(params.sigma_weight.clone())?,
        sigma_bias: tape.constant(params.sigma_bias.clone())?,
        proj_weight: tape.constant(params.proj_weight.clone())?,
        proj_bias: tape.constant(params.proj_bias.clone())?,
    };
    let (hidden, y) = graph_conv(&mut tape, x, Some(gather), hm, &vars, variant)?;
    let w = variant.concat_width(c);
    Ok((
        tape.value(hidden).clone().reshape(&[n, w])?,
        tape.value(y).clone().reshape(&[n, c])?,
    ))
}

/// Single-sample kernel: `y_i = x_i + h(σ(x_i ‖ max(S_i − x_i) ‖ max(L_i − x_i)))`.
pub fn lhg_conv<T: Real>(
    nodes: &Tensor<T>,
    local: &NeighborSet,
    higher: &HigherOrderSet<T>,
    params: &LhgConvParams<T>,
    variant: KernelVariant,
) -> Result<Tensor<T>> {
    lhg_conv_with_hidden(nodes, local, higher, params, variant).map(|(_, y)| y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::fuzzy_cmeans;
    use crate::knn::knn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn max_relative_examples() {
        let center = Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let others = Tensor::from_rows(&[&[2.0, 0.0], &[0.0, 5.0]]).unwrap();
        assert_eq!(max_relative(&center, &others).unwrap().data(), &[1.0, 3.0]);
        let same = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        assert_eq!(max_relative(&center, &same).unwrap().data(), &[0.0, 0.0]);
        let single = Tensor::from_rows(&[&[4.0, -1.0]]).unwrap();
        assert_eq!(max_relative(&center, &single).unwrap().data(), &[3.0, -3.0]);
        assert!(max_relative(&center, &Tensor::zeros(&[0, 2])).is_err());
    }

    fn random_nodes(n: usize, c: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            &[n, c],
            (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_projection_is_identity() {
        let nodes = random_nodes(8, 4, 1);
        let s = knn(&nodes, 3).unwrap();
        let (_, l) = fuzzy_cmeans(&nodes, 4, 2, 2.0, 1).unwrap();
        let mut params = LhgConvParams::random(
            4,
            KernelVariant::LocalHigher,
            &mut ChaCha8Rng::seed_from_u64(2),
        );
        params.proj_weight = Tensor::zeros(&[12, 4]);
        params.proj_bias = Tensor::zeros(&[4]);
        let y = lhg_conv(&nodes, &s, &l, &params, KernelVariant::LocalHigher).unwrap();
        assert_eq!(y, nodes);
    }

    #[test]
    fn hidden_width_is_three_c() {
        let nodes = random_nodes(8, 4, 3);
        let s = knn(&nodes, 2).unwrap();
        let (_, l) = fuzzy_cmeans(&nodes, 3, 2, 2.0, 1).unwrap();
        let params = LhgConvParams::random(
            4,
            KernelVariant::LocalHigher,
            &mut ChaCha8Rng::seed_from_u64(4),
        );
        let (h, y) =
            lhg_conv_with_hidden(&nodes, &s, &l, &params, KernelVariant::LocalHigher).unwrap();
        assert_eq!(h.shape(), &[8, 12]);
        assert_eq!(y.shape(), &[8, 4]);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let nodes = random_nodes(6, 2, 5);
        let s = knn(&nodes, 2).unwrap();
        let (_, l) = fuzzy_cmeans(&nodes, 2, 1, 2.0, 1).unwrap();
        let params = LhgConvParams::<f64>::zeros(2, KernelVariant::LocalOnly);
        assert!(lhg_conv(&nodes, &s, &l, &params, KernelVariant::LocalHigher).is_err());
        assert_eq!(KernelVariant::LocalOnly.concat_width(5), 10);
        assert_eq!(KernelVariant::HigherOnly.concat_width(5), 10);
        assert_eq!(KernelVariant::LocalHigher.concat_width(5), 15);
    }
}
