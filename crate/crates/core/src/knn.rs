//! Exact k-nearest-neighbor sets over a sample's node matrix.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{dim_err, param_err, Result};
use crate::tensor::{Real, Tensor};

/// For every node, the `k` other nodes nearest to it, ascending by distance
/// with ties broken by ascending index. A node is never its own neighbor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborSet {
    k: usize,
    n: usize,
    indices: Vec<usize>,
}

impl NeighborSet {
    /// Builds a set from precomputed `[n × k]` indices.
    pub fn from_indices(n: usize, k: usize, indices: Vec<usize>) -> Result<Self> {
        if indices.len() != n * k {
            return Err(dim_err!(
                "expected {n}×{k} neighbor indices, got {}",
                indices.len()
            ));
        }
        if indices.iter().any(|&j| j >= n) {
            return Err(param_err!("neighbor index out of range"));
        }
        Ok(Self { k, n, indices })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn of(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    /// Row-major `[N × k]` indices.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn into_indices(self) -> Vec<usize> {
        self.indices
    }

    /// The neighbor vectors `S_i` as a `[k × C]` tensor.
    pub fn vectors<T: Real>(&self, nodes: &Tensor<T>, i: usize) -> Tensor<T> {
        nodes.select_rows(self.of(i))
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn by_dist_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Exact Euclidean k-NN over the rows of `nodes[N×C]`.
pub fn knn<T: Real>(nodes: &Tensor<T>, k: usize) -> Result<NeighborSet> {
    if nodes.rank() != 2 {
        return Err(dim_err!(
            "knn expects an N×C node matrix, got {:?}",
            nodes.shape()
        ));
    }
    let (n, c) = (nodes.shape()[0], nodes.shape()[1]);
    if k == 0 || k >= n {
        return Err(param_err!("k must satisfy 1 ≤ k ≤ N−1 (k={k}, N={n})"));
    }
    let x: Vec<f64> = nodes.data().iter().map(|v| v.f64()).collect();
    let mut indices = vec![0usize; n * k];
    indices.par_chunks_mut(k).enumerate().for_each_init(
        || Vec::with_capacity(n),
        |cand, (i, out)| {
            let xi = &x[i * c..(i + 1) * c];
            cand.clear();
            cand.extend(
                (0..n)
                    .filter(|&j| j != i)
                    .map(|j| (sq_dist(xi, &x[j * c..(j + 1) * c]), j)),
            );
            if k < cand.len() {
                cand.select_nth_unstable_by(k - 1, by_dist_then_index);
            }
            let head = &mut cand[..k];
            head.sort_unstable_by(by_dist_then_index);
            for (o, &(_, j)) in out.iter_mut().zip(head.iter()) {
                *o = j;
            }
        },
    );
    Ok(NeighborSet { k, n, indices })
}
