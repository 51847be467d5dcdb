//! Fuzzy C-Means and k-means over one sample's node matrix, and the per-node
//! higher-order set of the `K` most relevant centroids.
//!
//! All accumulation runs in f64 regardless of the tensor element type.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, param_err, Result};
use crate::knn::sq_dist;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusteringMethod {
    #[default]
    FuzzyCMeans,
    KMeans,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterState<T = f32> {
    /// `[P × C]`
    pub centroids: Tensor<T>,
    /// `[N × P]`, rows sum to one.
    pub memberships: Tensor<T>,
    /// Exponent `m`; 1.0 marks hard (k-means) assignments.
    pub fuzziness: f64,
    pub iterations: usize,
}

/// Per node, the indices of its `K` selected centroids, most relevant first.
#[derive(Clone, Debug, PartialEq)]
pub struct HigherOrderSet<T = f32> {
    k: usize,
    indices: Vec<usize>,
    centroids: Tensor<T>,
}

impl<T: Real> HigherOrderSet<T> {
    pub fn new(k: usize, indices: Vec<usize>, centroids: Tensor<T>) -> Result<Self> {
        let p = centroids.shape()[0];
        if k == 0 || indices.len() % k != 0 {
            return Err(dim_err!(
                "{} indices do not split into rows of {k}",
                indices.len()
            ));
        }
        if indices.iter().any(|&j| j >= p) {
            return Err(param_err!("centroid index out of range"));
        }
        Ok(Self {
            k,
            indices,
            centroids,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_nodes(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn of(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn centroids(&self) -> &Tensor<T> {
        &self.centroids
    }

    /// The centroid vectors `L_i` as a `[K × C]` tensor.
    pub fn vectors(&self, i: usize) -> Tensor<T> {
        self.centroids.select_rows(self.of(i))
    }

    /// Elementwise max over `L_i` for every node: `[N × C]`.
    pub fn max_vectors(&self) -> Tensor<T> {
        let c = self.centroids.shape()[1];
        let n = self.num_nodes();
        let mut out = Vec::with_capacity(n * c);
        for i in 0..n {
            let sel = self.of(i);
            let mut acc = self.centroids.row(sel[0]).to_vec();
            for &p in &sel[1..] {
                for (a, &v) in acc.iter_mut().zip(self.centroids.row(p)) {
                    if v > *a {
                        *a = v;
                    }
                }
            }
            out.extend(acc);
        }
        Tensor::from_vec(&[n, c], out).expect("consistent")
    }
}

fn to_f64<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.f64()).collect()
}

fn from_f64<T: Real>(shape: &[usize], v: &[f64]) -> Tensor<T> {
    Tensor::from_vec(shape, v.iter().map(|&x| T::of(x)).collect()).expect("consistent")
}

fn node_matrix<T: Real>(nodes: &Tensor<T>) -> Result<(usize, usize)> {
    if nodes.rank() != 2 {
        return Err(dim_err!(
            "expected an N×C node matrix, got {:?}",
            nodes.shape()
        ));
    }
    Ok((nodes.shape()[0], nodes.shape()[1]))
}

/// Strided deterministic initialization: centroid `p` is node `⌊p·N/P⌋`.
pub fn init_centroids<T: Real>(nodes: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (n, _) = node_matrix(nodes)?;
    if p == 0 || n < p {
        return Err(param_err!("need 1 ≤ P ≤ N (P={p}, N={n})"));
    }
    let rows: Vec<usize> = (0..p).map(|j| j * n / p).collect();
    Ok(nodes.select_rows(&rows))
}

fn membership_rows(x: &[f64], cent: &[f64], n: usize, p: usize, c: usize, m: f64) -> Vec<f64> {
    let expo = 1.0 / (m - 1.0);
    let mut u = vec![0.0; n * p];
    u.par_chunks_mut(p).enumerate().for_each(|(i, row)| {
        let xi = &x[i * c..(i + 1) * c];
        for (j, r) in row.iter_mut().enumerate() {
            *r = sq_dist(xi, &cent[j * c..(j + 1) * c]);
        }
        if let Some(hit) = row.iter().position(|&d| d == 0.0) {
            row.iter_mut().for_each(|r| *r = 0.0);
            row[hit] = 1.0;
            return;
        }
        // (d_p / d_j)^(2/(m-1)) == (d²_p / d²_j)^(1/(m-1))
        for r in row.iter_mut() {
            *r = r.powf(-expo);
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|r| *r /= total);
    });
    u
}

/// Fuzzy memberships `u_ip = 1 / Σ_j (d(x_i,c_p)/d(x_i,c_j))^(2/(m−1))`.
///
/// A node sitting exactly on a centroid gets a one-hot row at the first such centroid.
pub fn memberships<T: Real>(nodes: &Tensor<T>, centroids: &Tensor<T>, m: f64) -> Result<Tensor<T>> {
    let (n, c) = node_matrix(nodes)?;
    if centroids.rank() != 2 || centroids.shape()[1] != c {
        return Err(dim_err!(
            "centroids {:?} do not match node width {c}",
            centroids.shape()
        ));
    }
    if m.partial_cmp(&1.0) != Some(Ordering::Greater) {
        return Err(param_err!("fuzziness m must exceed 1, got {m}"));
    }
    let p = centroids.shape()[0];
    let u = membership_rows(&to_f64(nodes), &to_f64(centroids), n, p, c, m);
    Ok(from_f64(&[n, p], &u))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CentroidUpdate<T> {
    pub centroids: Tensor<T>,
    /// Centroids whose total weight was zero and were carried over unchanged.
    pub kept: Vec<usize>,
}

fn weighted_means(
    x: &[f64],
    u: &[f64],
    prev: &[f64],
    n: usize,
    p: usize,
    c: usize,
    m: f64,
) -> (Vec<f64>, Vec<usize>) {
    let mut num = vec![0.0; p * c];
    let mut den = vec![0.0; p];
    for i in 0..n {
        let xi = &x[i * c..(i + 1) * c];
        for j in 0..p {
            let w = u[i * p + j].powf(m);
            if w == 0.0 {
                continue;
            }
            den[j] += w;
            for (acc, &v) in num[j * c..(j + 1) * c].iter_mut().zip(xi) {
                *acc += w * v;
            }
        }
    }
    let mut kept = Vec::new();
    for j in 0..p {
        let row = &mut num[j * c..(j + 1) * c];
        if den[j] > 0.0 {
            row.iter_mut().for_each(|v| *v /= den[j]);
        } else {
            row.copy_from_slice(&prev[j * c..(j + 1) * c]);
            kept.push(j);
        }
    }
    (num, kept)
}

/// `c_p = Σ_i u_ip^m x_i / Σ_i u_ip^m`; a centroid with no weight keeps its previous value.
pub fn update_centroids<T: Real>(
    nodes: &Tensor<T>,
    memberships: &Tensor<T>,
    m: f64,
    previous: &Tensor<T>,
) -> Result<CentroidUpdate<T>> {
    let (n, c) = node_matrix(nodes)?;
    let p = previous.shape()[0];
    if memberships.shape() != [n, p] || previous.shape() != [p, c] {
        return Err(dim_err!(
            "memberships {:?} / centroids {:?} do not fit {n}×{c} nodes",
            memberships.shape(),
            previous.shape()
        ));
    }
    let (cent, kept) = weighted_means(
        &to_f64(nodes),
        &to_f64(memberships),
        &to_f64(previous),
        n,
        p,
        c,
        m,
    );
    Ok(CentroidUpdate {
        centroids: from_f64(&[p, c], &cent),
        kept,
    })
}

/// Indices of the `k` largest entries of `row`, descending, ties to the lower index.
fn top_k_desc(row: &[f64], k: usize) -> impl Iterator<Item = usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.into_iter().take(k)
}

/// Selects, per node, the `k` centroids with the largest `u_ip^m`.
pub fn top_k_by_membership<T: Real>(
    memberships: &Tensor<T>,
    centroids: &Tensor<T>,
    k: usize,
) -> Result<HigherOrderSet<T>> {
    let p = centroids.shape()[0];
    if k == 0 || k > p || memberships.rank() != 2 || memberships.shape()[1] != p {
        return Err(param_err!("need 1 ≤ K ≤ P (K={k}, P={p})"));
    }
    let u = to_f64(memberships);
    // u ↦ u^m is monotone on [0, 1] for m > 1, so ranking u ranks u^m.
    let indices = u
        .chunks_exact(p)
        .flat_map(|row| top_k_desc(row, k))
        .collect();
    HigherOrderSet::new(k, indices, centroids.clone())
}

/// Selects, per node, the `k` nearest centroids (ties to the lower index).
pub fn nearest_centroids<T: Real>(
    nodes: &Tensor<T>,
    centroids: &Tensor<T>,
    k: usize,
) -> Result<HigherOrderSet<T>> {
    let (n, c) = node_matrix(nodes)?;
    let p = centroids.shape()[0];
    if k == 0 || k > p {
        return Err(param_err!("need 1 ≤ K ≤ P (K={k}, P={p})"));
    }
    let (x, cent) = (to_f64(nodes), to_f64(centroids));
    let mut indices = Vec::with_capacity(n * k);
    for i in 0..n {
        let neg: Vec<f64> = (0..p)
            .map(|j| -sq_dist(&x[i * c..(i + 1) * c], &cent[j * c..(j + 1) * c]))
            .collect();
        indices.extend(top_k_desc(&neg, k));
    }
    HigherOrderSet::new(k, indices, centroids.clone())
}

/// Strided init, then `v` rounds of (memberships, centroid update), then final
/// memberships against the updated centroids and top-`k` selection.
pub fn fuzzy_cmeans<T: Real>(
    nodes: &Tensor<T>,
    p: usize,
    k: usize,
    m: f64,
    v: usize,
) -> Result<(ClusterState<T>, HigherOrderSet<T>)> {
    if v == 0 {
        return Err(param_err!("Fuzzy C-Means needs at least one iteration"));
    }
    if m.partial_cmp(&1.0) != Some(Ordering::Greater) {
        return Err(param_err!("fuzziness m must exceed 1, got {m}"));
    }
    let (n, c) = node_matrix(nodes)?;
    if k == 0 || k > p {
        return Err(param_err!("need 1 ≤ K ≤ P (K={k}, P={p})"));
    }
    let x = to_f64(nodes);
    let mut cent = to_f64(&init_centroids(nodes, p)?);
    for _ in 0..v {
        let u = membership_rows(&x, &cent, n, p, c, m);
        cent = weighted_means(&x, &u, &cent, n, p, c, m).0;
    }
    let u = membership_rows(&x, &cent, n, p, c, m);
    let state = ClusterState {
        centroids: from_f64(&[p, c], &cent),
        memberships: from_f64(&[n, p], &u),
        fuzziness: m,
        iterations: v,
    };
    let set = top_k_by_membership(&state.memberships, &state.centroids, k)?;
    Ok((state, set))
}

fn hard_assign(x: &[f64], cent: &[f64], n: usize, p: usize, c: usize) -> Vec<usize> {
    (0..n)
        .map(|i| {
            let xi = &x[i * c..(i + 1) * c];
            let mut best = (f64::INFINITY, 0);
            for j in 0..p {
                let d = sq_dist(xi, &cent[j * c..(j + 1) * c]);
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect()
}

/// Lloyd's algorithm from the strided initialization. Memberships are one-hot.
pub fn kmeans<T: Real>(nodes: &Tensor<T>, p: usize, iters: usize) -> Result<ClusterState<T>> {
    let (n, c) = node_matrix(nodes)?;
    let x = to_f64(nodes);
    let mut cent = to_f64(&init_centroids(nodes, p)?);
    let one_hot = |assign: &[usize]| {
        let mut u = vec![0.0; n * p];
        for (i, &j) in assign.iter().enumerate() {
            u[i * p + j] = 1.0;
        }
        u
    };
    for _ in 0..iters {
        let u = one_hot(&hard_assign(&x, &cent, n, p, c));
        cent = weighted_means(&x, &u, &cent, n, p, c, 1.0).0;
    }
    let u = one_hot(&hard_assign(&x, &cent, n, p, c));
    Ok(ClusterState {
        centroids: from_f64(&[p, c], &cent),
        memberships: from_f64(&[n, p], &u),
        fuzziness: 1.0,
        iterations: iters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn strided_init() {
        let nodes = Tensor::<f64>::from_vec(&[100, 1], (0..100).map(f64::from).collect()).unwrap();
        let c = init_centroids(&nodes, 50).unwrap();
        let expect: Vec<f64> = (0..50).map(|p| (2 * p) as f64).collect();
        assert_eq!(c.data(), expect.as_slice());
        assert_eq!(
            init_centroids(&col(&[7.0, 8.0, 9.0, 10.0]), 2)
                .unwrap()
                .data(),
            &[7.0, 9.0]
        );
        assert_eq!(
            init_centroids(&col(&[3.0, 1.0]), 2).unwrap().data(),
            &[3.0, 1.0]
        );
        assert!(init_centroids(&col(&[1.0]), 2).is_err());
    }

    #[test]
    fn membership_examples() {
        let u = memberships(&col(&[0.0]), &col(&[1.0, 2.0]), 2.0).unwrap();
        assert!((u.data()[0] - 0.8).abs() < 1e-12);
        assert!((u.data()[1] - 0.2).abs() < 1e-12);

        let single = memberships(&col(&[0.3, -2.0]), &col(&[5.0]), 2.0).unwrap();
        assert_eq!(single.data(), &[1.0, 1.0]);

        let hit = memberships(&col(&[4.0]), &col(&[0.0, 1.0, 2.0, 4.0, 4.0]), 2.0).unwrap();
        assert_eq!(hit.data(), &[0.0, 0.0, 0.0, 1.0, 0.0]);

        assert!(memberships(&col(&[0.0]), &col(&[1.0]), 1.0).is_err());
    }

    #[test]
    fn centroid_update_examples() {
        let nodes = col(&[0.0, 1.0]);
        let u = Tensor::from_vec(&[2, 1], vec![0.8, 0.2]).unwrap();
        let up = update_centroids(&nodes, &u, 2.0, &col(&[9.0])).unwrap();
        assert!((up.centroids.data()[0] - 0.04 / 0.68).abs() < 1e-12);

        let mid = update_centroids(
            &col(&[-1.0, 3.0]),
            &Tensor::from_vec(&[2, 1], vec![0.5, 0.5]).unwrap(),
            2.0,
            &col(&[0.0]),
        )
        .unwrap();
        assert_eq!(mid.centroids.data(), &[1.0]);

        let hard = Tensor::from_vec(&[4, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let means =
            update_centroids(&col(&[0.0, 2.0, 10.0, 20.0]), &hard, 2.0, &col(&[0.0, 0.0])).unwrap();
        assert_eq!(means.centroids.data(), &[1.0, 15.0]);
    }

    #[test]
    fn empty_cluster_keeps_previous() {
        let u = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let up = update_centroids(&col(&[1.0, 3.0]), &u, 2.0, &col(&[0.0, 42.0])).unwrap();
        assert_eq!(up.centroids.data(), &[2.0, 42.0]);
        assert_eq!(up.kept, vec![1]);
    }

    #[test]
    fn top_k_with_k_equal_p_is_full_sorted_list() {
        let nodes = col(&[0.0, 0.9, 2.0, 5.0]);
        let (state, set) = fuzzy_cmeans(&nodes, 4, 4, 2.0, 1).unwrap();
        for i in 0..4 {
            let row = state.memberships.row(i);
            let sel = set.of(i);
            assert_eq!(sel.len(), 4);
            assert!(sel.windows(2).all(|w| row[w[0]] >= row[w[1]]));
        }
    }

    #[test]
    fn identical_nodes_are_a_fixed_point() {
        let nodes = Tensor::<f64>::from_vec(&[6, 2], [1.5, -2.0].repeat(6)).unwrap();
        let (state, _) = fuzzy_cmeans(&nodes, 3, 2, 2.0, 1).unwrap();
        for p in 0..3 {
            assert_eq!(state.centroids.row(p), &[1.5, -2.0]);
        }
    }

    #[test]
    fn kmeans_hand_run() {
        let st = kmeans(&col(&[0.0, 0.1, 10.0, 10.1]), 2, 2).unwrap();
        assert!((st.centroids.data()[0] - 0.05).abs() < 1e-12);
        assert!((st.centroids.data()[1] - 10.05).abs() < 1e-12);
        assert_eq!(st.memberships.row(2), &[0.0, 1.0]);
    }

    #[test]
    fn kmeans_with_p_equal_n_has_no_quantization_error() {
        let nodes = col(&[3.0, -1.0, 8.0]);
        let st = kmeans(&nodes, 3, 4).unwrap();
        let set = nearest_centroids(&nodes, &st.centroids, 1).unwrap();
        for i in 0..3 {
            assert_eq!(set.vectors(i).data(), nodes.row(i));
        }
    }
}
