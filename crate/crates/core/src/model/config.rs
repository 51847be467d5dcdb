use serde::{Deserialize, Serialize};

use crate::clustering::ClusteringMethod;
use crate::error::{Error, Result};
use crate::kernels::out_extent;
use crate::lhg::KernelVariant;

/// Architecture hyperparameters. Defaults are the reference AudioSet setup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channel width per stage.
    pub channels: Vec<usize>,
    /// LHG blocks per stage.
    pub depths: Vec<usize>,
    /// Neighbors per node (`k`).
    pub knn_k: usize,
    /// Centroids kept per node (`K`).
    pub top_k_centroids: usize,
    /// Centroids per clustering (`P`).
    pub num_centroids: usize,
    /// Fuzzy C-Means exponent (`m`).
    pub fuzziness: f64,
    /// Fuzzy C-Means rounds (`v`).
    pub fcm_iters: usize,
    pub ffn_expansion: usize,
    pub num_classes: usize,
    pub stem_channels: Vec<usize>,
    pub head_hidden: usize,
    /// Time frames of the input spectrogram.
    pub input_frames: usize,
    /// Mel bins of the input spectrogram.
    pub input_bins: usize,
    pub kernel: KernelVariant,
    pub clustering: ClusteringMethod,
    /// Lloyd iterations when `clustering` is k-means.
    pub kmeans_iters: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: vec![80, 160, 320, 640],
            depths: vec![2, 2, 6, 2],
            knn_k: 25,
            top_k_centroids: 10,
            num_centroids: 50,
            fuzziness: 2.0,
            fcm_iters: 1,
            ffn_expansion: 4,
            num_classes: 527,
            stem_channels: vec![40, 40, 80, 80],
            head_hidden: 1024,
            input_frames: 1024,
            input_bins: 128,
            kernel: KernelVariant::LocalHigher,
            clustering: ClusteringMethod::FuzzyCMeans,
            kmeans_iters: 1,
        }
    }
}

pub const STEM_STRIDES: [usize; 4] = [2, 1, 2, 1];

/// Spatial layout and effective graph sizes of one stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StageGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub nodes: usize,
    /// Neighbors used at this stage, `min(k, N−1)`.
    pub knn_k: usize,
    /// Centroids used at this stage, `min(P, N)`.
    pub centroids: usize,
    /// Centroids kept per node, `min(K, P_t)`.
    pub top_k: usize,
}

impl ModelConfig {
    /// Desk-scale configuration used by gradient checks and the overfitting probe.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            channels: vec![8, 16, 32, 64],
            depths: vec![1, 1, 1, 1],
            knn_k: 3,
            top_k_centroids: 2,
            num_centroids: 4,
            stem_channels: vec![4, 4, 8, 8],
            head_hidden: 32,
            input_frames: 64,
            input_bins: 16,
            num_classes,
            ..Self::default()
        }
    }

    /// Checks internal consistency and returns the per-stage geometry.
    pub fn validate(&self) -> Result<Vec<StageGeometry>> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.channels.len() != 4 || self.depths.len() != 4 {
            return bad(format!(
                "channels and depths need four stages, got {} and {}",
                self.channels.len(),
                self.depths.len()
            ));
        }
        if self.stem_channels.len() != 4 {
            return bad("stem_channels needs four entries".into());
        }
        if self.stem_channels[3] != self.channels[0] {
            return bad(format!(
                "stem must end at the stage-1 width {} (got {})",
                self.channels[0], self.stem_channels[3]
            ));
        }
        if self
            .channels
            .iter()
            .chain(&self.stem_channels)
            .any(|&c| c == 0)
        {
            return bad("channel counts must be positive".into());
        }
        if self.knn_k == 0 || self.top_k_centroids == 0 || self.num_centroids == 0 {
            return bad("k, K and P must be positive".into());
        }
        if self.top_k_centroids > self.num_centroids {
            return bad(format!(
                "K={} exceeds P={}",
                self.top_k_centroids, self.num_centroids
            ));
        }
        if self.fuzziness.partial_cmp(&1.0) != Some(std::cmp::Ordering::Greater) {
            return bad(format!("fuzziness must exceed 1, got {}", self.fuzziness));
        }
        if self.fcm_iters == 0
            || self.ffn_expansion == 0
            || self.num_classes == 0
            || self.head_hidden == 0
        {
            return bad(
                "fcm_iters, ffn_expansion, num_classes and head_hidden must be positive".into(),
            );
        }

        let (mut h, mut w) = (self.input_frames, self.input_bins);
        for s in STEM_STRIDES {
            h = out_extent(h, 3, s, 1).map_err(|e| Error::Config(e.to_string()))?;
            w = out_extent(w, 3, s, 1).map_err(|e| Error::Config(e.to_string()))?;
        }
        let mut stages = Vec::with_capacity(4);
        for (t, &c) in self.channels.iter().enumerate() {
            if t > 0 {
                h = out_extent(h, 3, 2, 1).map_err(|e| Error::Config(e.to_string()))?;
                w = out_extent(w, 3, 2, 1).map_err(|e| Error::Config(e.to_string()))?;
            }
            let nodes = h * w;
            if nodes < 2 {
                return bad(format!("stage {} has fewer than two nodes", t + 1));
            }
            if t == 0 && (self.knn_k >= nodes || self.num_centroids > nodes) {
                return bad(format!(
                    "k={} and P={} must fit the {nodes} stage-1 nodes",
                    self.knn_k, self.num_centroids
                ));
            }
            let knn_k = self.knn_k.min(nodes - 1);
            let centroids = self.num_centroids.min(nodes);
            stages.push(StageGeometry {
                height: h,
                width: w,
                channels: c,
                nodes,
                knn_k,
                centroids,
                top_k: self.top_k_centroids.min(centroids),
            });
        }
        Ok(stages)
    }
}
