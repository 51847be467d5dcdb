use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, param_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Beta(α, α) concentration for mixup; 0 disables mixup.
    pub mixup_alpha: f64,
    /// Maximum time-mask width in frames.
    pub time_mask: usize,
    /// Maximum frequency-mask width in mel bins.
    pub freq_mask: usize,
    /// Masks per axis per sample.
    pub masks_per_sample: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mixup_alpha: 0.5,
            time_mask: 192,
            freq_mask: 48,
            masks_per_sample: 1,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            mixup_alpha: 0.0,
            time_mask: 0,
            freq_mask: 0,
            masks_per_sample: 0,
        }
    }

    pub fn validate(&self, frames: usize, bins: usize) -> Result<()> {
        if self.time_mask > frames || self.freq_mask > bins {
            return Err(crate::Error::Config(format!(
                "masks {}×{} do not fit a {frames}×{bins} input",
                self.time_mask, self.freq_mask
            )));
        }
        if self.mixup_alpha < 0.0 {
            return Err(crate::Error::Config(
                "mixup_alpha must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// `λ ~ Beta(α, α)`; α = 0 yields 1 (no mixing).
pub fn sample_lambda<R: Rng>(alpha: f64, rng: &mut R) -> f64 {
    if alpha <= 0.0 {
        return 1.0;
    }
    Beta::new(alpha, alpha).expect("positive alpha").sample(rng)
}

/// Convex combination `λ·a + (1−λ)·b` of features and of target vectors.
pub fn mixup(
    a: (&Tensor<f32>, &[f32]),
    b: (&Tensor<f32>, &[f32]),
    lambda: f64,
) -> Result<(Tensor<f32>, Vec<f32>)> {
    if a.0.shape() != b.0.shape() || a.1.len() != b.1.len() {
        return Err(dim_err!("mixup operands differ in shape"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(param_err!("mixup coefficient {lambda} is outside [0, 1]"));
    }
    let (la, lb) = (lambda as f32, (1.0 - lambda) as f32);
    if lambda == 1.0 {
        return Ok((a.0.clone(), a.1.to_vec()));
    }
    let x =
        a.0.data()
            .iter()
            .zip(b.0.data())
            .map(|(&p, &q)| la * p + lb * q)
            .collect();
    let y =
        a.1.iter()
            .zip(b.1)
            .map(|(&p, &q)| la * p + lb * q)
            .collect();
    Ok((Tensor::from_vec(a.0.shape(), x)?, y))
}

/// A rectangular band `[start, start + width)` along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Band {
    pub start: usize,
    pub width: usize,
}

/// Zeroes the given time bands (rows) and frequency bands (columns) of `[T × F]`.
pub fn apply_masks(x: &Tensor<f32>, time: &[Band], freq: &[Band]) -> Tensor<f32> {
    let (t, f) = (x.shape()[0], x.shape()[1]);
    let mut out = x.clone();
    let data = out.data_mut();
    for band in time {
        for row in band.start..(band.start + band.width).min(t) {
            data[row * f..(row + 1) * f]
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
    }
    for band in freq {
        for row in 0..t {
            for col in band.start..(band.start + band.width).min(f) {
                data[row * f + col] = 0.0;
            }
        }
    }
    out
}

fn draw_band<R: Rng>(max_width: usize, extent: usize, rng: &mut R) -> Band {
    let width = rng.gen_range(0..=max_width.min(extent));
    let start = rng.gen_range(0..=extent - width);
    Band { start, width }
}

/// Random time and frequency masking with uniformly drawn widths and offsets.
pub fn spec_augment<R: Rng>(x: &Tensor<f32>, cfg: &AugmentConfig, rng: &mut R) -> Tensor<f32> {
    let (t, f) = (x.shape()[0], x.shape()[1]);
    let time: Vec<Band> = (0..cfg.masks_per_sample)
        .map(|_| draw_band(cfg.time_mask, t, rng))
        .collect();
    let freq: Vec<Band> = (0..cfg.masks_per_sample)
        .map(|_| draw_band(cfg.freq_mask, f, rng))
        .collect();
    apply_masks(x, &time, &freq)
}
