use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::trainer::Dataset;
use crate::error::{param_err, Result};
use crate::tensor::Tensor;

/// A learnable multilabel toy set: each class owns a random `[T × F]`
/// template, each clip sums the templates of one or two classes and adds
/// Gaussian noise of standard deviation `noise`. Sample `i` always carries
/// class `i mod classes`, so every class has positives once `n ≥ classes`.
pub fn synthetic_multilabel(
    n: usize,
    frames: usize,
    bins: usize,
    classes: usize,
    noise: f32,
    seed: u64,
) -> Result<Dataset> {
    if classes == 0 || n == 0 {
        return Err(param_err!(
            "synthetic set needs at least one sample and one class"
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = |rng: &mut ChaCha8Rng| -> f32 { StandardNormal.sample(rng) };
    let templates: Vec<Vec<f32>> = (0..classes)
        .map(|_| (0..frames * bins).map(|_| gauss(&mut rng)).collect())
        .collect();
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut tags = vec![i % classes];
        if classes > 1 && rng.gen_bool(0.5) {
            let extra = sample(&mut rng, classes, 2)
                .into_iter()
                .find(|&c| c != tags[0])
                .expect("two distinct draws");
            tags.push(extra);
            tags.sort_unstable();
        }
        let data = (0..frames * bins)
            .map(|j| tags.iter().map(|&c| templates[c][j]).sum::<f32>() + noise * gauss(&mut rng))
            .collect();
        features.push(Tensor::from_vec(&[frames, bins], data)?);
        labels.push(tags);
    }
    Dataset::new(features, labels)
}
