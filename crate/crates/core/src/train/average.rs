use std::path::Path;

use crate::error::{param_err, Error, Result};
use crate::model::Checkpoint;
use crate::tensor::Tensor;

/// Elementwise weighted average of checkpoints sharing one tensor directory.
/// Weights must be non-negative and sum to one.
pub fn average_checkpoints(checkpoints: &[Checkpoint], weights: &[f64]) -> Result<Checkpoint> {
    let first = checkpoints
        .first()
        .ok_or_else(|| param_err!("no checkpoints to average"))?;
    if weights.len() != checkpoints.len() {
        return Err(param_err!(
            "{} weights for {} checkpoints",
            weights.len(),
            checkpoints.len()
        ));
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) || (total - 1.0).abs() > 1e-6 {
        return Err(param_err!(
            "averaging weights must be non-negative and sum to 1, got {total}"
        ));
    }
    if let Some(i) = checkpoints.iter().position(|c| !c.same_directory(first)) {
        return Err(Error::Format(format!(
            "checkpoint {i} has a different tensor directory"
        )));
    }
    let mut out = first.clone();
    for (name, tensor) in out.tensors.iter_mut() {
        let mut acc = vec![0.0f64; tensor.len()];
        for (ckpt, &w) in checkpoints.iter().zip(weights) {
            for (a, &v) in acc.iter_mut().zip(ckpt.tensors[name].data()) {
                *a += w * v as f64;
            }
        }
        *tensor = Tensor::from_vec(tensor.shape(), acc.into_iter().map(|v| v as f32).collect())?;
    }
    Ok(out)
}

/// Uniform weights when none are given.
pub fn average_files<P: AsRef<Path>>(paths: &[P], weights: Option<&[f64]>) -> Result<Checkpoint> {
    let ckpts = paths
        .iter()
        .map(Checkpoint::load)
        .collect::<Result<Vec<_>>>()?;
    let uniform = vec![1.0 / ckpts.len().max(1) as f64; ckpts.len()];
    average_checkpoints(&ckpts, weights.unwrap_or(&uniform))
}

#[cfg(test)]
mod tests {
    use super::*;
    use indexmap::IndexMap;

    fn ck(v: f32) -> Checkpoint {
        let mut tensors = IndexMap::new();
        tensors.insert("a".to_string(), Tensor::full(&[2, 2], v));
        Checkpoint {
            config: serde_json::Value::Null,
            tensors,
        }
    }

    #[test]
    fn identical_inputs_are_a_fixed_point() {
        let avg = average_checkpoints(&[ck(3.0), ck(3.0)], &[0.5, 0.5]).unwrap();
        assert_eq!(avg, ck(3.0));
    }

    #[test]
    fn midpoint() {
        let avg = average_checkpoints(&[ck(0.0), ck(2.0)], &[0.5, 0.5]).unwrap();
        assert_eq!(avg, ck(1.0));
    }

    #[test]
    fn convex_combination_and_symmetry() {
        let avg = average_checkpoints(&[ck(0.0), ck(4.0)], &[0.25, 0.75]).unwrap();
        assert_eq!(avg, ck(3.0));
        let avg = average_checkpoints(&[ck(1.5), ck(-1.5)], &[0.5, 0.5]).unwrap();
        assert_eq!(avg, ck(0.0));
    }

    #[test]
    fn rejects_bad_weights_and_directories() {
        assert!(average_checkpoints(&[ck(0.0), ck(2.0)], &[0.5, 0.6]).is_err());
        let mut other = ck(1.0);
        other.tensors.insert("b".into(), Tensor::zeros(&[1]));
        assert!(matches!(
            average_checkpoints(&[ck(0.0), other], &[0.5, 0.5]),
            Err(Error::Format(_))
        ));
    }
}
