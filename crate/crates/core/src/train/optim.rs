use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GradRecord, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Cosine decay of the learning rate to zero over the run.
    pub cosine: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            cosine: false,
        }
    }
}

impl OptimConfig {
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if !self.cosine || total == 0 {
            return self.lr;
        }
        let progress = (step as f64 / total as f64).min(1.0);
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// AdamW moments for every learnable parameter.
#[derive(Clone, Debug)]
pub struct OptimState<T = f32> {
    pub config: OptimConfig,
    pub step: u64,
    first: IndexMap<String, Tensor<T>>,
    second: IndexMap<String, Tensor<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(store: &ParamStore<T>, config: OptimConfig) -> Self {
        let zeros: IndexMap<String, Tensor<T>> = store
            .iter()
            .filter(|(_, e)| e.requires_grad)
            .map(|(k, e)| (k.to_string(), Tensor::zeros(e.tensor.shape())))
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.first.get(name)
    }
}

/// One AdamW update with decoupled weight decay:
/// `θ ← θ − lr·(m̂/(√v̂ + ε) + λ·θ)`.
///
/// Nothing is modified if any gradient is non-finite or missing.
pub fn adamw_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &GradRecord<T>,
    state: &mut OptimState<T>,
    lr: f64,
) -> Result<()> {
    for name in state.first.keys() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Optimizer(format!("no gradient for {name}")))?;
        if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Optimizer(format!(
                "non-finite gradient in {name} at element {pos}"
            )));
        }
    }
    state.step += 1;
    let c = &state.config;
    let t = state.step as i32;
    let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
    for (name, m) in state.first.iter_mut() {
        let v = state.second.get_mut(name).expect("moments share keys");
        let g = grads.get(name).expect("checked above");
        let theta = store.get_mut(name)?;
        for (((p, mi), vi), &gi) in theta
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            let gf = gi.f64();
            let mf = c.beta1 * mi.f64() + (1.0 - c.beta1) * gf;
            let vf = c.beta2 * vi.f64() + (1.0 - c.beta2) * gf * gf;
            *mi = T::of(mf);
            *vi = T::of(vf);
            let update = (mf / bc1) / ((vf / bc2).sqrt() + c.eps) + c.weight_decay * p.f64();
            *p = T::of(p.f64() - lr * update);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::scalar(v), true).unwrap();
        s
    }

    fn grad(name: &str, g: f64) -> GradRecord<f64> {
        GradRecord::from_map(
            [(name.to_string(), Tensor::scalar(g))]
                .into_iter()
                .collect(),
        )
    }

    #[test]
    fn zero_grad_zero_decay_is_a_no_op() {
        let mut s = one("w", 0.7);
        let mut st = OptimState::new(
            &s,
            OptimConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        adamw_step(&mut s, &grad("w", 0.0), &mut st, 0.1).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = one("w", 0.0);
        let mut st = OptimState::new(
            &s,
            OptimConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        adamw_step(&mut s, &grad("w", 1.0), &mut st, 0.1).unwrap();
        assert!((s.get("w").unwrap().data()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn decay_only_path() {
        let mut s = one("w", 1.0);
        let mut st = OptimState::new(&s, OptimConfig::default());
        adamw_step(&mut s, &grad("w", 0.0), &mut st, 0.1).unwrap();
        assert!((s.get("w").unwrap().data()[0] - 0.995).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_aborts_without_touching_state() {
        let mut s = one("w", 1.0);
        let mut st = OptimState::new(&s, OptimConfig::default());
        assert!(matches!(
            adamw_step(&mut s, &grad("w", f64::NAN), &mut st, 0.1),
            Err(Error::Optimizer(_))
        ));
        assert_eq!(st.step, 0);
        assert_eq!(s.get("w").unwrap().data(), &[1.0]);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let c = OptimConfig {
            cosine: true,
            lr: 2.0,
            ..Default::default()
        };
        assert_eq!(c.lr_at(0, 10), 2.0);
        assert!(c.lr_at(10, 10).abs() < 1e-12);
        assert!((c.lr_at(5, 10) - 1.0).abs() < 1e-12);
    }
}
