//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moments per store entry (empty for non-trainable entries).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = |e: &crate::params::Entry<T>| {
            if e.trainable {
                vec![T::zero(); e.tensor.len()]
            } else {
                Vec::new()
            }
        };
        AdamState {
            m: params.entries().iter().map(zeros).collect(),
            v: params.entries().iter().map(zeros).collect(),
            step: 0,
        }
    }
}

pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Option<Vec<T>>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
        return Err(Error::config("adam.beta", "betas must lie in [0, 1)"));
    }
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for ((e, g), m) in params.entries().iter().zip(grads).zip(&state.m) {
        let want = if e.trainable { e.tensor.len() } else { 0 };
        if let Some(g) = g {
            if g.len() != e.tensor.len() {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient for {} has {} values, expected {}", e.name, g.len(), e.tensor.len()),
                ));
            }
        }
        if m.len() != want {
            return Err(Error::shape(
                "adam_step",
                format!("moment for {} has {} values, expected {want}", e.name, m.len()),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::c(cfg.beta1);
    let b2 = T::c(cfg.beta2);
    let c1 = T::one() - T::c(cfg.beta1.powi(t));
    let c2 = T::one() - T::c(cfg.beta2.powi(t));
    let lr = T::c(cfg.lr);
    let eps = T::c(cfg.epsilon);
    for (i, e) in params.entries_mut().iter_mut().enumerate() {
        let Some(g) = &grads[i] else { continue };
        if !e.trainable {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, p) in e.tensor.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (T::one() - b1) * g[j];
            v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *p = *p - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(w: f32) -> ParamStore<f32> {
        let mut p = ParamStore::new();
        p.push("w", Tensor::from_vec(vec![w]), true);
        p
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        for g in [3.0f32, -0.01, 250.0] {
            let mut p = single(1.0);
            let mut s = AdamState::new(&p);
            adam_step(&mut p, &[Some(vec![g])], &mut s, &AdamConfig::with_lr(0.05)).unwrap();
            let delta = p.tensor(0).data()[0] - 1.0;
            assert!((delta + 0.05 * g.signum()).abs() < 1e-4, "g={g} delta={delta}");
            assert_eq!(s.step, 1);
        }
    }

    #[test]
    fn zero_gradient_leaves_fresh_params_and_decays_moments() {
        let mut p = single(2.0);
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig::default();
        adam_step(&mut p, &[Some(vec![0.0])], &mut s, &cfg).unwrap();
        assert_eq!(p.tensor(0).data()[0], 2.0);

        adam_step(&mut p, &[Some(vec![1.0])], &mut s, &cfg).unwrap();
        let (m0, v0) = (s.m[0][0], s.v[0][0]);
        adam_step(&mut p, &[Some(vec![0.0])], &mut s, &cfg).unwrap();
        assert!((s.m[0][0] - 0.9 * m0).abs() < 1e-9);
        assert!((s.v[0][0] - 0.999 * v0).abs() < 1e-9);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut p = single(0.0);
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig::with_lr(0.1);
        for _ in 0..100 {
            let w = p.tensor(0).data()[0];
            adam_step(&mut p, &[Some(vec![2.0 * (w - 3.0)])], &mut s, &cfg).unwrap();
        }
        let w = p.tensor(0).data()[0];
        assert!((w - 3.0).abs() < 0.05, "w = {w}");
    }

    #[test]
    fn shape_mismatch() {
        let mut p = single(0.0);
        let mut s = AdamState::new(&p);
        let e = adam_step(&mut p, &[Some(vec![1.0, 2.0])], &mut s, &AdamConfig::default());
        assert!(e.is_err());
        let e = adam_step(&mut p, &[], &mut s, &AdamConfig::default());
        assert!(e.is_err());
    }
}
