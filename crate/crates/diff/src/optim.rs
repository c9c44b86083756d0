use serde::{Deserialize, Serialize};

use crate::error::{DiffError, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are indexed like the store they were
/// created for; buffers never get moments.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub(crate) m: Vec<Option<Tensor<T>>>,
    pub(crate) v: Vec<Option<Tensor<T>>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = |id: ParamId| {
            (store.kind(id) == ParamKind::Trainable).then(|| Tensor::zeros(store.get(id).shape()))
        };
        AdamState {
            config,
            step: 0,
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
        }
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.m.get(id.0).and_then(|m| m.as_ref())
    }

    pub fn second_moment(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.v.get(id.0).and_then(|v| v.as_ref())
    }

    /// One update. Any non-finite gradient aborts before a single parameter
    /// is touched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) -> Result<()> {
        for (id, g) in grads {
            if !g.all_finite() {
                return Err(DiffError::NonFinite {
                    op: format!("gradient of `{}`", store.entry(*id).name),
                });
            }
            if g.shape() != store.get(*id).shape() {
                return Err(DiffError::shape(
                    store.entry(*id).name.clone(),
                    format!("gradient {:?} vs parameter {:?}", g.shape(), store.get(*id).shape()),
                ));
            }
            if self.m.get(id.0).is_none_or(|m| m.is_none()) {
                return Err(DiffError::InvalidArgument(format!(
                    "`{}` has no optimiser state",
                    store.entry(*id).name
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        let (inv_bc1, inv_bc2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
        for (id, g) in grads {
            let m = self.m[id.0].as_mut().expect("checked above");
            let v = self.v[id.0].as_mut().expect("checked above");
            let p = store.get_mut(*id);
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m * inv_bc1;
                let v_hat = *v * inv_bc2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(v), ParamKind::Trainable).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let (mut s, id) = scalar_store(0.3);
        let mut adam = AdamState::new(AdamConfig::default(), &s);
        adam.step(&mut s, &[(id, Tensor::scalar(0.0))]).unwrap();
        assert_eq!(s.get(id).item(), 0.3);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut s, id) = scalar_store(0.0);
        let mut adam = AdamState::new(AdamConfig::default(), &s);
        adam.step(&mut s, &[(id, Tensor::scalar(1.0))]).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        let want = -1e-4 / (1.0 + 1e-8);
        assert!((s.get(id).item() - want).abs() < 1e-18);
    }

    #[test]
    fn constant_gradient_gives_monotone_descent() {
        let (mut s, id) = scalar_store(1.0);
        let mut adam = AdamState::new(AdamConfig { lr: 1e-2, ..Default::default() }, &s);
        let mut prev = s.get(id).item();
        for _ in 0..100 {
            adam.step(&mut s, &[(id, Tensor::scalar(0.7))]).unwrap();
            let now = s.get(id).item();
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn nan_gradient_is_a_hard_error() {
        let (mut s, id) = scalar_store(1.0);
        let mut adam = AdamState::new(AdamConfig::default(), &s);
        assert!(adam.step(&mut s, &[(id, Tensor::scalar(f64::NAN))]).is_err());
        assert_eq!(s.get(id).item(), 1.0);
        assert_eq!(adam.step, 0);
    }
}
