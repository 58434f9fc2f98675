//! Adam with bias-corrected moment estimates.

use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("gradient for `{0}` contains non-finite values; step rejected")]
    NonFiniteGradient(String),
    #[error("gradient for `{name}` has shape {got:?}, parameter has {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("learning rate must be positive, got {0}")]
    InvalidLearningRate(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates shaped like the parameters they track.
#[derive(Debug, Clone)]
pub struct AdamState<T: Real> {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Result<Self, OptimError> {
        if !(config.lr > 0.0) {
            return Err(OptimError::InvalidLearningRate(config.lr));
        }
        let zeros: Vec<Tensor<T>> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Ok(Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        })
    }

    pub fn first_moment(&self, slot: usize) -> &Tensor<T> {
        &self.first[slot]
    }

    pub fn second_moment(&self, slot: usize) -> &Tensor<T> {
        &self.second[slot]
    }

    /// Extends the state after parameters were appended to the store.
    pub fn sync_slots(&mut self, params: &ParamStore<T>) {
        for (slot, (_, t)) in params.iter().enumerate().skip(self.first.len()) {
            debug_assert_eq!(slot, self.first.len());
            self.first.push(Tensor::zeros(t.shape()));
            self.second.push(Tensor::zeros(t.shape()));
        }
    }

    /// Applies one update. `grads[i]` of `None` means a zero gradient. The
    /// whole step is validated before anything is mutated.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &[Option<Tensor<T>>],
    ) -> Result<(), OptimError> {
        for (slot, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (name, p) = params.entry(slot);
            if g.shape() != p.shape() {
                return Err(OptimError::ShapeMismatch {
                    name: name.to_string(),
                    expected: p.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(OptimError::NonFiniteGradient(name.to_string()));
            }
        }
        self.step += 1;
        let c = self.config;
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::from_f64(c.lr);
        let eps = T::from_f64(c.eps);
        for slot in 0..params.len() {
            let m = self.first[slot].data_mut();
            let v = self.second[slot].data_mut();
            let p = params.get_mut(slot).data_mut();
            match grads.get(slot).and_then(|g| g.as_ref()) {
                Some(g) => {
                    for i in 0..p.len() {
                        let gi = g.data()[i];
                        m[i] = b1 * m[i] + (one - b1) * gi;
                        v[i] = b2 * v[i] + (one - b2) * gi * gi;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        p[i] = p[i] - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
                None => {
                    // Moments still decay under a zero gradient.
                    for i in 0..p.len() {
                        m[i] = b1 * m[i];
                        v[i] = b2 * v[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        p[i] = p[i] - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (i, &v) in values.iter().enumerate() {
            s.push(&format!("p{i}"), Tensor::scalar(v));
        }
        s
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = store(&[0.5, -1.0]);
        let mut st = AdamState::new(&p, AdamConfig::default()).unwrap();
        let g = vec![Some(Tensor::scalar(0.0)), Some(Tensor::scalar(0.0))];
        st.step(&mut p, &g).unwrap();
        assert_eq!(p.get(0).item(), 0.5);
        assert_eq!(p.get(1).item(), -1.0);
        assert_eq!(st.first_moment(0).item(), 0.0);
        assert_eq!(st.second_moment(1).item(), 0.0);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_matches_formula() {
        let mut p = store(&[0.0]);
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(&p, cfg).unwrap();
        st.step(&mut p, &[Some(Tensor::scalar(1.0))]).unwrap();
        // m = 0.1, v = 0.001; bias correction restores 1 and 1.
        let m = (1.0 - cfg.beta1) * 1.0;
        let v = (1.0 - cfg.beta2) * 1.0;
        let expected =
            0.0 - cfg.lr * (m / (1.0 - cfg.beta1)) / ((v / (1.0 - cfg.beta2)).sqrt() + cfg.eps);
        assert_eq!(p.get(0).item(), expected);
        assert!((p.get(0).item() + 1e-4).abs() < 1e-11);
    }

    #[test]
    fn identical_inputs_identical_updates() {
        let mut p = store(&[0.3, 0.3]);
        let mut st = AdamState::new(&p, AdamConfig::default()).unwrap();
        for k in 0..5 {
            let g = Tensor::scalar(0.1 * k as f64 - 0.2);
            st.step(&mut p, &[Some(g.clone()), Some(g)]).unwrap();
        }
        assert_eq!(p.get(0).item(), p.get(1).item());
    }

    #[test]
    fn non_finite_gradient_rejected_without_mutation() {
        let mut p = store(&[1.0, 2.0]);
        let mut st = AdamState::new(&p, AdamConfig::default()).unwrap();
        let g = vec![Some(Tensor::scalar(0.5)), Some(Tensor::scalar(f64::NAN))];
        assert!(matches!(
            st.step(&mut p, &g),
            Err(OptimError::NonFiniteGradient(n)) if n == "p1"
        ));
        assert_eq!(st.step, 0);
        assert_eq!(p.get(0).item(), 1.0);
    }

    #[test]
    fn rejects_non_positive_lr() {
        let p = store(&[1.0]);
        let cfg = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        assert!(AdamState::new(&p, cfg).is_err());
    }
}
