//! Variance schedules, forward noising, the reverse step and classifier-free
//! guidance.
//!
//! Time steps are 1-based: `t = 1` is the least noisy step and `t = T` the
//! noisiest. Array index `t - 1` holds the values for step `t`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Real, ShapeError, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("schedule needs at least one step, got {0}")]
    EmptySchedule(i64),
    #[error("time step {t} outside 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("guidance scale must be finite, got {0}")]
    InvalidScale(f64),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    #[default]
    Cosine,
}

/// Reverse kernel used by [`DiffusionSchedule::posterior_step`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReverseKernel {
    /// x0-parameterized DDPM posterior `q(x_{t-1} | x_t, x0_hat)`.
    #[default]
    Posterior,
    /// `N(sqrt(abar_{t-1}) x0_hat, (1 - abar_{t-1}) I)`, ignores `x_t`.
    Simplified,
}

/// Noise schedule with the derived posterior coefficients. Values are kept in
/// `f64` and cast at use.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_x0: Vec<f64>,
    posterior_xt: Vec<f64>,
    posterior_var: Vec<f64>,
}

pub const DEFAULT_STEPS: usize = 500;
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Posterior mean coefficients `(c_x0, c_xt)` and variance for one step.
pub fn posterior_coefficients(beta: f64, alpha_bar: f64, alpha_bar_prev: f64) -> (f64, f64, f64) {
    let denom = 1.0 - alpha_bar;
    let c_x0 = alpha_bar_prev.sqrt() * beta / denom;
    let c_xt = (1.0 - beta).sqrt() * (1.0 - alpha_bar_prev) / denom;
    let var = beta * (1.0 - alpha_bar_prev) / denom;
    (c_x0, c_xt, var)
}

impl DiffusionSchedule {
    pub fn new(steps: i64, kind: ScheduleKind) -> Result<Self, DiffusionError> {
        if steps < 1 {
            return Err(DiffusionError::EmptySchedule(steps));
        }
        let n = steps as usize;
        let beta: Vec<f64> = match kind {
            ScheduleKind::Linear => {
                let (lo, hi) = (1e-4, 0.02);
                (0..n)
                    .map(|i| {
                        if n == 1 {
                            lo
                        } else {
                            lo + (hi - lo) * i as f64 / (n - 1) as f64
                        }
                    })
                    .collect()
            }
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    (((t / n as f64) + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)
                        * std::f64::consts::FRAC_PI_2)
                        .cos()
                        .powi(2)
                };
                (0..n)
                    .map(|i| {
                        let prev = f(i as f64) / f(0.0);
                        let next = f((i + 1) as f64) / f(0.0);
                        (1.0 - next / prev).min(MAX_BETA)
                    })
                    .collect()
            }
        };
        Ok(Self::from_betas(kind, beta))
    }

    fn from_betas(kind: ScheduleKind, beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let mut posterior_x0 = Vec::with_capacity(beta.len());
        let mut posterior_xt = Vec::with_capacity(beta.len());
        let mut posterior_var = Vec::with_capacity(beta.len());
        for i in 0..beta.len() {
            let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
            let (c0, ct, v) = posterior_coefficients(beta[i], alpha_bar[i], prev);
            posterior_x0.push(c0);
            posterior_xt.push(ct);
            posterior_var.push(v);
        }
        Self {
            kind,
            beta,
            alpha,
            alpha_bar,
            posterior_x0,
            posterior_xt,
            posterior_var,
        }
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check(&self, t: usize) -> Result<usize, DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::StepOutOfRange {
                t,
                steps: self.steps(),
            });
        }
        Ok(t - 1)
    }

    /// `abar_t`, with `abar_0 = 1`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// `(c_x0, c_xt, variance)` of the posterior at step `t`.
    pub fn posterior(&self, t: usize) -> Result<(f64, f64, f64), DiffusionError> {
        let i = self.check(t)?;
        Ok((
            self.posterior_x0[i],
            self.posterior_xt[i],
            self.posterior_var[i],
        ))
    }

    /// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
    pub fn q_sample<T: Real>(
        &self,
        x0: &Tensor<T>,
        t: usize,
        eps: &Tensor<T>,
    ) -> Result<Tensor<T>, DiffusionError> {
        let i = self.check(t)?;
        let a = T::from_f64(self.alpha_bar[i].sqrt());
        let b = T::from_f64((1.0 - self.alpha_bar[i]).sqrt());
        Ok(x0.zip_map(eps, |x, e| a * x + b * e)?)
    }

    /// One forward step `q(x_t | x_{t-1})`: `sqrt(1 - beta_t) x + sqrt(beta_t) eps`.
    pub fn q_step<T: Real>(
        &self,
        x_prev: &Tensor<T>,
        t: usize,
        eps: &Tensor<T>,
    ) -> Result<Tensor<T>, DiffusionError> {
        let i = self.check(t)?;
        let a = T::from_f64(self.alpha[i].sqrt());
        let b = T::from_f64(self.beta[i].sqrt());
        Ok(x_prev.zip_map(eps, |x, e| a * x + b * e)?)
    }

    /// Draws `x_{t-1}` given `x_t` and the model's clean estimate. The final
    /// step `t = 1` is deterministic and returns `x0_hat` unchanged.
    pub fn posterior_step<T: Real>(
        &self,
        kernel: ReverseKernel,
        x_t: &Tensor<T>,
        x0_hat: &Tensor<T>,
        t: usize,
        noise: &Tensor<T>,
    ) -> Result<Tensor<T>, DiffusionError> {
        let i = self.check(t)?;
        x_t.expect_same_shape(x0_hat)?;
        x_t.expect_same_shape(noise)?;
        if t == 1 {
            return Ok(x0_hat.clone());
        }
        match kernel {
            ReverseKernel::Posterior => {
                let c0 = T::from_f64(self.posterior_x0[i]);
                let ct = T::from_f64(self.posterior_xt[i]);
                let sd = T::from_f64(self.posterior_var[i].sqrt());
                let data = x_t
                    .data()
                    .iter()
                    .zip(x0_hat.data())
                    .zip(noise.data())
                    .map(|((&xt, &x0), &z)| c0 * x0 + ct * xt + sd * z)
                    .collect();
                Ok(Tensor::from_parts(x_t.shape().to_vec(), data))
            }
            ReverseKernel::Simplified => {
                let prev = self.alpha_bar_at(t - 1);
                let m = T::from_f64(prev.sqrt());
                let sd = T::from_f64((1.0 - prev).sqrt());
                Ok(x0_hat.zip_map(noise, |x0, z| m * x0 + sd * z)?)
            }
        }
    }
}

/// Standard-normal tensor.
pub fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Serializable schedule description.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffusionSpec {
    pub steps: usize,
    pub schedule: ScheduleKind,
}

impl Default for DiffusionSpec {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            schedule: ScheduleKind::Cosine,
        }
    }
}

impl DiffusionSpec {
    pub fn build(&self) -> Result<DiffusionSchedule, DiffusionError> {
        DiffusionSchedule::new(self.steps as i64, self.schedule)
    }
}

/// Classifier-free guidance setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub enabled: bool,
}

impl GuidanceConfig {
    pub const DIVERSE: f64 = 0.5;

    pub fn new(scale: f64) -> Result<Self, DiffusionError> {
        if !scale.is_finite() {
            return Err(DiffusionError::InvalidScale(scale));
        }
        Ok(Self {
            scale,
            enabled: true,
        })
    }

    /// Conditional prediction only.
    pub fn conditional() -> Self {
        Self {
            scale: 1.0,
            enabled: false,
        }
    }

    /// True when the unconditional pass can be skipped.
    pub fn is_conditional_only(&self) -> bool {
        !self.enabled || self.scale == 1.0
    }
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: Self::DIVERSE,
            enabled: true,
        }
    }
}

/// `uncond + s (cond - uncond)`, evaluated as `(1 - s) uncond + s cond` so
/// that `s = 1` and `s = 0` reproduce their inputs exactly.
pub fn cfg_combine<T: Real>(
    uncond: &Tensor<T>,
    cond: &Tensor<T>,
    cfg: GuidanceConfig,
) -> Result<Tensor<T>, DiffusionError> {
    uncond.expect_same_shape(cond)?;
    if !cfg.scale.is_finite() {
        return Err(DiffusionError::InvalidScale(cfg.scale));
    }
    if !cfg.enabled {
        return Ok(cond.clone());
    }
    let s = T::from_f64(cfg.scale);
    let r = T::one() - s;
    Ok(uncond.zip_map(cond, |u, c| r * u + s * c)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_length() {
        let s = DiffusionSchedule::new(DEFAULT_STEPS as i64, ScheduleKind::Cosine).unwrap();
        assert_eq!(s.beta().len(), 500);
        assert_eq!(s.alpha_bar().len(), 500);
    }

    #[test]
    fn rejects_empty() {
        assert!(matches!(
            DiffusionSchedule::new(0, ScheduleKind::Linear),
            Err(DiffusionError::EmptySchedule(0))
        ));
    }

    #[test]
    fn first_alpha_bar_is_first_alpha() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = DiffusionSchedule::new(50, kind).unwrap();
            assert_eq!(s.alpha_bar()[0], 1.0 - s.beta()[0]);
        }
    }

    #[test]
    fn linear_alpha_bar_matches_loop() {
        let s = DiffusionSchedule::new(10, ScheduleKind::Linear).unwrap();
        let mut prod = 1.0;
        for i in 0..10 {
            let b = 1e-4 + (0.02 - 1e-4) * i as f64 / 9.0;
            prod *= 1.0 - b;
        }
        assert!((s.alpha_bar()[9] - prod).abs() < 1e-12);
        // Frozen from the loop above.
        assert!(
            (s.alpha_bar()[9] - 0.9037394161512371).abs() < 1e-12,
            "{}",
            s.alpha_bar()[9]
        );
    }

    #[test]
    fn strictly_decreasing_and_betas_in_range() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            for steps in [1, 2, 10, 500, 1000] {
                let s = DiffusionSchedule::new(steps, kind).unwrap();
                assert!(s.beta().iter().all(|&b| b > 0.0 && b < 1.0));
                assert!(s.alpha_bar().windows(2).all(|w| w[1] < w[0]));
            }
        }
    }

    #[test]
    fn cosine_betas_clipped() {
        let s = DiffusionSchedule::new(500, ScheduleKind::Cosine).unwrap();
        assert!(s.beta().iter().all(|&b| b <= MAX_BETA));
        assert_eq!(*s.beta().last().unwrap(), MAX_BETA);
    }

    #[test]
    fn q_sample_branches() {
        let s = DiffusionSchedule::new(100, ScheduleKind::Cosine).unwrap();
        let x0 = Tensor::<f64>::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let zeros = Tensor::zeros(&[3]);
        let t = 40;
        let a = s.alpha_bar_at(t);
        let out = s.q_sample(&x0, t, &zeros).unwrap();
        assert_eq!(out, x0.scale(a.sqrt()));
        let eps = Tensor::<f64>::new(vec![3], vec![0.3, 0.1, -1.0]).unwrap();
        let out = s.q_sample(&zeros, t, &eps).unwrap();
        assert_eq!(out, eps.scale((1.0 - a).sqrt()));
        assert!(matches!(
            s.q_sample(&x0, 0, &zeros),
            Err(DiffusionError::StepOutOfRange { .. })
        ));
        assert!(s.q_sample(&x0, 101, &zeros).is_err());
    }

    #[test]
    fn q_sample_quarter_alpha_bar() {
        // A one-step schedule with beta = 0.75 gives abar_1 = 0.25.
        let s = DiffusionSchedule::from_betas(ScheduleKind::Linear, vec![0.75]);
        let one = Tensor::<f64>::scalar(1.0);
        let v = s.q_sample(&one, 1, &one).unwrap().item();
        assert!((v - (0.5 + 0.75f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn terminal_step_is_deterministic() {
        let s = DiffusionSchedule::new(10, ScheduleKind::Linear).unwrap();
        let xt = Tensor::<f32>::full(&[4], 3.0);
        let x0 = Tensor::<f32>::full(&[4], -1.25);
        let noise = Tensor::<f32>::full(&[4], 100.0);
        for kernel in [ReverseKernel::Posterior, ReverseKernel::Simplified] {
            let out = s.posterior_step(kernel, &xt, &x0, 1, &noise).unwrap();
            assert_eq!(out, x0);
        }
        let (c0, ct, var) = s.posterior(1).unwrap();
        assert!((c0 - 1.0).abs() < 1e-12);
        assert_eq!(ct, 0.0);
        assert_eq!(var, 0.0);
    }

    #[test]
    fn three_step_linear_coefficients() {
        let s = DiffusionSchedule::new(3, ScheduleKind::Linear).unwrap();
        // Hand evaluation: beta = [1e-4, 0.01005, 0.02].
        let b1: f64 = 1e-4;
        let b2 = 1e-4 + (0.02 - 1e-4) * 0.5;
        let ab1 = 1.0 - b1;
        let ab2 = ab1 * (1.0 - b2);
        let c0 = ab1.sqrt() * b2 / (1.0 - ab2);
        let ct = (1.0 - b2).sqrt() * (1.0 - ab1) / (1.0 - ab2);
        let var = b2 * (1.0 - ab1) / (1.0 - ab2);
        let (g0, gt, gv) = s.posterior(2).unwrap();
        assert!((g0 - c0).abs() < 1e-14);
        assert!((gt - ct).abs() < 1e-14);
        assert!((gv - var).abs() < 1e-14);
        // Frozen values.
        assert!((g0 - 0.9901963).abs() < 1e-6, "{g0}");
        assert!((gt - 0.0098036).abs() < 1e-6, "{gt}");
    }

    #[test]
    fn constant_alpha_bar_keeps_x_t() {
        let (c0, ct, _) = posterior_coefficients(0.0, 0.6, 0.6);
        assert_eq!(c0, 0.0);
        assert_eq!(ct, 1.0);
        assert_eq!(c0 + ct, 1.0);
    }

    #[test]
    fn simplified_kernel_ignores_x_t() {
        let s = DiffusionSchedule::new(20, ScheduleKind::Cosine).unwrap();
        let x0 = Tensor::<f64>::full(&[2], 0.5);
        let z = Tensor::<f64>::full(&[2], 0.1);
        let a = s
            .posterior_step(
                ReverseKernel::Simplified,
                &Tensor::full(&[2], 9.0),
                &x0,
                10,
                &z,
            )
            .unwrap();
        let b = s
            .posterior_step(
                ReverseKernel::Simplified,
                &Tensor::full(&[2], -9.0),
                &x0,
                10,
                &z,
            )
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cfg_identities() {
        let u = Tensor::<f32>::new(vec![3], vec![0.1, -2.0, 7.3]).unwrap();
        let c = Tensor::<f32>::new(vec![3], vec![0.3, 5.5, -1.1]).unwrap();
        assert_eq!(
            cfg_combine(&u, &c, GuidanceConfig::new(1.0).unwrap()).unwrap(),
            c
        );
        assert_eq!(
            cfg_combine(&u, &c, GuidanceConfig::new(0.0).unwrap()).unwrap(),
            u
        );
        let mid = cfg_combine(
            &Tensor::<f32>::scalar(2.0),
            &Tensor::scalar(4.0),
            GuidanceConfig::new(0.5).unwrap(),
        )
        .unwrap();
        assert_eq!(mid.item(), 3.0);
        assert!(cfg_combine(&u, &Tensor::zeros(&[4]), GuidanceConfig::default()).is_err());
        assert!(GuidanceConfig::new(f64::NAN).is_err());
    }

    #[test]
    fn q_sample_variance_matches_schedule() {
        let s = DiffusionSchedule::new(500, ScheduleKind::Cosine).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let x0 = Tensor::<f64>::zeros(&[n]);
        for t in [1, 50, 200, 350, 500] {
            let eps = Tensor::from_fn(&[n], |_| StandardNormal.sample(&mut rng));
            let xt = s.q_sample(&x0, t, &eps).unwrap();
            let mean = xt.mean();
            let var = xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let expected = 1.0 - s.alpha_bar_at(t);
            assert!(
                (var / expected - 1.0).abs() < 0.03,
                "t={t}: {var} vs {expected}"
            );
        }
    }

    #[test]
    fn iterated_steps_match_marginal() {
        let s = DiffusionSchedule::new(50, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 10_000;
        let x0 = Tensor::<f64>::full(&[n], 1.5);
        let mut x = x0.clone();
        for t in 1..=50 {
            let eps = Tensor::from_fn(&[n], |_| StandardNormal.sample(&mut rng));
            x = s.q_step(&x, t, &eps).unwrap();
            if t % 10 == 0 {
                let ab = s.alpha_bar_at(t);
                let mean = x.mean();
                let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                assert!(
                    (mean / (1.5 * ab.sqrt()) - 1.0).abs() < 0.03,
                    "t={t}: mean {mean}"
                );
                assert!((var / (1.0 - ab) - 1.0).abs() < 0.03, "t={t}: var {var}");
            }
        }
    }
}
