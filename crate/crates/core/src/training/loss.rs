//! Reconstruction, velocity and guidance-mask losses.
//!
//! Every term is a mean over all of its elements. Tensor-level functions are
//! the reference; the graph builders record the same reductions for
//! training.

use thiserror::Error;

use crate::autograd::{AutogradError, Graph, Var};
use crate::tensor::{Real, ShapeError, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("velocity loss needs at least 2 frames, got {0}")]
    TooShort(usize),
    #[error("mask weights must be 0 or 1, found {0}")]
    Weight(f64),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

/// Mean squared error over every entry.
pub fn loss_simple<T: Real>(x0: &Tensor<T>, x_hat: &Tensor<T>) -> Result<f64, LossError> {
    x0.expect_same_shape(x_hat)?;
    let s: f64 = x0
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(s / x0.len() as f64)
}

/// Mean squared mismatch of frame-to-frame deltas for `[N, C]` sequences.
pub fn loss_velocity<T: Real>(x0: &Tensor<T>, x_hat: &Tensor<T>) -> Result<f64, LossError> {
    x0.expect_same_shape(x_hat)?;
    let [n, c] = x0.shape()[..] else {
        return Err(ShapeError::Mismatch(format!("expected [N, C], got {:?}", x0.shape())).into());
    };
    if n < 2 {
        return Err(LossError::TooShort(n));
    }
    let (a, b) = (x0.data(), x_hat.data());
    let mut s = 0.0;
    for i in 1..n {
        for k in 0..c {
            let da = a[i * c + k].as_f64() - a[(i - 1) * c + k].as_f64();
            let db = b[i * c + k].as_f64() - b[(i - 1) * c + k].as_f64();
            s += (db - da).powi(2);
        }
    }
    Ok(s / ((n - 1) * c) as f64)
}

/// Squared error at frames with `w = 1`, averaged over all `N * C` entries.
pub fn loss_mask<T: Real>(y0: &Tensor<T>, y_hat: &Tensor<T>, w: &[f32]) -> Result<f64, LossError> {
    y0.expect_same_shape(y_hat)?;
    let [n, c] = y0.shape()[..] else {
        return Err(ShapeError::Mismatch(format!("expected [N, C], got {:?}", y0.shape())).into());
    };
    if w.len() != n {
        return Err(ShapeError::Mismatch(format!("{} weights for {n} frames", w.len())).into());
    }
    if let Some(&bad) = w.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(LossError::Weight(bad as f64));
    }
    let (a, b) = (y0.data(), y_hat.data());
    let mut s = 0.0;
    for i in 0..n {
        if w[i] == 1.0 {
            for k in 0..c {
                s += (a[i * c + k].as_f64() - b[i * c + k].as_f64()).powi(2);
            }
        }
    }
    Ok(s / (n * c) as f64)
}

/// Loss nodes recorded on a training graph.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: Var,
    pub simple: Var,
    pub velocity: Var,
    pub mask: Option<Var>,
}

/// Records `L_simple + lambda_vel * L_vel (+ lambda_mask * L_mask)` for
/// channels-first `[B, C, N]` predictions. `mask` is a `[B, C, N]` 0/1
/// weighting broadcast from the per-frame mask.
pub fn record_losses<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    lambda_vel: f64,
    mask: Option<(Var, f64)>,
) -> Result<LossNodes, LossError> {
    let r = g.sub(pred, target)?;
    let sq = g.square(r);
    let simple = g.mean(sq);
    let dr = g.frame_diff(r)?;
    let dsq = g.square(dr);
    let velocity = g.mean(dsq);
    let wv = g.scale(velocity, T::from_f64(lambda_vel));
    let mut total = g.add(simple, wv)?;
    let mut mask_node = None;
    if let Some((m, lambda_mask)) = mask {
        let masked = g.mul(sq, m)?;
        let lm = g.mean(masked);
        let wm = g.scale(lm, T::from_f64(lambda_mask));
        total = g.add(total, wm)?;
        mask_node = Some(lm);
    }
    Ok(LossNodes {
        total,
        simple,
        velocity,
        mask: mask_node,
    })
}
