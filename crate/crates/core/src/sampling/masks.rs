//! Imputation masks for inbetweening and keyframing.

use rand::seq::index;

use super::SamplingError;
use crate::data::toy::stream_rng;

/// Guards products like `0.2 * 10` against landing just above an integer.
const ROUNDING_SLACK: f64 = 1e-9;

/// Ones on the first `ceil(head_frac * n)` and last `ceil(tail_frac * n)`
/// frames.
pub fn make_inbetween_mask(
    n: usize,
    head_frac: f64,
    tail_frac: f64,
) -> Result<Vec<f32>, SamplingError> {
    let ok = |f: f64| (0.0..1.0).contains(&f);
    if !ok(head_frac) || !ok(tail_frac) || head_frac + tail_frac >= 1.0 {
        return Err(SamplingError::Mask(format!(
            "inbetween fractions {head_frac} + {tail_frac} must be non-negative and sum below 1"
        )));
    }
    let count = |f: f64| ((f * n as f64 - ROUNDING_SLACK).ceil().max(0.0) as usize).min(n);
    let mut m = vec![0.0; n];
    m[..count(head_frac)].fill(1.0);
    m[n - count(tail_frac)..].fill(1.0);
    Ok(m)
}

/// `floor(rate * n / fps)` distinct keyframes drawn uniformly without
/// replacement.
pub fn make_keyframe_mask(
    n: usize,
    fps: f32,
    rate_per_sec: f64,
    seed: u64,
) -> Result<Vec<f32>, SamplingError> {
    if !(rate_per_sec >= 0.0) || !(fps > 0.0) {
        return Err(SamplingError::Mask(format!(
            "keyframe rate {rate_per_sec} at {fps} fps"
        )));
    }
    let k = (rate_per_sec * n as f64 / fps as f64 + ROUNDING_SLACK).floor() as usize;
    if k > n {
        return Err(SamplingError::Mask(format!(
            "{k} keyframes requested for {n} frames"
        )));
    }
    let mut rng = stream_rng(seed, 0x6b66);
    let mut m = vec![0.0; n];
    for i in index::sample(&mut rng, n, k) {
        m[i] = 1.0;
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inbetween_examples() {
        let m = make_inbetween_mask(10, 0.2, 0.2).unwrap();
        assert_eq!(m, [1., 1., 0., 0., 0., 0., 0., 0., 1., 1.]);
        assert!(make_inbetween_mask(10, 0.0, 0.0)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        assert_eq!(
            make_inbetween_mask(7, 0.05, 0.05).unwrap(),
            [1., 0., 0., 0., 0., 0., 1.]
        );
        assert!(make_inbetween_mask(10, 0.5, 0.5).is_err());
        assert!(make_inbetween_mask(10, -0.1, 0.2).is_err());
    }

    #[test]
    fn inbetween_counts_use_ceiling() {
        for n in [30, 90, 300, 301] {
            for p in [0.05, 0.1, 0.2, 0.45] {
                let m = make_inbetween_mask(n, p, p).unwrap();
                let expect = (p * n as f64 - 1e-9).ceil() as usize;
                assert_eq!(
                    m.iter().filter(|&&v| v == 1.0).count(),
                    2 * expect,
                    "n={n} p={p}"
                );
            }
        }
    }

    #[test]
    fn keyframe_examples() {
        assert!(make_keyframe_mask(90, 30.0, 0.0, 1)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        let m = make_keyframe_mask(90, 30.0, 2.0, 1).unwrap();
        assert_eq!(m.iter().filter(|&&v| v == 1.0).count(), 6);
        assert_eq!(m, make_keyframe_mask(90, 30.0, 2.0, 1).unwrap());
        assert_ne!(m, make_keyframe_mask(90, 30.0, 2.0, 2).unwrap());
        assert!(make_keyframe_mask(10, 30.0, 40.0, 0).is_err());
        assert!(make_keyframe_mask(10, 30.0, 30.0, 0)
            .unwrap()
            .iter()
            .all(|&v| v == 1.0));
        assert!(make_keyframe_mask(10, 30.0, -1.0, 0).is_err());
    }
}
