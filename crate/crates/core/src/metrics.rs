//! Lip-sync DTW, sample-set diversity and beat alignment.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::motion::{MotionKind, MotionSequence};
use crate::tensor::Tensor;

/// Default normalization of the beat-align kernel, in seconds.
pub const DEFAULT_SIGMA: f64 = 3.0;
/// Moving-average width applied to head speed before beat detection.
pub const BEAT_SMOOTHING: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("sequence has no frames")]
    Empty,
    #[error("channel counts differ: {0} vs {1}")]
    Channels(usize, usize),
    #[error("region: {0}")]
    Region(String),
    #[error("diversity needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("samples differ in shape: {0:?} vs {1:?}")]
    SampleShape(Vec<usize>, Vec<usize>),
    #[error("beat detection needs a head sequence, got {0:?}")]
    Kind(MotionKind),
    #[error("beat detection needs at least 3 frames, got {0}")]
    TooShort(usize),
    #[error("ground-truth beat list is empty")]
    EmptyGroundTruth,
    #[error("beat times must be finite, non-negative and strictly increasing")]
    BeatOrder,
    #[error("sigma must be positive, got {0}")]
    Sigma(f64),
}

type Result<T> = std::result::Result<T, MetricsError>;

/// Per-frame L2 distance between `a[i]` and `b[j]` over `region` channels.
fn frame_distance(a: &Tensor, i: usize, b: &Tensor, j: usize, region: &[usize]) -> f64 {
    let (ca, cb) = (a.dim(1), b.dim(1));
    region
        .iter()
        .map(|&k| (a.data()[i * ca + k] as f64 - b.data()[j * cb + k] as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn check_region(c: usize, region: &[usize]) -> Result<()> {
    if region.is_empty() {
        return Err(MetricsError::Region("empty channel set".into()));
    }
    if let Some(&k) = region.iter().find(|&&k| k >= c) {
        return Err(MetricsError::Region(format!("channel {k} outside 0..{c}")));
    }
    Ok(())
}

/// Dynamic time warping over `[N, C]` tensors restricted to `region`.
///
/// Steps are match, insert and delete. The path with the smallest total
/// cost wins, ties going to the shorter path; the result is that cost over
/// the path length.
pub fn dtw_distance(a: &Tensor, b: &Tensor, region: &[usize]) -> Result<f64> {
    let (n, m) = (a.dim(0), b.dim(0));
    if n == 0 || m == 0 {
        return Err(MetricsError::Empty);
    }
    if a.dim(1) != b.dim(1) {
        return Err(MetricsError::Channels(a.dim(1), b.dim(1)));
    }
    check_region(a.dim(1), region)?;
    let mut acc = vec![(f64::INFINITY, 0usize); n * m];
    for i in 0..n {
        for j in 0..m {
            let d = frame_distance(a, i, b, j, region);
            let best = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut cands = Vec::with_capacity(3);
                if i > 0 && j > 0 {
                    cands.push(acc[(i - 1) * m + j - 1]);
                }
                if i > 0 {
                    cands.push(acc[(i - 1) * m + j]);
                }
                if j > 0 {
                    cands.push(acc[i * m + j - 1]);
                }
                cands
                    .into_iter()
                    .min_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)))
                    .unwrap()
            };
            acc[i * m + j] = (best.0 + d, best.1 + 1);
        }
    }
    let (cost, len) = acc[n * m - 1];
    Ok(cost / len as f64)
}

/// Lip-sync error between two face sequences; lower is better.
pub fn lip_sync_dtw(pred: &MotionSequence, gt: &MotionSequence, region: &[usize]) -> Result<f64> {
    dtw_distance(pred.data(), gt.data(), region)
}

/// Mean L2 distance over all unordered pairs of flattened samples.
pub fn diversity_of(samples: &[&Tensor]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(MetricsError::TooFewSamples(samples.len()));
    }
    let shape = samples[0].shape();
    if let Some(s) = samples.iter().find(|s| s.shape() != shape) {
        return Err(MetricsError::SampleShape(
            shape.to_vec(),
            s.shape().to_vec(),
        ));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let d: f64 = samples[i]
                .data()
                .iter()
                .zip(samples[j].data())
                .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                .sum();
            total += d.sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

pub fn diversity(samples: &[MotionSequence]) -> Result<f64> {
    let refs: Vec<&Tensor> = samples.iter().map(MotionSequence::data).collect();
    diversity_of(&refs)
}

/// Sorted beat timestamps in seconds.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BeatList(Vec<f64>);

impl BeatList {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        let ok = times.iter().all(|t| t.is_finite() && *t >= 0.0)
            && times.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(MetricsError::BeatOrder);
        }
        Ok(Self(times))
    }

    pub fn times(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Head speed `|y[n+1] - y[n]| * fps` for each of the `N - 1` frame pairs.
pub fn head_speed(head: &MotionSequence) -> Vec<f64> {
    let d = head.data();
    let c = d.dim(1);
    (0..head.frames().saturating_sub(1))
        .map(|n| {
            let s: f64 = (0..c)
                .map(|k| (d.data()[(n + 1) * c + k] as f64 - d.data()[n * c + k] as f64).powi(2))
                .sum();
            s.sqrt() * head.fps as f64
        })
        .collect()
}

/// Centered moving average, truncated at the ends.
pub fn moving_average(x: &[f64], width: usize) -> Vec<f64> {
    let h = width / 2;
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(h);
            let hi = (i + h + 1).min(x.len());
            x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Beats are strict local minima of the smoothed head speed. Speed sample
/// `n` sits between frames `n` and `n + 1`, at `(n + 0.5) / fps` seconds. A
/// run of equal samples below both neighbours counts once, at its midpoint.
pub fn detect_beats(head: &MotionSequence) -> Result<BeatList> {
    if head.kind != MotionKind::Head {
        return Err(MetricsError::Kind(head.kind));
    }
    if head.frames() < 3 {
        return Err(MetricsError::TooShort(head.frames()));
    }
    let s = moving_average(&head_speed(head), BEAT_SMOOTHING);
    let fps = head.fps as f64;
    let mut times = Vec::new();
    let mut i = 1;
    while i + 1 < s.len() {
        let mut j = i;
        while j + 1 < s.len() && s[j + 1] == s[i] {
            j += 1;
        }
        if s[i] < s[i - 1] && j + 1 < s.len() && s[j] < s[j + 1] {
            times.push(((i + j) as f64 / 2.0 + 0.5) / fps);
        }
        i = j + 1;
    }
    BeatList::new(times)
}

/// `mean over g of exp(-min_p |p - g|^2 / (2 sigma^2))`. An empty prediction
/// scores 0.
pub fn beat_align(pred: &BeatList, gt: &BeatList, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(MetricsError::Sigma(sigma));
    }
    if gt.is_empty() {
        return Err(MetricsError::EmptyGroundTruth);
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = gt
        .times()
        .iter()
        .map(|g| {
            let d2 = pred
                .times()
                .iter()
                .map(|p| (p - g).powi(2))
                .fold(f64::INFINITY, f64::min);
            (-d2 / (2.0 * sigma * sigma)).exp()
        })
        .sum();
    Ok(total / gt.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub sigma: f64,
    pub region: Vec<usize>,
    pub samples: usize,
    pub frames: usize,
}

/// Evaluation summary. Absent metrics are left as `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub lip_sync: Option<f64>,
    pub div: Option<f64>,
    pub beat_align: Option<f64>,
    pub metadata: ReportMeta,
}

impl MetricReport {
    /// `key value` lines; missing metrics print `-`.
    pub fn to_text(&self) -> String {
        let v = |x: Option<f64>| x.map_or("-".to_string(), |x| format!("{x:.6}"));
        let region: Vec<String> = self.metadata.region.iter().map(usize::to_string).collect();
        format!(
            "lip_sync {}\ndiv {}\nbeat_align {}\nsigma {}\nregion {}\nsamples {}\nframes {}\n",
            v(self.lip_sync),
            v(self.div),
            v(self.beat_align),
            self.metadata.sigma,
            region.join(","),
            self.metadata.samples,
            self.metadata.frames,
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::motion::MotionKind;

    fn seq(n: usize, c: usize, f: impl Fn(usize, usize) -> f32) -> Tensor {
        Tensor::from_fn(&[n, c], |i| f(i / c, i % c))
    }

    /// Every monotone path from (0,0) to (n-1,m-1), scored by total cost then
    /// by length.
    fn brute_dtw(a: &Tensor, b: &Tensor, region: &[usize]) -> f64 {
        fn walk(
            i: usize,
            j: usize,
            cost: f64,
            len: usize,
            a: &Tensor,
            b: &Tensor,
            r: &[usize],
            best: &mut (f64, usize),
        ) {
            let cost = cost + frame_distance(a, i, b, j, r);
            let len = len + 1;
            let (n, m) = (a.dim(0), b.dim(0));
            if i == n - 1 && j == m - 1 {
                if cost < best.0 || (cost == best.0 && len < best.1) {
                    *best = (cost, len);
                }
                return;
            }
            if i + 1 < n && j + 1 < m {
                walk(i + 1, j + 1, cost, len, a, b, r, best);
            }
            if i + 1 < n {
                walk(i + 1, j, cost, len, a, b, r, best);
            }
            if j + 1 < m {
                walk(i, j + 1, cost, len, a, b, r, best);
            }
        }
        let mut best = (f64::INFINITY, 0);
        walk(0, 0, 0.0, 0, a, b, region, &mut best);
        best.0 / best.1 as f64
    }

    #[test]
    fn dtw_matches_path_enumeration() {
        let mut state = 17u64;
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 33) as f32 / (1u64 << 31) as f32) * 2.0 - 1.0
        };
        for n in 1..=6 {
            for m in 1..=6 {
                let a = Tensor::from_fn(&[n, 3], |_| next());
                let b = Tensor::from_fn(&[m, 3], |_| next());
                let region = [0, 2];
                let fast = dtw_distance(&a, &b, &region).unwrap();
                assert_eq!(fast, brute_dtw(&a, &b, &region), "n={n} m={m}");
                assert_eq!(fast, dtw_distance(&b, &a, &region).unwrap());
            }
        }
    }

    #[test]
    fn dtw_examples() {
        let a = seq(20, 3, |n, c| ((n as f32) * 0.4 + c as f32).sin());
        assert_eq!(dtw_distance(&a, &a, &[0, 1, 2]).unwrap(), 0.0);
        // Delay by 2 frames, holding the first frame.
        let k = 2;
        let b = seq(20, 3, |n, c| {
            (((n.saturating_sub(k)) as f32) * 0.4 + c as f32).sin()
        });
        let region = [0, 1, 2];
        let framewise: f64 = (0..20)
            .map(|i| frame_distance(&a, i, &b, i, &region))
            .sum::<f64>()
            / 20.0;
        assert!(dtw_distance(&b, &a, &region).unwrap() < framewise);
        assert!(dtw_distance(&a, &b, &[]).is_err());
        assert!(dtw_distance(&a, &b, &[3]).is_err());
    }

    fn brute_div(s: &[Tensor]) -> f64 {
        let mut d = Vec::new();
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i < j {
                    let sq: f64 = s[i]
                        .data()
                        .iter()
                        .zip(s[j].data())
                        .map(|(x, y)| ((x - y) as f64).powi(2))
                        .sum();
                    d.push(sq.sqrt());
                }
            }
        }
        d.iter().sum::<f64>() / d.len() as f64
    }

    #[test]
    fn diversity_examples() {
        let one = |v: f32| Tensor::new(vec![1, 1], vec![v]).unwrap();
        let set = [one(0.0), one(3.0), one(4.0)];
        let refs: Vec<&Tensor> = set.iter().collect();
        assert!((diversity_of(&refs).unwrap() - 8.0 / 3.0).abs() < 1e-12);
        let same = [one(1.0), one(1.0)];
        assert_eq!(diversity_of(&same.iter().collect::<Vec<_>>()).unwrap(), 0.0);
        assert!(matches!(
            diversity_of(&refs[..1]),
            Err(MetricsError::TooFewSamples(1))
        ));

        for size in 2..=4 {
            let s: Vec<Tensor> = (0..size)
                .map(|k| seq(4, 3, |n, c| ((n * 3 + c + 7 * k) as f32 * 0.9).cos()))
                .collect();
            let r: Vec<&Tensor> = s.iter().collect();
            let v = diversity_of(&r).unwrap();
            assert!((v - brute_div(&s)).abs() < 1e-12);
            let rev: Vec<&Tensor> = s.iter().rev().collect();
            assert!((diversity_of(&rev).unwrap() - v).abs() < 1e-12);
            let doubled: Vec<Tensor> = s.iter().chain(&s).cloned().collect();
            let d: Vec<&Tensor> = doubled.iter().collect();
            assert!((diversity_of(&d).unwrap() - brute_div(&doubled)).abs() < 1e-12);
        }
    }

    fn head_seq(n: usize, fps: f32, f: impl Fn(f64) -> f64) -> MotionSequence {
        let data = Tensor::from_fn(&[n, 3], |i| {
            if i % 3 == 0 {
                f((i / 3) as f64 / fps as f64) as f32
            } else {
                0.0
            }
        });
        MotionSequence::new(MotionKind::Head, fps, "t", data).unwrap()
    }

    #[test]
    fn flat_minimum_counts_once() {
        // Fast, slow for ten seconds, fast again.
        let h = head_seq(40, 1.0, |t| {
            if t < 10.0 {
                3.0 * t
            } else if t < 20.0 {
                30.0 + (t - 10.0)
            } else {
                40.0 + 3.0 * (t - 20.0)
            }
        });
        let b = detect_beats(&h).unwrap();
        assert_eq!(b.len(), 1);
        assert!((b.times()[0] - 15.0).abs() < 1.0, "{:?}", b.times());
    }

    #[test]
    fn beats_of_constant_rotation_are_empty() {
        let h = head_seq(90, 30.0, |_| 0.7);
        assert!(detect_beats(&h).unwrap().is_empty());
    }

    #[test]
    fn beats_of_a_one_hertz_bounce_are_a_second_apart() {
        // Speed |pi cos(pi t)| vanishes once per second at t = k + 0.5.
        let h = head_seq(300, 30.0, |t| (std::f64::consts::PI * t).sin().abs());
        let b = detect_beats(&h).unwrap();
        assert_eq!(b.len(), 10);
        for (k, t) in b.times().iter().enumerate() {
            assert!((t - (k as f64 + 0.5)).abs() <= 1.0 / 30.0 + 1e-9, "{t}");
        }
        for w in b.times().windows(2) {
            assert!((w[1] - w[0] - 1.0).abs() <= 1.0 / 30.0 + 1e-9);
        }
    }

    #[test]
    fn beats_of_a_one_hertz_sinusoid_come_at_each_turning_point() {
        // A sinusoid stops twice per period.
        let h = head_seq(300, 30.0, |t| (2.0 * std::f64::consts::PI * t).sin());
        let b = detect_beats(&h).unwrap();
        for w in b.times().windows(2) {
            assert!((w[1] - w[0] - 0.5).abs() <= 1.0 / 30.0 + 1e-9);
        }
        assert!((b.times()[0] - 0.25).abs() <= 1.0 / 30.0 + 1e-9);
    }

    #[test]
    fn time_reversal_mirrors_beats() {
        let n = 200;
        let f = |t: f64| (3.1 * t).sin() + 0.4 * (7.3 * t).cos();
        let h = head_seq(n, 30.0, f);
        let r = head_seq(n, 30.0, |t| f((n - 1) as f64 / 30.0 - t));
        let fwd = detect_beats(&h).unwrap();
        let back = detect_beats(&r).unwrap();
        assert_eq!(fwd.len(), back.len());
        let span = (n - 1) as f64 / 30.0;
        for (a, b) in fwd.times().iter().zip(back.times().iter().rev()) {
            assert!((a - (span - b)).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn beat_detection_rejects_face_and_short() {
        let face =
            MotionSequence::new(MotionKind::Face, 30.0, "f", Tensor::zeros(&[10, 3])).unwrap();
        assert!(matches!(detect_beats(&face), Err(MetricsError::Kind(_))));
        assert!(matches!(
            detect_beats(&head_seq(2, 30.0, |t| t)),
            Err(MetricsError::TooShort(2))
        ));
    }

    #[test]
    fn beat_align_examples() {
        let b = |v: &[f64]| BeatList::new(v.to_vec()).unwrap();
        let gt = b(&[0.5, 1.7, 3.0]);
        assert_eq!(beat_align(&gt, &gt, 3.0).unwrap(), 1.0);
        assert_eq!(
            beat_align(&b(&[3.0]), &b(&[0.0]), 3.0).unwrap(),
            (-0.5f64).exp()
        );
        assert_eq!(beat_align(&b(&[]), &gt, 3.0).unwrap(), 0.0);
        assert!(beat_align(&gt, &b(&[]), 3.0).is_err());
        let direct = |p: &[f64], g: &[f64], s: f64| {
            g.iter()
                .map(|g| {
                    let d = p
                        .iter()
                        .map(|p| (p - g).abs())
                        .fold(f64::INFINITY, f64::min);
                    (-(d * d) / (2.0 * s * s)).exp()
                })
                .sum::<f64>()
                / g.len() as f64
        };
        let p = [0.1, 2.2, 2.9, 5.0];
        assert!(
            (beat_align(&b(&p), &gt, 3.0).unwrap() - direct(&p, gt.times(), 3.0)).abs() < 1e-12
        );
        let mut last = 1.0;
        for shift in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let moved: Vec<f64> = gt.times().iter().map(|t| t + shift).collect();
            let v = beat_align(&b(&moved), &gt, 3.0).unwrap();
            assert!(v <= last && v > 0.0);
            last = v;
        }
        assert!(BeatList::new(vec![1.0, 1.0]).is_err());
        assert!(BeatList::new(vec![-1.0]).is_err());
    }

    #[test]
    fn report_formats() {
        let r = MetricReport {
            lip_sync: Some(0.25),
            div: None,
            beat_align: Some(1.0),
            metadata: ReportMeta {
                sigma: 3.0,
                region: vec![0, 1],
                samples: 1,
                frames: 30,
            },
        };
        let text = r.to_text();
        assert!(text.contains("lip_sync 0.250000\n"));
        assert!(text.contains("div -\n"));
        assert!(text.contains("region 0,1\n"));
        let back: MetricReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
