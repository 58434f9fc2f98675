use motiondiff::data::toy::{gen_toy_corpus, SubjectStyle, ToyCorpusSpec, FEATURE_DIM};

fn moving_average(x: &[f32], n: usize, c: usize, w: usize) -> Vec<f64> {
    let half = w / 2;
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + w - half).min(n);
        for ch in 0..c {
            let s: f64 = (lo..hi).map(|j| x[j * c + ch] as f64).sum();
            out[i * c + ch] = s / (hi - lo) as f64;
        }
    }
    out
}

/// Solves `a x = b` for symmetric positive definite `a` by Cholesky.
fn cholesky_solve(a: &[f64], b: &[f64], d: usize, k: usize) -> Vec<f64> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|p| l[i * d + p] * l[j * d + p]).sum();
            if i == j {
                l[i * d + i] = (a[i * d + i] - s).sqrt();
            } else {
                l[i * d + j] = (a[i * d + j] - s) / l[j * d + j];
            }
        }
    }
    let mut x = b.to_vec();
    for col in 0..k {
        for i in 0..d {
            let s: f64 = (0..i).map(|p| l[i * d + p] * x[p * k + col]).sum();
            x[i * k + col] = (x[i * k + col] - s) / l[i * d + i];
        }
        for i in (0..d).rev() {
            let s: f64 = (i + 1..d).map(|p| l[p * d + i] * x[p * k + col]).sum();
            x[i * k + col] = (x[i * k + col] - s) / l[i * d + i];
        }
    }
    x
}

#[test]
fn ridge_readout_explains_held_out_motion() {
    let spec = ToyCorpusSpec::default();
    let corpus = gen_toy_corpus(&spec).unwrap();
    let c = spec.vertices * 3;
    let d = FEATURE_DIM + 1;
    for (si, style) in spec.subjects.iter().enumerate() {
        let items: Vec<_> = corpus.items.iter().filter(|it| it.subject == si).collect();
        let (train, test) = items.split_at(items.len() * 3 / 4);
        let rows = |set: &[&motiondiff::data::toy::CorpusItem]| {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for it in set {
                let n = it.face.frames();
                let f = moving_average(it.features.data.data(), n, FEATURE_DIM, style.smoothing);
                for i in 0..n {
                    xs.extend_from_slice(&f[i * FEATURE_DIM..(i + 1) * FEATURE_DIM]);
                    xs.push(1.0);
                    ys.extend(it.face.frame(i).iter().map(|&v| v as f64));
                }
            }
            (xs, ys)
        };
        let (xs, ys) = rows(train);
        let m = ys.len() / c;
        let mut xtx = vec![0.0; d * d];
        let mut xty = vec![0.0; d * c];
        for r in 0..m {
            let x = &xs[r * d..(r + 1) * d];
            let y = &ys[r * c..(r + 1) * c];
            for i in 0..d {
                for j in 0..d {
                    xtx[i * d + j] += x[i] * x[j];
                }
                for k in 0..c {
                    xty[i * c + k] += x[i] * y[k];
                }
            }
        }
        for i in 0..d {
            xtx[i * d + i] += 1e-3;
        }
        let w = cholesky_solve(&xtx, &xty, d, c);
        let (xs, ys) = rows(test);
        let m = ys.len() / c;
        let mut mean = vec![0.0; c];
        for r in 0..m {
            for k in 0..c {
                mean[k] += ys[r * c + k] / m as f64;
            }
        }
        let (mut ss_res, mut ss_tot) = (0.0, 0.0);
        for r in 0..m {
            for k in 0..c {
                let pred: f64 = (0..d).map(|i| xs[r * d + i] * w[i * c + k]).sum();
                let y = ys[r * c + k];
                ss_res += (y - pred).powi(2);
                ss_tot += (y - mean[k]).powi(2);
            }
        }
        let r2 = 1.0 - ss_res / ss_tot;
        assert!(r2 >= 0.5, "subject {}: held-out R² {r2}", style.name);
    }
}

#[test]
fn amplitude_ratio_scales_channel_spread() {
    let spec = ToyCorpusSpec {
        sequences_per_subject: 24,
        subjects: vec![
            SubjectStyle::new("a", 1.0, 5, 0.0),
            SubjectStyle::new("b", 2.0, 5, 0.0),
        ],
        ..ToyCorpusSpec::default()
    };
    let corpus = gen_toy_corpus(&spec).unwrap();
    let c = spec.vertices * 3;
    let std_of = |si: usize| -> Vec<f64> {
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut n = 0.0;
        for it in corpus.items.iter().filter(|it| it.subject == si) {
            for i in 0..it.face.frames() {
                for (k, &v) in it.face.frame(i).iter().enumerate() {
                    sum[k] += v as f64;
                    sq[k] += (v as f64).powi(2);
                }
                n += 1.0;
            }
        }
        (0..c)
            .map(|k| (sq[k] / n - (sum[k] / n).powi(2)).sqrt())
            .collect()
    };
    let (a, b) = (std_of(0), std_of(1));
    let ratio = (0..c).map(|k| b[k] / a[k]).sum::<f64>() / c as f64;
    assert!((ratio - 2.0).abs() <= 0.2, "std ratio {ratio}");
}
