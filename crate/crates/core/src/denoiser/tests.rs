use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arch::{ArchConfig, Variant};
use super::model::*;
use crate::autograd::Graph;
use crate::tensor::Tensor;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn facial_small() -> DenoiserModel {
    let arch = ArchConfig::facial(4, vec!["a".into(), "b".into()]).with_widths([16, 16, 32]);
    DenoiserModel::new(arch, 11).unwrap()
}

fn head_small() -> DenoiserModel {
    DenoiserModel::new(ArchConfig::head().with_widths([16, 16, 32]), 12).unwrap()
}

fn head_input(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut x = rand_tensor(&[n, 4], rng);
    for i in 0..n {
        x.data_mut()[i * 4 + 3] = if i % 5 == 0 { 1.0 } else { 0.0 };
    }
    x
}

#[test]
fn facial_output_shape_any_length() {
    let m = DenoiserModel::new(ArchConfig::default(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [30, 90, 600] {
        let x = rand_tensor(&[n, 48], &mut rng);
        let cond = ConditionSet::new(rand_tensor(&[n, 64], &mut rng), Style::Subject(1));
        let y = m.predict(&x, 250, &cond).unwrap();
        assert_eq!(y.shape(), &[n, 48]);
        assert!(y.all_finite());
    }
}

#[test]
fn head_output_shape() {
    let m = DenoiserModel::new(ArchConfig::head(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in [300, 450] {
        let x = head_input(n, &mut rng);
        let cond = ConditionSet::new(rand_tensor(&[n, 64], &mut rng), Style::Mean);
        let y = m.predict(&x, 10, &cond).unwrap();
        assert_eq!(y.shape(), &[n, 3]);
        assert!(y.all_finite());
    }
}

#[test]
fn all_zero_flags_are_valid() {
    let m = head_small();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut x = rand_tensor(&[40, 4], &mut rng);
    for i in 0..40 {
        x.data_mut()[i * 4 + 3] = 0.0;
    }
    let cond = ConditionSet::new(Tensor::zeros(&[40, 64]), Style::Mean);
    assert_eq!(m.predict(&x, 1, &cond).unwrap().shape(), &[40, 3]);
}

#[test]
fn rejects_bad_flag() {
    let m = head_small();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut x = head_input(20, &mut rng);
    x.data_mut()[7 * 4 + 3] = 0.5;
    let cond = ConditionSet::new(Tensor::zeros(&[20, 64]), Style::Mean);
    assert!(matches!(
        m.predict(&x, 1, &cond),
        Err(DenoiserError::Flag { frame: 7, .. })
    ));
}

#[test]
fn rejects_channel_mismatch() {
    let m = facial_small();
    let cond = ConditionSet::new(Tensor::zeros(&[20, 64]), Style::Mean);
    assert!(matches!(
        m.predict(&Tensor::zeros(&[20, 9]), 1, &cond),
        Err(DenoiserError::Channels {
            expected: 12,
            got: 9
        })
    ));
}

#[test]
fn null_condition_and_determinism() {
    let m = facial_small();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&[30, 12], &mut rng);
    let cond = ConditionSet::new(rand_tensor(&[30, 64], &mut rng), Style::Subject(0));
    let a = m.predict(&x, 100, &cond.null()).unwrap();
    assert!(a.all_finite());
    let b = m.predict(&x, 100, &cond.null()).unwrap();
    assert_eq!(a, b);
    let c = m.predict(&x, 100, &cond).unwrap();
    assert_ne!(a, c);
}

#[test]
fn short_inputs_are_padded() {
    let m = facial_small();
    let x = Tensor::full(&[5, 12], 0.3);
    let cond = ConditionSet::new(Tensor::zeros(&[5, 64]), Style::Mean);
    let y = m.predict(&x, 3, &cond).unwrap();
    assert_eq!(y.shape(), &[5, 12]);
}

#[test]
fn receptive_field_matches_descriptor() {
    let m = facial_small();
    let half = m.arch().receptive_half_width();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 64;
    let x = rand_tensor(&[n, 12], &mut rng);
    let cond = ConditionSet::new(rand_tensor(&[n, 64], &mut rng), Style::Subject(1));
    let base = m.predict(&x, 7, &cond).unwrap();
    let mut reach = 0;
    for j in [31usize, 32, 33, 34] {
        let mut bumped = x.clone();
        for c in 0..12 {
            bumped.data_mut()[j * 12 + c] += 1.0;
        }
        let y = m.predict(&bumped, 7, &cond).unwrap();
        for i in 0..n {
            let changed = (0..12).any(|c| y.data()[i * 12 + c] != base.data()[i * 12 + c]);
            if changed {
                reach = reach.max(i.abs_diff(j));
            }
        }
    }
    assert_eq!(reach, half);
    assert!(2 * half + 1 <= 30);
}

#[test]
fn interior_shift_equivariance() {
    let m = facial_small();
    let half = m.arch().receptive_half_width();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 80;
    let k = 8;
    let x = rand_tensor(&[n + k, 12], &mut rng);
    let a = rand_tensor(&[n + k, 64], &mut rng);
    let window = |t: &Tensor, start: usize, c: usize| {
        Tensor::new(vec![n, c], t.data()[start * c..(start + n) * c].to_vec()).unwrap()
    };
    let y0 = m
        .predict(
            &window(&x, 0, 12),
            50,
            &ConditionSet::new(window(&a, 0, 64), Style::Subject(0)),
        )
        .unwrap();
    let y1 = m
        .predict(
            &window(&x, k, 12),
            50,
            &ConditionSet::new(window(&a, k, 64), Style::Subject(0)),
        )
        .unwrap();
    // Output frame i of the shifted run corresponds to frame i + k of the first.
    for i in half..n - k - half {
        assert_eq!(
            y1.data()[i * 12..(i + 1) * 12],
            y0.data()[(i + k) * 12..(i + k + 1) * 12]
        );
    }
}

#[test]
fn every_parameter_receives_gradient() {
    for m in [facial_small(), head_small()] {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (b, n) = (2, 24);
        let c = m.arch().input_channels();
        let mut x = rand_tensor(&[b, c, n], &mut rng);
        if m.variant() == Variant::Head {
            for bi in 0..b {
                for i in 0..n {
                    x.data_mut()[(bi * c + 3) * n + i] = (i % 3 == 0) as u8 as f32;
                }
            }
        }
        let audio = rand_tensor(&[b, 64, n], &mut rng);
        let target = rand_tensor(&[b, m.arch().motion_channels, n], &mut rng);
        let mut g = Graph::<f32>::new();
        let p = m.params().bind(&mut g);
        let xv = g.constant(x);
        let av = g.constant(audio);
        let sv = (m.variant() == Variant::Facial)
            .then(|| g.constant(m.style_weights(&[Style::Subject(0), Style::Mean]).unwrap()));
        let out = m.build(&mut g, &p, xv, &[3, 400], av, sv).unwrap();
        let tv = g.constant(target);
        let r = g.sub(out, tv).unwrap();
        let sq = g.square(r);
        let loss = g.mean(sq);
        let grads = g.backward(loss).unwrap().params(m.params().len());
        for (slot, gr) in grads.iter().enumerate() {
            let gr = gr.as_ref().expect("gradient present");
            assert!(
                gr.data().iter().any(|&v| v != 0.0),
                "{} has zero gradient",
                m.params().entry(slot).0
            );
        }
    }
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    let mut arch = ArchConfig::facial(2, vec!["a".into(), "b".into()]).with_widths([4, 4, 8]);
    arch.groups = 2;
    let model = DenoiserModel::new(arch, 21).unwrap();
    let params = model.params().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (b, n) = (2, 9);
    let x = rand_tensor(&[b, 6, n], &mut rng).cast::<f64>();
    let audio = rand_tensor(&[b, 64, n], &mut rng).cast::<f64>();
    let target = rand_tensor(&[b, 6, n], &mut rng).cast::<f64>();
    let style = model
        .style_weights(&[Style::Subject(1), Style::Mean])
        .unwrap()
        .cast::<f64>();
    let steps = [5, 321];

    let loss_of = |ps: &crate::params::ParamStore<f64>, track: bool| {
        let mut g = Graph::<f64>::new();
        let p = if track {
            ps.bind(&mut g)
        } else {
            ps.bind_frozen(&mut g)
        };
        let xv = g.constant(x.clone());
        let av = g.constant(audio.clone());
        let sv = g.constant(style.clone());
        let out = model.build(&mut g, &p, xv, &steps, av, Some(sv)).unwrap();
        let tv = g.constant(target.clone());
        let r = g.sub(out, tv).unwrap();
        let dv = g.frame_diff(r).unwrap();
        let sq = g.square(r);
        let l1 = g.mean(sq);
        let sqd = g.square(dv);
        let l2 = g.mean(sqd);
        let l2 = g.scale(l2, 10.0);
        let loss = g.add(l1, l2).unwrap();
        (g, loss)
    };

    let (g, loss) = loss_of(&params, true);
    let grads = g.backward(loss).unwrap().params(params.len());
    let h = 1e-5;
    let mut pick = ChaCha8Rng::seed_from_u64(10);
    let (mut diff2, mut an2, mut num2) = (0.0f64, 0.0f64, 0.0f64);
    for slot in 0..params.len() {
        let len = params.get(slot).len();
        let analytic = grads[slot].as_ref().unwrap();
        let probes: Vec<usize> = if len <= 12 {
            (0..len).collect()
        } else {
            (0..12).map(|_| pick.random_range(0..len)).collect()
        };
        for j in probes {
            let mut plus = params.clone();
            plus.get_mut(slot).data_mut()[j] += h;
            let mut minus = params.clone();
            minus.get_mut(slot).data_mut()[j] -= h;
            let (gp, lp) = loss_of(&plus, false);
            let (gm, lm) = loss_of(&minus, false);
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * h);
            let a = analytic.data()[j];
            diff2 += (a - numeric).powi(2);
            an2 += a * a;
            num2 += numeric * numeric;
        }
    }
    let rel = diff2.sqrt() / an2.sqrt().max(num2.sqrt());
    assert!(rel < 1e-6, "relative error {rel}");
}

#[test]
fn param_count_independent_of_length() {
    let m = facial_small();
    let count = m.param_count();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for n in [10, 50] {
        let x = rand_tensor(&[n, 12], &mut rng);
        let cond = ConditionSet::new(Tensor::zeros(&[n, 64]), Style::Mean);
        m.predict(&x, 1, &cond).unwrap();
        assert_eq!(m.param_count(), count);
    }
}

#[test]
fn add_subject_starts_at_mean_style() {
    let mut m = facial_small();
    let idx = m.add_subject("new").unwrap();
    assert_eq!(idx, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_tensor(&[16, 12], &mut rng);
    let audio = rand_tensor(&[16, 64], &mut rng);
    let fresh = m
        .predict(&x, 9, &ConditionSet::new(audio.clone(), Style::Subject(2)))
        .unwrap();
    let mut before = facial_small();
    let mean = before
        .predict(&x, 9, &ConditionSet::new(audio, Style::Mean))
        .unwrap();
    for (a, b) in fresh.data().iter().zip(mean.data()) {
        assert!((a - b).abs() < 1e-5);
    }
    before.add_subject("x").unwrap();
    assert!(head_small().add_subject("x").is_err());
}

#[test]
fn arch_rejects_degenerate_groups() {
    let arch = ArchConfig::head().with_widths([8, 8, 16]);
    assert!(arch.validate().is_err());
    assert!(DenoiserModel::new(arch, 0).is_err());
    let mut arch = ArchConfig::head();
    arch.skip_connections = false;
    assert!(arch.validate().is_err());
    assert!(ArchConfig::default().validate().is_ok());
}

#[test]
fn flagged_signal_keeps_known_frames_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (b, c, n) = (2, 3, 7);
    let mut x = rand_tensor(&[b, c + 1, n], &mut rng);
    for bi in 0..b {
        for i in 0..n {
            x.data_mut()[(bi * (c + 1) + c) * n + i] = ((i + bi) % 3 == 0) as u8 as f32;
        }
    }
    let k = flagged_signal(&x, c);
    assert_eq!(k.shape(), &[b, c, n]);
    for bi in 0..b {
        for ch in 0..c {
            for i in 0..n {
                let want = if (i + bi) % 3 == 0 {
                    x.data()[(bi * (c + 1) + ch) * n + i]
                } else {
                    0.0
                };
                assert_eq!(k.data()[(bi * c + ch) * n + i], want);
            }
        }
    }
}
