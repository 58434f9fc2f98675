use super::*;
use crate::data::toy::{gen_toy_corpus, ToyCorpusSpec};
use crate::denoiser::{ArchConfig, DenoiserModel, Style};
use crate::tensor::Tensor;

fn tiny_corpus() -> crate::data::ToyCorpus {
    gen_toy_corpus(&ToyCorpusSpec {
        sequences_per_subject: 2,
        frames: 64,
        vertices: 2,
        ..ToyCorpusSpec::default()
    })
    .unwrap()
}

fn tiny_facial() -> DenoiserModel {
    let arch = ArchConfig::facial(2, vec!["s0".into(), "s1".into(), "s2".into()])
        .with_widths([16, 16, 32]);
    DenoiserModel::new(arch, 3).unwrap()
}

fn tiny_head() -> DenoiserModel {
    DenoiserModel::new(ArchConfig::head().with_widths([16, 16, 32]), 4).unwrap()
}

fn quick(window: usize) -> TrainConfig {
    TrainConfig {
        iterations: 3,
        batch_size: 4,
        window,
        steps: 50,
        ..TrainConfig::facial()
    }
}

#[test]
fn config_defaults() {
    let f = TrainConfig::facial();
    assert_eq!(f.window, 30);
    assert_eq!(f.lambda_vel, 10.0);
    assert_eq!(f.cond_dropout, 0.1);
    assert_eq!(f.lr, 1e-4);
    assert_eq!(f.batch_size, 64);
    assert_eq!(f.steps, 500);
    assert_eq!(TrainConfig::head().window, 300);
}

#[test]
fn guidance_mixing_copies_clean_frames() {
    let c = 3;
    let n = 6;
    let y_t: Vec<f32> = (0..c * n).map(|i| i as f32 + 0.5).collect();
    let y0: Vec<f32> = (0..c * n).map(|i| -(i as f32)).collect();
    let mask = [1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
    let mixed = mix_guidance(&y_t, &y0, &mask, c);
    for ch in 0..c {
        for i in 0..n {
            let v = mixed[ch * n + i];
            if mask[i] == 1.0 {
                assert_eq!(v, y0[ch * n + i]);
            } else {
                assert_eq!(v, y_t[ch * n + i]);
            }
        }
    }
    assert_eq!(&mixed[c * n..], &mask);
}

#[test]
fn batch_mixing_identity_holds() {
    let corpus = tiny_corpus();
    let clips = head_clips(&corpus);
    let sampler = GuidanceMaskSampler::new(MaskFamily::Mixed, 30.0);
    let mut tr = Trainer::new(tiny_head(), quick(40), Some(sampler)).unwrap();
    let b = tr.sample_batch(&clips).unwrap();
    let (bs, w) = (4, 40);
    let mask = b.mask.as_ref().unwrap();
    let mut flagged = 0;
    for bi in 0..bs {
        for i in 0..w {
            let flag = b.input.data()[(bi * 4 + 3) * w + i];
            assert_eq!(flag, mask.data()[(bi * 3) * w + i]);
            if flag == 1.0 {
                flagged += 1;
                for ch in 0..3 {
                    assert_eq!(
                        b.input.data()[(bi * 4 + ch) * w + i],
                        b.target.data()[(bi * 3 + ch) * w + i]
                    );
                }
            }
        }
    }
    assert!(flagged > 0);
}

#[test]
fn zero_mask_training_has_constant_flag() {
    let corpus = tiny_corpus();
    let clips = head_clips(&corpus);
    let sampler = GuidanceMaskSampler::new(MaskFamily::Zeros, 30.0);
    let mut tr = Trainer::new(tiny_head(), quick(40), Some(sampler)).unwrap();
    let b = tr.sample_batch(&clips).unwrap();
    for bi in 0..4 {
        assert!(b.input.data()[(bi * 4 + 3) * 40..(bi * 4 + 4) * 40]
            .iter()
            .all(|&v| v == 0.0));
    }
    let r = tr.step_on(&b).unwrap();
    assert_eq!(r.mask, 0.0);
}

#[test]
fn one_step_is_reproducible() {
    let clips = facial_clips(&tiny_corpus());
    let run = || {
        let mut tr = Trainer::new(tiny_facial(), quick(30), None).unwrap();
        tr.step(&clips).unwrap();
        tr.model
    };
    let a = run();
    let b = run();
    for ((_, x), (_, y)) in a.params().iter().zip(b.params().iter()) {
        assert_eq!(x.data(), y.data());
    }
    assert_ne!(a, tiny_facial());
}

#[test]
fn short_run_records_history() {
    let clips = facial_clips(&tiny_corpus());
    let out = train_facial(&clips, tiny_facial(), &quick(30)).unwrap();
    assert_eq!(out.history.records.len(), 3);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("loss.txt");
    out.history.write(&p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[1].split(' ').count(), 4);
    assert!(lines[1].starts_with("0 "));
}

#[test]
fn divergence_aborts() {
    let clips = facial_clips(&tiny_corpus());
    let cfg = TrainConfig {
        divergence_factor: 0.5,
        ..quick(30)
    };
    let mut tr = Trainer::new(tiny_facial(), cfg, None).unwrap();
    assert!(matches!(tr.step(&clips), Err(TrainError::Diverged { .. })));
}

#[test]
fn non_finite_loss_aborts() {
    let mut clips = facial_clips(&tiny_corpus());
    for c in &mut clips {
        c.motion.data_mut().fill(f32::NAN);
    }
    let mut tr = Trainer::new(tiny_facial(), quick(30), None).unwrap();
    assert!(matches!(tr.step(&clips), Err(TrainError::NonFinite { .. })));
}

#[test]
fn empty_and_short_corpora_rejected() {
    let mut tr = Trainer::new(tiny_facial(), quick(30), None).unwrap();
    assert!(matches!(tr.step(&[]), Err(TrainError::EmptyCorpus)));
    let short = Clip {
        motion: Tensor::zeros(&[10, 6]),
        audio: Tensor::zeros(&[10, 64]),
        style: Style::Mean,
    };
    assert!(matches!(
        tr.step(&[short]),
        Err(TrainError::WindowTooLong {
            window: 30,
            longest: 10
        })
    ));
}

#[test]
fn finetune_zero_iterations_is_identity() {
    let m = tiny_facial();
    let reference = vec![(Tensor::zeros(&[40, 6]), Tensor::zeros(&[40, 64]))];
    let cfg = TrainConfig {
        iterations: 0,
        ..quick(30)
    };
    let out = finetune_personalize(&m, &reference, "new", &cfg).unwrap();
    assert_eq!(out.model, m);
    assert!(finetune_personalize(&m, &[], "new", &cfg).is_err());
}

#[test]
fn finetune_adds_subject_and_updates_everything() {
    let m = tiny_facial();
    let corpus = tiny_corpus();
    let reference: Vec<_> = corpus.items[..2]
        .iter()
        .map(|it| (it.face.data().clone(), it.features.data.clone()))
        .collect();
    let out = finetune_personalize(&m, &reference, "new", &quick(30)).unwrap();
    assert_eq!(out.model.subject_index("new"), Some(3));
    for ((name, a), (_, b)) in m.params().iter().zip(out.model.params().iter()) {
        if name == "style.table" {
            assert_eq!(b.dim(1), a.dim(1) + 1);
        } else {
            assert_ne!(a, b, "{name} unchanged");
        }
    }
}
