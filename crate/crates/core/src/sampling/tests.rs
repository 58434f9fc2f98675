use super::*;
use crate::denoiser::ArchConfig;
use crate::diffusion::ScheduleKind;

fn facial() -> DenoiserModel {
    let arch = ArchConfig::facial(2, vec!["a".into(), "b".into()]).with_widths([16, 16, 32]);
    DenoiserModel::new(arch, 5).unwrap()
}

fn head() -> DenoiserModel {
    DenoiserModel::new(ArchConfig::head().with_widths([16, 16, 32]), 6).unwrap()
}

fn schedule() -> DiffusionSchedule {
    DiffusionSchedule::new(10, ScheduleKind::Cosine).unwrap()
}

fn audio(n: usize, seed: u64) -> Tensor {
    let mut rng = stream_rng(seed, 9);
    standard_normal(&[n, 64], &mut rng)
}

fn values(n: usize, c: usize) -> Tensor {
    Tensor::from_fn(&[n, c], |i| ((i as f32) * 0.37).sin())
}

fn masked_equal(out: &Tensor, spec: &ImputationSpec) -> bool {
    let c = out.dim(1);
    spec.mask().iter().enumerate().all(|(i, &m)| {
        m == 0.0 || out.data()[i * c..(i + 1) * c] == spec.values().data()[i * c..(i + 1) * c]
    })
}

#[test]
fn facial_samples_are_seeded_and_batch_independent() {
    let m = facial();
    let s = schedule();
    let cond = ConditionSet::new(audio(20, 1), Style::Subject(1));
    let mut req = SampleRequest::new(cond, 3, 3);
    let a = sample_facial(&m, &s, &req, ReverseKernel::Posterior).unwrap();
    let b = sample_facial(&m, &s, &req, ReverseKernel::Posterior).unwrap();
    assert_eq!(a, b);
    assert_ne!(a[0].data(), a[1].data());
    assert!(a
        .iter()
        .all(|q| q.data().all_finite() && q.frames() == 20 && q.channels() == 6));
    assert_eq!(a[0].subject, "b");
    req.count = 1;
    let single = sample_facial(&m, &s, &req, ReverseKernel::Posterior).unwrap();
    assert_eq!(single[0], a[0]);
}

#[test]
fn unit_scale_matches_conditional_only() {
    let m = facial();
    let s = schedule();
    let mut req = SampleRequest::new(ConditionSet::new(audio(16, 2), Style::Mean), 4, 2);
    req.guidance = GuidanceConfig::new(1.0).unwrap();
    let a = sample_facial(&m, &s, &req, ReverseKernel::Posterior).unwrap();
    req.guidance = GuidanceConfig::conditional();
    let b = sample_facial(&m, &s, &req, ReverseKernel::Posterior).unwrap();
    assert_eq!(a, b);
    req.guidance = GuidanceConfig::new(0.5).unwrap();
    assert_ne!(
        sample_facial(&m, &s, &req, ReverseKernel::Posterior).unwrap(),
        a
    );
}

#[test]
fn variant_mismatch_rejected() {
    let s = schedule();
    let req = SampleRequest::new(ConditionSet::new(audio(16, 2), Style::Mean), 4, 1);
    assert!(matches!(
        sample_facial(&head(), &s, &req, ReverseKernel::Posterior),
        Err(SamplingError::Variant { .. })
    ));
    let spec = ImputationSpec::empty(16, 3);
    assert!(matches!(
        sample_head_sgdiff(
            &facial(),
            &s,
            &audio(16, 0),
            &spec,
            GuidanceConfig::default(),
            0,
            &HeadOptions::default()
        ),
        Err(SamplingError::Variant { .. })
    ));
}

#[test]
fn facial_edit_keeps_known_frames() {
    let m = facial();
    let s = schedule();
    let n = 30;
    let cond = ConditionSet::new(audio(n, 3), Style::Subject(0));
    for mask in [
        make_inbetween_mask(n, 0.2, 0.2).unwrap(),
        make_keyframe_mask(n, 30.0, 3.0, 1).unwrap(),
        vec![1.0; n],
    ] {
        let spec = ImputationSpec::new(mask, values(n, 6)).unwrap();
        let out = edit_facial(
            &m,
            &s,
            &spec,
            &cond,
            GuidanceConfig::default(),
            7,
            &EditOptions::default(),
        )
        .unwrap();
        assert!(masked_equal(out.sequence.data(), &spec));
        assert!(out.sequence.data().all_finite());
    }
    let spec = ImputationSpec::new(vec![1.0; n], values(n, 6)).unwrap();
    let out = edit_facial(
        &m,
        &s,
        &spec,
        &cond,
        GuidanceConfig::default(),
        7,
        &EditOptions::default(),
    )
    .unwrap();
    assert_eq!(out.sequence.data(), spec.values());
}

#[test]
fn facial_edit_without_final_replacement_differs() {
    let m = facial();
    let s = schedule();
    let n = 24;
    let cond = ConditionSet::new(audio(n, 3), Style::Subject(0));
    let spec =
        ImputationSpec::new(make_inbetween_mask(n, 0.25, 0.25).unwrap(), values(n, 6)).unwrap();
    let opts = EditOptions {
        final_replacement: false,
        ..EditOptions::default()
    };
    let out = edit_facial(&m, &s, &spec, &cond, GuidanceConfig::default(), 7, &opts).unwrap();
    assert!(!masked_equal(out.sequence.data(), &spec));
}

#[test]
fn head_sgdiff_keeps_known_frames_in_both_modes() {
    let m = head();
    let s = schedule();
    let n = 40;
    for mode in [ImputationMode::Guided, ImputationMode::Replacement] {
        for mask in [
            make_inbetween_mask(n, 0.1, 0.3).unwrap(),
            make_keyframe_mask(n, 30.0, 1.0, 2).unwrap(),
            vec![0.0; n],
        ] {
            let spec = ImputationSpec::new(mask, values(n, 3)).unwrap();
            let opts = HeadOptions {
                mode,
                ..HeadOptions::default()
            };
            let out = sample_head_sgdiff(
                &m,
                &s,
                &audio(n, 4),
                &spec,
                GuidanceConfig::default(),
                1,
                &opts,
            )
            .unwrap();
            assert!(masked_equal(out.sequence.data(), &spec));
            assert_eq!(
                out.pre_replacement_mse.len(),
                if spec.is_empty() { 0 } else { 10 }
            );
            assert_eq!(out.sequence.kind, MotionKind::Head);
        }
    }
}

#[test]
fn head_batch_matches_single_runs() {
    let m = head();
    let s = schedule();
    let n = 32;
    let jobs: Vec<HeadJob> = (0..3)
        .map(|i| HeadJob {
            audio: audio(n, i),
            spec: ImputationSpec::new(make_keyframe_mask(n, 30.0, 2.0, i).unwrap(), values(n, 3))
                .unwrap(),
            seed: 10 + i,
        })
        .collect();
    let g = GuidanceConfig::new(0.5).unwrap();
    let batch = sample_head_batch(&m, &s, &jobs, g, &HeadOptions::default()).unwrap();
    for (job, out) in jobs.iter().zip(&batch) {
        let single = sample_head_sgdiff(
            &m,
            &s,
            &job.audio,
            &job.spec,
            g,
            job.seed,
            &HeadOptions::default(),
        )
        .unwrap();
        assert_eq!(&single, out);
    }
}

#[test]
fn spec_validation() {
    assert!(ImputationSpec::new(vec![1.0, 0.5], Tensor::zeros(&[2, 3])).is_err());
    assert!(ImputationSpec::new(vec![1.0], Tensor::zeros(&[2, 3])).is_err());
    let mut v = Tensor::zeros(&[2, 3]);
    v.data_mut()[0] = f32::NAN;
    assert!(ImputationSpec::new(vec![1.0, 0.0], v.clone()).is_err());
    assert!(ImputationSpec::new(vec![0.0, 1.0], v).is_ok());
    let k = ImputationSpec::from_keyframes(5, 3, &[(1, vec![1.0, 2.0, 3.0])]).unwrap();
    assert_eq!(k.mask(), [0.0, 1.0, 0.0, 0.0, 0.0]);
    assert_eq!(&k.values().data()[3..6], &[1.0, 2.0, 3.0]);
    assert!(ImputationSpec::from_keyframes(5, 3, &[(5, vec![0.0; 3])]).is_err());
}

#[test]
fn boundary_report_oracle() {
    // Frames 0-1 known, 2-5 generated. Steps: |1|, |3| (boundary), 1, 1, 2.
    let d = Tensor::new(vec![6, 1], vec![0.0, 1.0, 4.0, 5.0, 6.0, 8.0]).unwrap();
    let r = boundary_smoothness(&d, &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    assert_eq!(r.max_boundary_step, 3.0);
    assert_eq!(r.median_interior_step, 1.0);
    assert_eq!(r.ratio, Some(3.0));
    assert!(!r.warning);
    let r = boundary_smoothness(&d, &[0.0; 6]);
    assert_eq!(r.ratio, None);
    let jump = Tensor::new(vec![4, 1], vec![0.0, 10.0, 11.0, 12.0]).unwrap();
    assert!(boundary_smoothness(&jump, &[1.0, 0.0, 0.0, 0.0]).warning);
}
