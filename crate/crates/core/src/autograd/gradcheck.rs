//! Central-difference gradient checks over every recorded op class.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::ResampleTable;
use super::{Graph, Var};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpClass {
    Conv,
    PointwiseConv,
    Linear,
    Silu,
    GroupNorm,
    Structural,
    Elementwise,
}

impl OpClass {
    pub const ALL: [OpClass; 7] = [
        OpClass::Conv,
        OpClass::PointwiseConv,
        OpClass::Linear,
        OpClass::Silu,
        OpClass::GroupNorm,
        OpClass::Structural,
        OpClass::Elementwise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpClass::Conv => "conv1d",
            OpClass::PointwiseConv => "conv1d_pointwise",
            OpClass::Linear => "linear",
            OpClass::Silu => "silu",
            OpClass::GroupNorm => "group_norm",
            OpClass::Structural => "concat_broadcast_resample_diff",
            OpClass::Elementwise => "elementwise_reduce",
        }
    }

    /// Worst norm-wise relative error for one random probe.
    pub fn probe(self, seed: u64) -> f64 {
        let off = OpClass::ALL.iter().position(|&c| c == self).unwrap() as u64 * 100;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + off);
        match self {
            OpClass::Conv => {
                let stride = 1 + (seed as usize % 2);
                let inputs = [
                    random(&[2, 3, 7], &mut rng),
                    random(&[4, 3, 3], &mut rng),
                    random(&[4], &mut rng),
                ];
                fd_check(&inputs, &|g, v| {
                    let y = g.conv1d(v[0], v[1], Some(v[2]), stride, 1).unwrap();
                    project(g, y, seed)
                })
            }
            OpClass::PointwiseConv => {
                let inputs = [random(&[2, 5, 4], &mut rng), random(&[3, 5, 1], &mut rng)];
                fd_check(&inputs, &|g, v| {
                    let y = g.conv1d(v[0], v[1], None, 1, 0).unwrap();
                    project(g, y, seed)
                })
            }
            OpClass::Linear => {
                let inputs = [
                    random(&[3, 4], &mut rng),
                    random(&[5, 4], &mut rng),
                    random(&[5], &mut rng),
                ];
                fd_check(&inputs, &|g, v| {
                    let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
                    project(g, y, seed)
                })
            }
            OpClass::Silu => {
                let inputs = [random(&[2, 3, 5], &mut rng).scale(3.0)];
                fd_check(&inputs, &|g, v| {
                    let y = g.silu(v[0]);
                    project(g, y, seed)
                })
            }
            OpClass::GroupNorm => {
                let inputs = [
                    random(&[2, 6, 4], &mut rng),
                    random(&[6], &mut rng),
                    random(&[6], &mut rng),
                ];
                fd_check(&inputs, &|g, v| {
                    let y = g.group_norm(v[0], v[1], v[2], 2).unwrap();
                    project(g, y, seed)
                })
            }
            OpClass::Structural => {
                let inputs = [
                    random(&[2, 3, 6], &mut rng),
                    random(&[2, 2, 6], &mut rng),
                    random(&[2, 4], &mut rng),
                ];
                let up = Rc::new(ResampleTable::upsample2(3, 6));
                let down = Rc::new(ResampleTable::downsample2(6));
                fd_check(&inputs, &|g, v| {
                    let e = g.broadcast_frames(v[2], 6).unwrap();
                    let c = g.concat_channels(&[v[0], v[1], e]).unwrap();
                    let d = g.resample(c, down.clone()).unwrap();
                    let u = g.resample(d, up.clone()).unwrap();
                    let f = g.frame_diff(u).unwrap();
                    let pf = project(g, f, seed);
                    let pu = project(g, u, seed + 1);
                    g.add(pf, pu).unwrap()
                })
            }
            OpClass::Elementwise => {
                let inputs = [random(&[3, 4], &mut rng), random(&[3, 4], &mut rng)];
                fd_check(&inputs, &|g, v| {
                    let a = g.add(v[0], v[1]).unwrap();
                    let s = g.sub(a, v[1]).unwrap();
                    let m = g.mul(s, v[1]).unwrap();
                    let q = g.square(m);
                    let k = g.scale(q, 0.7);
                    let mean = g.mean(k);
                    let total = g.sum(v[0]);
                    let both = g.add(mean, total).unwrap();
                    g.scale(both, 1.3)
                })
            }
        }
    }
}

pub fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Central-difference check of `build`'s gradient with respect to each input.
/// Returns the worst norm-wise relative error.
pub fn fd_check(inputs: &[Tensor<f64>], build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out).expect("scalar output");

    let eval = |vals: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]);
        let mut numeric = vec![0.0; input.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nn).max(1e-12));
    }
    worst
}

/// Projects a tensor onto a fixed random direction so the check sees every
/// output entry.
pub fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = random(g.shape(y), &mut rng);
    let w = g.constant(w);
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}
