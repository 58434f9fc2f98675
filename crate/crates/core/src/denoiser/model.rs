use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use super::arch::{ArchConfig, Variant, AUDIO_DIM, KERNEL, MIN_FRAMES, STYLE_DIM, TIME_DIM};
use crate::autograd::kernels::ResampleTable;
use crate::autograd::{AutogradError, Graph, Var};
use crate::diffusion::{DiffusionError, DiffusionSchedule, DiffusionSpec};
use crate::params::{kaiming, ParamStore};
use crate::tensor::{Real, ShapeError, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DenoiserError {
    #[error("model expects {expected} input channels, got {got}")]
    Channels { expected: usize, got: usize },
    #[error("audio has {got} channels, model expects {expected}")]
    AudioChannels { expected: usize, got: usize },
    #[error("audio covers {audio} frames but motion has {motion}")]
    AudioFrames { motion: usize, audio: usize },
    #[error("guidance flag at frame {frame} is {value}, must be 0 or 1")]
    Flag { frame: usize, value: f32 },
    #[error("unknown subject index {0}")]
    UnknownSubject(usize),
    #[error("operation needs a {expected} model, got {got}")]
    Variant {
        expected: &'static str,
        got: &'static str,
    },
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("sequence has no frames")]
    Empty,
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

type Result<T> = std::result::Result<T, DenoiserError>;

/// Which style embedding conditions a facial prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Style {
    Subject(usize),
    /// Average over the known subjects.
    Mean,
}

/// Per-frame conditioning of a single sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSet {
    /// `[N, audio_in]`.
    pub audio: Tensor,
    pub style: Style,
    /// Treat the audio as zeros (unconditional prediction).
    pub null: bool,
}

impl ConditionSet {
    pub fn new(audio: Tensor, style: Style) -> Self {
        Self {
            audio,
            style,
            null: false,
        }
    }

    pub fn null(&self) -> Self {
        Self {
            audio: self.audio.clone(),
            style: self.style,
            null: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Block {
    conv_w: usize,
    conv_b: usize,
    gn_gamma: usize,
    gn_beta: usize,
}

/// Slot indices of every parameter group.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    time_w: usize,
    time_b: usize,
    style: Option<usize>,
    proj: Option<(usize, usize)>,
    enc: [Block; 3],
    dec: [Block; 2],
    out_w: usize,
    out_b: usize,
}

/// Motion rows of a `[B, C + 1, N]` input multiplied by its trailing flag
/// row, giving `[B, C, N]`: the known values where the flag is 1, else 0.
pub(super) fn flagged_signal<T: Real>(x: &Tensor<T>, c: usize) -> Tensor<T> {
    let (b, n) = (x.dim(0), x.dim(2));
    let d = x.data();
    let mut out = Vec::with_capacity(b * c * n);
    for bi in 0..b {
        let base = bi * (c + 1) * n;
        let flag = &d[base + c * n..base + (c + 1) * n];
        for ch in 0..c {
            let row = &d[base + ch * n..base + (ch + 1) * n];
            out.extend(row.iter().zip(flag).map(|(&v, &f)| v * f));
        }
    }
    Tensor::from_parts(vec![b, c, n], out)
}

/// Sinusoidal features of a diffusion step.
pub fn time_features(t: usize) -> [f64; TIME_DIM] {
    let half = TIME_DIM / 2;
    let mut out = [0.0; TIME_DIM];
    for k in 0..half {
        let freq = 1.0 / 10_000f64.powf(k as f64 / half as f64);
        out[k] = (t as f64 * freq).sin();
        out[half + k] = (t as f64 * freq).cos();
    }
    out
}

/// Fully convolutional x0-predicting network.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    arch: ArchConfig,
    params: ParamStore,
    layout: Layout,
}

impl DenoiserModel {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate().map_err(DenoiserError::Arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let time_w = p.push("time.w", kaiming(&[TIME_DIM, TIME_DIM], TIME_DIM, &mut rng));
        let time_b = p.push("time.b", Tensor::zeros(&[TIME_DIM]));
        let style = (arch.variant == Variant::Facial).then(|| {
            let s = arch.subjects.len();
            let normal = Normal::new(0.0, 1.0).unwrap();
            let table = Tensor::from_fn(&[STYLE_DIM, s], |_| normal.sample(&mut rng) as f32);
            p.push("style.table", table)
        });
        let proj = (arch.audio_in != AUDIO_DIM).then(|| {
            let w = kaiming(&[AUDIO_DIM, arch.audio_in, 1], arch.audio_in, &mut rng);
            (
                p.push("audio.proj.w", w),
                p.push("audio.proj.b", Tensor::zeros(&[AUDIO_DIM])),
            )
        });
        let cc = arch.cond_channels();
        let [w0, w1, w2] = arch.widths;
        let skip = |w: usize| if arch.skip_connections { w } else { 0 };
        let mut block = |name: &str, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng| Block {
            conv_w: p.push(
                &format!("{name}.conv.w"),
                kaiming(&[c_out, c_in, KERNEL], c_in * KERNEL, rng),
            ),
            conv_b: p.push(&format!("{name}.conv.b"), Tensor::zeros(&[c_out])),
            gn_gamma: p.push(&format!("{name}.gn.gamma"), Tensor::full(&[c_out], 1.0)),
            gn_beta: p.push(&format!("{name}.gn.beta"), Tensor::zeros(&[c_out])),
        };
        let enc = [
            block("enc0", arch.input_channels() + cc, w0, &mut rng),
            block("enc1", w0 + cc, w1, &mut rng),
            block("enc2", w1 + cc, w2, &mut rng),
        ];
        let dec = [
            block("dec1", w2 + skip(w1) + cc, w1, &mut rng),
            block("dec0", w1 + skip(w0) + cc, w0, &mut rng),
        ];
        let c = arch.motion_channels;
        let out_in = w0 + skip(c);
        let mut out_w = kaiming(&[c, w0, 1], w0, &mut rng);
        if arch.skip_connections {
            // Known values start out passed straight through.
            let d = out_w.data();
            let mut w = Vec::with_capacity(c * out_in);
            for o in 0..c {
                w.extend_from_slice(&d[o * w0..(o + 1) * w0]);
                w.extend((0..c).map(|i| if i == o { 1.0 } else { 0.0 }));
            }
            out_w = Tensor::from_parts(vec![c, out_in, 1], w);
        }
        let out_w = p.push("out.w", out_w);
        let out_b = p.push("out.b", Tensor::zeros(&[arch.motion_channels]));
        Ok(Self {
            arch,
            params: p,
            layout: Layout {
                time_w,
                time_b,
                style,
                proj,
                enc,
                dec,
                out_w,
                out_b,
            },
        })
    }

    pub(crate) fn from_parts(arch: ArchConfig, params: ParamStore) -> Result<Self> {
        let template = Self::new(arch.clone(), 0)?;
        if template.params.len() != params.len() {
            return Err(DenoiserError::Arch(format!(
                "expected {} parameter tensors, got {}",
                template.params.len(),
                params.len()
            )));
        }
        for ((n0, t0), (n1, t1)) in template.params.iter().zip(params.iter()) {
            if n0 != n1 || t0.shape() != t1.shape() {
                return Err(DenoiserError::Arch(format!(
                    "parameter `{n1}` {:?} does not match `{n0}` {:?}",
                    t1.shape(),
                    t0.shape()
                )));
            }
        }
        Ok(Self {
            arch,
            params,
            layout: template.layout,
        })
    }

    /// Records the schedule used in training; the weights are untouched.
    pub fn set_diffusion(&mut self, spec: DiffusionSpec) {
        self.arch.diffusion = spec;
    }

    pub fn schedule(&self) -> std::result::Result<DiffusionSchedule, DiffusionError> {
        self.arch.diffusion.build()
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn variant(&self) -> Variant {
        self.arch.variant
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn subject_index(&self, name: &str) -> Option<usize> {
        self.arch.subjects.iter().position(|s| s == name)
    }

    /// Appends a style embedding initialised to the mean of the existing
    /// ones and returns its index.
    pub fn add_subject(&mut self, name: &str) -> Result<usize> {
        let slot = self.layout.style.ok_or(DenoiserError::Variant {
            expected: "facial",
            got: "head",
        })?;
        let table = self.params.get(slot);
        let s = table.dim(1);
        let known = self.arch.subjects.len();
        let mut data = Vec::with_capacity(STYLE_DIM * (s + 1));
        for r in 0..STYLE_DIM {
            let row = &table.data()[r * s..(r + 1) * s];
            data.extend_from_slice(row);
            data.push(row[..known].iter().sum::<f32>() / known as f32);
        }
        self.params
            .set(slot, Tensor::from_parts(vec![STYLE_DIM, s + 1], data));
        self.arch.subjects.push(name.to_string());
        Ok(self.arch.subjects.len() - 1)
    }

    /// Mixing weights over style embeddings for a batch.
    pub fn style_weights(&self, styles: &[Style]) -> Result<Tensor> {
        let s = self
            .layout
            .style
            .map_or(0, |slot| self.params.get(slot).dim(1));
        let mut w = vec![0.0; styles.len() * s];
        for (b, st) in styles.iter().enumerate() {
            match *st {
                Style::Subject(i) if i < s => w[b * s + i] = 1.0,
                Style::Subject(i) => return Err(DenoiserError::UnknownSubject(i)),
                Style::Mean => {
                    let known = self.arch.subjects.len();
                    for v in &mut w[b * s..b * s + known] {
                        *v = 1.0 / known as f32;
                    }
                }
            }
        }
        Ok(Tensor::from_parts(vec![styles.len(), s], w))
    }

    fn check_inputs(
        &self,
        x: &Tensor<impl Real>,
        audio: &Tensor<impl Real>,
        t: &[usize],
    ) -> Result<()> {
        let [b, c, n] = x.shape()[..] else {
            return Err(ShapeError::Mismatch(format!("input {:?}", x.shape())).into());
        };
        if c != self.arch.input_channels() {
            return Err(DenoiserError::Channels {
                expected: self.arch.input_channels(),
                got: c,
            });
        }
        if n == 0 {
            return Err(DenoiserError::Empty);
        }
        let [ab, ac, an] = audio.shape()[..] else {
            return Err(ShapeError::Mismatch(format!("audio {:?}", audio.shape())).into());
        };
        if ac != self.arch.audio_in {
            return Err(DenoiserError::AudioChannels {
                expected: self.arch.audio_in,
                got: ac,
            });
        }
        if an != n || ab != b {
            return Err(DenoiserError::AudioFrames {
                motion: n,
                audio: an,
            });
        }
        if t.len() != b {
            return Err(ShapeError::Mismatch(format!("{} steps for batch {b}", t.len())).into());
        }
        if self.arch.variant == Variant::Head {
            let flag = self.arch.motion_channels;
            for bi in 0..b {
                let row = &x.data()[(bi * c + flag) * n..(bi * c + flag + 1) * n];
                if let Some((frame, v)) = row
                    .iter()
                    .map(|v| v.as_f64())
                    .enumerate()
                    .find(|(_, v)| *v != 0.0 && *v != 1.0)
                {
                    return Err(DenoiserError::Flag {
                        frame,
                        value: v as f32,
                    });
                }
            }
        }
        Ok(())
    }

    /// Records the network on `g`. `x` is `[B, C_in, N]`, `audio` is
    /// `[B, audio_in, N]` (already zeroed for unconditional rows), `style`
    /// is `[B, S]` mixing weights for facial models.
    pub fn build<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        x: Var,
        t: &[usize],
        audio: Var,
        style: Option<Var>,
    ) -> Result<Var> {
        let l = &self.layout;
        let n0 = *g.shape(x).last().unwrap();
        let b = g.shape(x)[0];

        let tf: Vec<T> = t
            .iter()
            .flat_map(|&ti| time_features(ti).map(T::from_f64))
            .collect();
        let tf = g.constant(Tensor::from_parts(vec![b, TIME_DIM], tf));
        let temb = g.linear(tf, p[l.time_w], Some(p[l.time_b]))?;
        let temb = g.silu(temb);
        let semb = match (l.style, style) {
            (Some(slot), Some(w)) => Some(g.linear(w, p[slot], None)?),
            (Some(_), None) => {
                return Err(DenoiserError::Arch(
                    "facial model needs style weights".into(),
                ))
            }
            _ => None,
        };

        let a0 = match l.proj {
            Some((w, bias)) => g.conv1d(audio, p[w], Some(p[bias]), 1, 0)?,
            None => audio,
        };
        let down0 = Rc::new(ResampleTable::downsample2(n0));
        let n1 = down0.out_len;
        let a1 = g.resample(a0, down0)?;
        let n2 = n1.div_ceil(2);

        let cond = |g: &mut Graph<T>, a: Var, n: usize| -> Result<Var> {
            let mut parts = vec![a];
            if let Some(s) = semb {
                parts.push(g.broadcast_frames(s, n)?);
            }
            parts.push(g.broadcast_frames(temb, n)?);
            Ok(g.concat_channels(&parts)?)
        };
        let c0 = cond(g, a0, n0)?;
        let c1 = cond(g, a1, n1)?;

        let groups = self.arch.groups;
        let layer = |g: &mut Graph<T>, blk: &Block, inputs: &[Var], stride: usize| -> Result<Var> {
            let h = g.concat_channels(inputs)?;
            let h = g.conv1d(h, p[blk.conv_w], Some(p[blk.conv_b]), stride, KERNEL / 2)?;
            let h = g.group_norm(h, p[blk.gn_gamma], p[blk.gn_beta], groups)?;
            Ok(g.silu(h))
        };

        let e0 = layer(g, &l.enc[0], &[x, c0], 1)?;
        let e1 = layer(g, &l.enc[1], &[e0, c0], 2)?;
        let e2 = layer(g, &l.enc[2], &[e1, c1], 2)?;
        debug_assert_eq!(*g.shape(e2).last().unwrap(), n2);

        let u1 = g.resample(e2, Rc::new(ResampleTable::upsample2(n2, n1)))?;
        let mut in1 = vec![u1];
        if self.arch.skip_connections {
            in1.push(e1);
        }
        in1.push(c1);
        let d1 = layer(g, &l.dec[0], &in1, 1)?;

        let u0 = g.resample(d1, Rc::new(ResampleTable::upsample2(n1, n0)))?;
        let mut in0 = vec![u0];
        if self.arch.skip_connections {
            in0.push(e0);
        }
        in0.push(c0);
        let d0 = layer(g, &l.dec[1], &in0, 1)?;
        let d0 = if self.arch.skip_connections {
            let known = g.constant(flagged_signal(g.value(x), self.arch.motion_channels));
            g.concat_channels(&[d0, known])?
        } else {
            d0
        };
        Ok(g.conv1d(d0, p[l.out_w], Some(p[l.out_b]), 1, 0)?)
    }

    /// Batched prediction without gradient tracking. `x` is `[B, C_in, N]`,
    /// `audio` `[B, audio_in, N]`; rows with `null[b]` see zero audio.
    pub fn predict_batch(
        &self,
        x: &Tensor,
        t: &[usize],
        audio: &Tensor,
        null: &[bool],
        styles: &[Style],
    ) -> Result<Tensor> {
        self.check_inputs(x, audio, t)?;
        let n = x.dim(2);
        // Short inputs are zero-padded up to the receptive floor.
        let pad = MIN_FRAMES.saturating_sub(n);
        let (x, audio) = if pad > 0 {
            (pad_frames(x, pad), pad_frames(audio, pad))
        } else {
            (x.clone(), audio.clone())
        };
        let audio = zero_rows(audio, null);

        let mut g = Graph::<f32>::new();
        let p = self.params.bind_frozen(&mut g);
        let xv = g.constant(x);
        let av = g.constant(audio);
        let sv = match self.layout.style {
            Some(_) => Some(g.constant(self.style_weights(styles)?)),
            None => None,
        };
        let out = self.build(&mut g, &p, xv, t, av, sv)?;
        let y = g.value(out).clone();
        Ok(if pad > 0 { crop_frames(&y, n) } else { y })
    }

    /// Single-sequence prediction with frame-major `[N, C]` tensors.
    pub fn predict(&self, x_t: &Tensor, t: usize, cond: &ConditionSet) -> Result<Tensor> {
        let [n, _] = x_t.shape()[..] else {
            return Err(ShapeError::Mismatch(format!("input {:?}", x_t.shape())).into());
        };
        let [an, _] = cond.audio.shape()[..] else {
            return Err(ShapeError::Mismatch(format!("audio {:?}", cond.audio.shape())).into());
        };
        if an != n {
            return Err(DenoiserError::AudioFrames {
                motion: n,
                audio: an,
            });
        }
        let x = channels_first(x_t);
        let a = channels_first(&cond.audio);
        let y = self.predict_batch(&x, &[t], &a, &[cond.null], &[cond.style])?;
        Ok(frames_first(&y))
    }
}

/// `[N, C]` to `[1, C, N]`.
pub fn channels_first<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let t = x.transpose2();
    let (c, n) = (t.dim(0), t.dim(1));
    t.reshape(&[1, c, n]).expect("same length")
}

/// `[1, C, N]` to `[N, C]`.
pub fn frames_first<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, n) = (x.dim(1), x.dim(2));
    x.clone()
        .reshape(&[c, n])
        .expect("batch of one")
        .transpose2()
}

fn pad_frames<T: Real>(x: &Tensor<T>, pad: usize) -> Tensor<T> {
    let n = *x.shape().last().unwrap();
    let rows = x.len() / n;
    let mut data = Vec::with_capacity(rows * (n + pad));
    for r in 0..rows {
        data.extend_from_slice(&x.data()[r * n..(r + 1) * n]);
        data.extend(std::iter::repeat_n(T::zero(), pad));
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = n + pad;
    Tensor::new(shape, data).expect("padded shape")
}

fn crop_frames<T: Real>(x: &Tensor<T>, n: usize) -> Tensor<T> {
    let full = *x.shape().last().unwrap();
    let rows = x.len() / full;
    let mut data = Vec::with_capacity(rows * n);
    for r in 0..rows {
        data.extend_from_slice(&x.data()[r * full..r * full + n]);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Tensor::new(shape, data).expect("cropped shape")
}

/// Zeroes the batch rows flagged in `null`.
pub fn zero_rows<T: Real>(mut x: Tensor<T>, null: &[bool]) -> Tensor<T> {
    let b = x.dim(0);
    let row = x.len() / b;
    for (bi, &z) in null.iter().enumerate() {
        if z {
            x.data_mut()[bi * row..(bi + 1) * row].fill(T::zero());
        }
    }
    x
}
