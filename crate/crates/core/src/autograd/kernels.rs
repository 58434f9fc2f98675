//! Forward and adjoint kernels for the tape operations.
//!
//! Sequence tensors are laid out `[batch, channels, frames]`.

use crate::tensor::Real;

/// Output length of a 1D convolution.
pub fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let n_out = g.n_out;
    for ci in 0..g.c_in {
        let row = &x[ci * g.n_in..(ci + 1) * g.n_in];
        for kk in 0..g.k {
            let dst = &mut cols[(ci * g.k + kk) * n_out..(ci * g.k + kk + 1) * n_out];
            for (j, d) in dst.iter_mut().enumerate() {
                let src = (j * g.stride + kk) as isize - g.pad as isize;
                *d = if src >= 0 && (src as usize) < g.n_in {
                    row[src as usize]
                } else {
                    T::zero()
                };
            }
        }
    }
}

fn col2im_add<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let n_out = g.n_out;
    for ci in 0..g.c_in {
        let row = &mut dx[ci * g.n_in..(ci + 1) * g.n_in];
        for kk in 0..g.k {
            let src = &cols[(ci * g.k + kk) * n_out..(ci * g.k + kk + 1) * n_out];
            for (j, &v) in src.iter().enumerate() {
                let pos = (j * g.stride + kk) as isize - g.pad as isize;
                if pos >= 0 && (pos as usize) < g.n_in {
                    row[pos as usize] = row[pos as usize] + v;
                }
            }
        }
    }
}

pub fn conv1d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let ck = g.c_in * g.k;
    let mut out = vec![T::zero(); g.batch * g.c_out * g.n_out];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); ck * g.n_out]
    };
    for b in 0..g.batch {
        let xb = &x[b * g.c_in * g.n_in..(b + 1) * g.c_in * g.n_in];
        let ob = &mut out[b * g.c_out * g.n_out..(b + 1) * g.c_out * g.n_out];
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                ob[co * g.n_out..(co + 1) * g.n_out].fill(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut cols);
            &cols
        };
        T::gemm(
            g.c_out,
            ck,
            g.n_out,
            T::one(),
            w,
            ck as isize,
            1,
            src,
            g.n_out as isize,
            1,
            beta,
            ob,
            g.n_out as isize,
            1,
        );
    }
    out
}

/// Accumulates input, weight and bias adjoints. Any of the outputs may be
/// skipped when the corresponding input does not need a gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
) {
    let ck = g.c_in * g.k;
    let mut cols = vec![T::zero(); ck * g.n_out];
    for b in 0..g.batch {
        let xb = &x[b * g.c_in * g.n_in..(b + 1) * g.c_in * g.n_in];
        let db = &dout[b * g.c_out * g.n_out..(b + 1) * g.c_out * g.n_out];
        if let Some(dbias) = dbias.as_deref_mut() {
            for (co, acc) in dbias.iter_mut().enumerate() {
                let s = db[co * g.n_out..(co + 1) * g.n_out]
                    .iter()
                    .fold(T::zero(), |a, &v| a + v);
                *acc = *acc + s;
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let src: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(g, xb, &mut cols);
                &cols
            };
            // dw (c_out x ck) += dout_b (c_out x n_out) * src^T (n_out x ck)
            T::gemm(
                g.c_out,
                g.n_out,
                ck,
                T::one(),
                db,
                g.n_out as isize,
                1,
                src,
                1,
                g.n_out as isize,
                T::one(),
                dw,
                ck as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * g.c_in * g.n_in..(b + 1) * g.c_in * g.n_in];
            if g.is_pointwise() {
                T::gemm(
                    ck,
                    g.c_out,
                    g.n_out,
                    T::one(),
                    w,
                    1,
                    ck as isize,
                    db,
                    g.n_out as isize,
                    1,
                    T::one(),
                    dxb,
                    g.n_out as isize,
                    1,
                );
            } else {
                T::gemm(
                    ck,
                    g.c_out,
                    g.n_out,
                    T::one(),
                    w,
                    1,
                    ck as isize,
                    db,
                    g.n_out as isize,
                    1,
                    T::zero(),
                    &mut cols,
                    g.n_out as isize,
                    1,
                );
                col2im_add(g, &cols, dxb);
            }
        }
    }
}

/// `x (m x f_in) * w^T (f_in x f_out) + bias`.
pub fn linear_forward<T: Real>(
    m: usize,
    f_in: usize,
    f_out: usize,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let mut out = vec![T::zero(); m * f_out];
    if let Some(bias) = bias {
        for row in out.chunks_mut(f_out) {
            row.copy_from_slice(bias);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    T::gemm(
        m,
        f_in,
        f_out,
        T::one(),
        x,
        f_in as isize,
        1,
        w,
        1,
        f_in as isize,
        beta,
        &mut out,
        f_out as isize,
        1,
    );
    out
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    m: usize,
    f_in: usize,
    f_out: usize,
    x: &[T],
    w: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    if let Some(dx) = dx {
        T::gemm(
            m,
            f_out,
            f_in,
            T::one(),
            dout,
            f_out as isize,
            1,
            w,
            f_in as isize,
            1,
            T::one(),
            dx,
            f_in as isize,
            1,
        );
    }
    if let Some(dw) = dw {
        T::gemm(
            f_out,
            m,
            f_in,
            T::one(),
            dout,
            1,
            f_out as isize,
            x,
            f_in as isize,
            1,
            T::one(),
            dw,
            f_in as isize,
            1,
        );
    }
    if let Some(db) = dbias {
        for row in dout.chunks(f_out) {
            for (acc, &v) in db.iter_mut().zip(row) {
                *acc = *acc + v;
            }
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Per-frame statistics for group normalization over channel groups.
#[derive(Debug, Clone)]
pub struct GroupNormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Normalizes each frame over the channels of each group. Returns the output
/// and the cached statistics indexed `[b][g][n]`.
pub fn group_norm_forward<T: Real>(
    batch: usize,
    channels: usize,
    frames: usize,
    groups: usize,
    eps: T,
    x: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, GroupNormStats<T>) {
    let cg = channels / groups;
    let inv = T::one() / T::from_f64(cg as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut mean = vec![T::zero(); batch * groups * frames];
    let mut rstd = vec![T::zero(); batch * groups * frames];
    for b in 0..batch {
        for gi in 0..groups {
            let sidx = (b * groups + gi) * frames;
            let m = &mut mean[sidx..sidx + frames];
            for c in gi * cg..(gi + 1) * cg {
                let row = &x[(b * channels + c) * frames..(b * channels + c + 1) * frames];
                for (acc, &v) in m.iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
            for v in m.iter_mut() {
                *v = *v * inv;
            }
            let r = &mut rstd[sidx..sidx + frames];
            for c in gi * cg..(gi + 1) * cg {
                let row = &x[(b * channels + c) * frames..(b * channels + c + 1) * frames];
                for ((acc, &v), &mu) in r.iter_mut().zip(row).zip(m.iter()) {
                    let d = v - mu;
                    *acc = *acc + d * d;
                }
            }
            for v in r.iter_mut() {
                *v = T::one() / (*v * inv + eps).sqrt();
            }
            for c in gi * cg..(gi + 1) * cg {
                let base = (b * channels + c) * frames;
                let row = &x[base..base + frames];
                let o = &mut out[base..base + frames];
                for n in 0..frames {
                    o[n] = (row[n] - m[n]) * r[n] * gamma[c] + beta[c];
                }
            }
        }
    }
    (out, GroupNormStats { mean, rstd })
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Real>(
    batch: usize,
    channels: usize,
    frames: usize,
    groups: usize,
    x: &[T],
    gamma: &[T],
    stats: &GroupNormStats<T>,
    dout: &[T],
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let cg = channels / groups;
    let inv = T::one() / T::from_f64(cg as f64);
    if let Some(dgamma) = dgamma {
        for b in 0..batch {
            for c in 0..channels {
                let gi = c / cg;
                let sidx = (b * groups + gi) * frames;
                let base = (b * channels + c) * frames;
                let mut acc = T::zero();
                for n in 0..frames {
                    let xhat = (x[base + n] - stats.mean[sidx + n]) * stats.rstd[sidx + n];
                    acc = acc + dout[base + n] * xhat;
                }
                dgamma[c] = dgamma[c] + acc;
            }
        }
    }
    if let Some(dbeta) = dbeta {
        for b in 0..batch {
            for c in 0..channels {
                let base = (b * channels + c) * frames;
                let s = dout[base..base + frames]
                    .iter()
                    .fold(T::zero(), |a, &v| a + v);
                dbeta[c] = dbeta[c] + s;
            }
        }
    }
    if let Some(dx) = dx {
        let mut sum_d = vec![T::zero(); frames];
        let mut sum_dx = vec![T::zero(); frames];
        for b in 0..batch {
            for gi in 0..groups {
                let sidx = (b * groups + gi) * frames;
                sum_d.fill(T::zero());
                sum_dx.fill(T::zero());
                for c in gi * cg..(gi + 1) * cg {
                    let base = (b * channels + c) * frames;
                    for n in 0..frames {
                        let xhat = (x[base + n] - stats.mean[sidx + n]) * stats.rstd[sidx + n];
                        let dxhat = dout[base + n] * gamma[c];
                        sum_d[n] = sum_d[n] + dxhat;
                        sum_dx[n] = sum_dx[n] + dxhat * xhat;
                    }
                }
                for c in gi * cg..(gi + 1) * cg {
                    let base = (b * channels + c) * frames;
                    for n in 0..frames {
                        let r = stats.rstd[sidx + n];
                        let xhat = (x[base + n] - stats.mean[sidx + n]) * r;
                        let dxhat = dout[base + n] * gamma[c];
                        let v = r * (dxhat - inv * sum_d[n] - xhat * inv * sum_dx[n]);
                        dx[base + n] = dx[base + n] + v;
                    }
                }
            }
        }
    }
}

/// Sparse linear map along the frame axis: every output frame is a weighted
/// sum of at most a few input frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ResampleTable {
    pub in_len: usize,
    pub out_len: usize,
    taps: Vec<Vec<(usize, f64)>>,
}

impl ResampleTable {
    fn from_taps(in_len: usize, taps: Vec<Vec<(usize, f64)>>) -> Self {
        let mut merged = Vec::with_capacity(taps.len());
        for t in taps {
            let mut m: Vec<(usize, f64)> = Vec::with_capacity(t.len());
            for (i, w) in t {
                if let Some(e) = m.iter_mut().find(|e| e.0 == i) {
                    e.1 += w;
                } else {
                    m.push((i, w));
                }
            }
            merged.push(m);
        }
        Self {
            in_len,
            out_len: merged.len(),
            taps: merged,
        }
    }

    /// Strided `[1/4, 1/2, 1/4]` smoothing; output `i` is centred on input `2i`,
    /// matching a stride-2, pad-1, kernel-3 convolution.
    pub fn downsample2(in_len: usize) -> Self {
        let out_len = in_len.div_ceil(2);
        let clamp = |i: isize| i.clamp(0, in_len as isize - 1) as usize;
        let taps = (0..out_len)
            .map(|i| {
                let c = 2 * i as isize;
                vec![(clamp(c - 1), 0.25), (clamp(c), 0.5), (clamp(c + 1), 0.25)]
            })
            .collect();
        Self::from_taps(in_len, taps)
    }

    /// Linear interpolation from a stride-2 grid (coarse `i` sits at fine `2i`)
    /// back to `out_len` fine frames.
    pub fn upsample2(in_len: usize, out_len: usize) -> Self {
        let clamp = |i: usize| i.min(in_len - 1);
        let taps = (0..out_len)
            .map(|j| {
                if j % 2 == 0 {
                    vec![(clamp(j / 2), 1.0)]
                } else {
                    vec![(clamp(j / 2), 0.5), (clamp(j / 2 + 1), 0.5)]
                }
            })
            .collect();
        Self::from_taps(in_len, taps)
    }

    /// Linear interpolation mapping the first and last frames onto each other.
    pub fn align_corners(in_len: usize, out_len: usize) -> Self {
        let taps = (0..out_len)
            .map(|j| {
                if in_len == 1 || out_len == 1 {
                    return vec![(0, 1.0)];
                }
                let pos = j as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
                let lo = (pos.floor() as usize).min(in_len - 1);
                let hi = (lo + 1).min(in_len - 1);
                let frac = pos - lo as f64;
                if frac == 0.0 || lo == hi {
                    vec![(lo, 1.0)]
                } else {
                    vec![(lo, 1.0 - frac), (hi, frac)]
                }
            })
            .collect();
        Self::from_taps(in_len, taps)
    }

    /// Applies the map to `rows` contiguous frame rows of length `in_len`.
    pub fn apply<T: Real>(&self, rows: usize, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); rows * self.out_len];
        for r in 0..rows {
            let src = &x[r * self.in_len..(r + 1) * self.in_len];
            let dst = &mut out[r * self.out_len..(r + 1) * self.out_len];
            for (d, taps) in dst.iter_mut().zip(&self.taps) {
                *d = taps
                    .iter()
                    .fold(T::zero(), |acc, &(i, w)| acc + src[i] * T::from_f64(w));
            }
        }
        out
    }

    pub fn apply_adjoint_add<T: Real>(&self, rows: usize, dout: &[T], dx: &mut [T]) {
        for r in 0..rows {
            let src = &dout[r * self.out_len..(r + 1) * self.out_len];
            let dst = &mut dx[r * self.in_len..(r + 1) * self.in_len];
            for (&g, taps) in src.iter().zip(&self.taps) {
                for &(i, w) in taps {
                    dst[i] = dst[i] + g * T::from_f64(w);
                }
            }
        }
    }

    /// Indices read by output frame `j`.
    pub fn sources(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        self.taps[j].iter().map(|&(i, _)| i)
    }
}
