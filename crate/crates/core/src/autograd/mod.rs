//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] records every operation eagerly (values are computed when the
//! node is added) so the node list is already in topological order. Calling
//! [`Graph::backward`] on a scalar node walks the list in reverse and
//! accumulates adjoints for every leaf that requires a gradient.

pub mod gradcheck;
pub mod kernels;

use std::rc::Rc;

use thiserror::Error;

use crate::tensor::{Real, ShapeError, Tensor};
use kernels::{ConvGeom, GroupNormStats, ResampleTable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutogradError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("operation `{0}` has no registered adjoint")]
    MissingAdjoint(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, AutogradError>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T: Real> {
    Leaf,
    Conv1d {
        geom: ConvGeom,
        has_bias: bool,
    },
    Linear {
        m: usize,
        f_in: usize,
        f_out: usize,
        has_bias: bool,
    },
    Silu,
    GroupNorm {
        groups: usize,
        stats: GroupNormStats<T>,
    },
    Concat {
        sizes: Vec<usize>,
    },
    BroadcastFrames {
        frames: usize,
    },
    Resample {
        table: Rc<ResampleTable>,
    },
    Add,
    Sub,
    Mul,
    Scale(T),
    Sum,
    Mean,
    FrameDiff,
    Opaque(String),
}

impl<T: Real> Op<T> {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv1d { .. } => "conv1d",
            Op::Linear { .. } => "linear",
            Op::Silu => "silu",
            Op::GroupNorm { .. } => "group_norm",
            Op::Concat { .. } => "concat",
            Op::BroadcastFrames { .. } => "broadcast_frames",
            Op::Resample { .. } => "resample",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::FrameDiff => "frame_diff",
            Op::Opaque(name) => name,
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T: Real> {
    op: Op<T>,
    inputs: Vec<usize>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Recorded computation. Each forward evaluation owns its graph.
#[derive(Debug, Clone, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<(Var, usize)>,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(Var, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a leaf. Leaves that received no adjoint
    /// yield zeros.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Gradients for bound parameters, indexed by parameter slot. Slots bound
    /// more than once get the sum over every binding.
    pub fn params(&self, count: usize) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = vec![None; count];
        for &(var, slot) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                match &mut out[slot] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + b;
                        }
                    }
                    e @ None => *e = Some(g.clone()),
                }
            }
        }
        out
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<usize>, value: Tensor<T>) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to parameter slot `slot`; its gradient is reported by
    /// [`Gradients::params`].
    pub fn param(&mut self, slot: usize, value: &Tensor<T>) -> Var {
        let v = self.variable(value.clone());
        self.params.push((v, slot));
        v
    }

    /// Forward-only node computed outside the tape. Backward through it fails
    /// with [`AutogradError::MissingAdjoint`].
    pub fn opaque(&mut self, name: &str, inputs: &[Var], value: Tensor<T>) -> Var {
        self.push(
            Op::Opaque(name.to_string()),
            inputs.iter().map(|v| v.0).collect(),
            value,
        )
    }

    /// 1D convolution. `x` is `[B, C_in, N]` or `[C_in, N]`, `w` is
    /// `[C_out, C_in, K]`, `bias` is `[C_out]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (batch, c_in, n_in, rank2) = match xs.as_slice() {
            [b, c, n] => (*b, *c, *n, false),
            [c, n] => (1, *c, *n, true),
            _ => return Err(ShapeError::Mismatch(format!("conv1d input {xs:?}")).into()),
        };
        let [c_out, wc_in, k] = ws[..] else {
            return Err(ShapeError::Mismatch(format!("conv1d kernel {ws:?}")).into());
        };
        if wc_in != c_in {
            return Err(ShapeError::Mismatch(format!(
                "kernel expects {wc_in} input channels, input has {c_in}"
            ))
            .into());
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(ShapeError::Mismatch(format!(
                    "bias {:?} for {c_out} output channels",
                    self.shape(b)
                ))
                .into());
            }
        }
        let n_out = kernels::conv_out_len(n_in, k, stride, pad).ok_or_else(|| {
            AutogradError::Invalid(format!(
                "conv1d: length {n_in} too short for kernel {k} with pad {pad}"
            ))
        })?;
        let geom = ConvGeom {
            batch,
            c_in,
            c_out,
            n_in,
            n_out,
            k,
            stride,
            pad,
        };
        let out = kernels::conv1d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
        );
        let shape = if rank2 {
            vec![c_out, n_out]
        } else {
            vec![batch, c_out, n_out]
        };
        let mut inputs = vec![x.0, w.0];
        if let Some(b) = bias {
            inputs.push(b.0);
        }
        Ok(self.push(
            Op::Conv1d {
                geom,
                has_bias: bias.is_some(),
            },
            inputs,
            Tensor::from_parts(shape, out),
        ))
    }

    /// Affine map over rows: `x [M, F_in]`, `w [F_out, F_in]`, `bias [F_out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (&[m, f_in], &[f_out, wf_in]) = (&xs[..], &ws[..]) else {
            return Err(ShapeError::Mismatch(format!("linear {xs:?} x {ws:?}")).into());
        };
        if f_in != wf_in {
            return Err(ShapeError::Mismatch(format!("linear {xs:?} x {ws:?}")).into());
        }
        if let Some(b) = bias {
            if self.shape(b) != [f_out] {
                return Err(ShapeError::Mismatch("linear bias".into()).into());
            }
        }
        let out = kernels::linear_forward(
            m,
            f_in,
            f_out,
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
        );
        let mut inputs = vec![x.0, w.0];
        if let Some(b) = bias {
            inputs.push(b.0);
        }
        Ok(self.push(
            Op::Linear {
                m,
                f_in,
                f_out,
                has_bias: bias.is_some(),
            },
            inputs,
            Tensor::from_parts(vec![m, f_out], out),
        ))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * kernels::sigmoid(v));
        self.push(Op::Silu, vec![x.0], out)
    }

    /// Group normalization over channel groups, separately for every frame.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [b, c, n] = xs[..] else {
            return Err(ShapeError::Mismatch(format!("group_norm input {xs:?}")).into());
        };
        if groups == 0 || c % groups != 0 {
            return Err(AutogradError::Invalid(format!(
                "{c} channels do not split into {groups} groups"
            )));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(ShapeError::Mismatch("group_norm affine shape".into()).into());
        }
        let (out, stats) = kernels::group_norm_forward(
            b,
            c,
            n,
            groups,
            T::from_f64(1e-5),
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        Ok(self.push(
            Op::GroupNorm { groups, stats },
            vec![x.0, gamma.0, beta.0],
            Tensor::from_parts(xs, out),
        ))
    }

    /// Concatenates `[B, C_i, N]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .shape(
                *parts
                    .first()
                    .ok_or_else(|| AutogradError::Invalid("concat of zero tensors".into()))?,
            )
            .to_vec();
        let [b, _, n] = first[..] else {
            return Err(ShapeError::Mismatch(format!("concat input {first:?}")).into());
        };
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            match self.shape(p) {
                [pb, pc, pn] if *pb == b && *pn == n => sizes.push(*pc),
                s => {
                    return Err(ShapeError::Mismatch(format!(
                        "concat {s:?} with batch {b} frames {n}"
                    ))
                    .into())
                }
            }
        }
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(b * total * n);
        for bi in 0..b {
            for (&p, &c) in parts.iter().zip(&sizes) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[bi * c * n..(bi + 1) * c * n]);
            }
        }
        Ok(self.push(
            Op::Concat { sizes },
            parts.iter().map(|v| v.0).collect(),
            Tensor::from_parts(vec![b, total, n], out),
        ))
    }

    /// Repeats `[B, E]` along a new trailing frame axis.
    pub fn broadcast_frames(&mut self, x: Var, frames: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [b, e] = xs[..] else {
            return Err(ShapeError::Mismatch(format!("broadcast input {xs:?}")).into());
        };
        let mut out = Vec::with_capacity(b * e * frames);
        for &v in self.value(x).data() {
            out.extend(std::iter::repeat_n(v, frames));
        }
        Ok(self.push(
            Op::BroadcastFrames { frames },
            vec![x.0],
            Tensor::from_parts(vec![b, e, frames], out),
        ))
    }

    /// Applies a frame-axis resampling table to the last axis.
    pub fn resample(&mut self, x: Var, table: Rc<ResampleTable>) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        let last = *shape.last().unwrap();
        if last != table.in_len {
            return Err(ShapeError::Mismatch(format!(
                "resample table expects {} frames, got {last}",
                table.in_len
            ))
            .into());
        }
        let rows = self.value(x).len() / last;
        let out = table.apply(rows, self.value(x).data());
        *shape.last_mut().unwrap() = table.out_len;
        Ok(self.push(
            Op::Resample { table },
            vec![x.0],
            Tensor::from_parts(shape, out),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add, vec![a.0, b.0], out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub, vec![a.0, b.0], out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul, vec![a.0, b.0], out))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).scale(s);
        self.push(Op::Scale(s), vec![x.0], out)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(Op::Mul, vec![x.0, x.0], out)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum, vec![x.0], out)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        self.push(Op::Mean, vec![x.0], out)
    }

    /// `y[.., n] = x[.., n + 1] - x[.., n]` along the last axis.
    pub fn frame_diff(&mut self, x: Var) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        if n < 2 {
            return Err(AutogradError::Invalid(
                "frame_diff needs at least two frames".into(),
            ));
        }
        let data = self.value(x).data();
        let rows = data.len() / n;
        let mut out = Vec::with_capacity(rows * (n - 1));
        for r in 0..rows {
            let row = &data[r * n..(r + 1) * n];
            out.extend(row.windows(2).map(|w| w[1] - w[0]));
        }
        *shape.last_mut().unwrap() = n - 1;
        Ok(self.push(Op::FrameDiff, vec![x.0], Tensor::from_parts(shape, out)))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = &self.nodes[output.0];
        if !out.value.is_scalar() {
            return Err(AutogradError::NonScalarOutput(out.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![T::one()]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(dout) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &dout, &mut grads)?;
            // Leaves keep their adjoints; interior adjoints are only needed once.
        }

        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.inputs.is_empty() && n.requires_grad)
                    .map(|d| Tensor::from_parts(n.value.shape().to_vec(), d))
            })
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node<T>, dout: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let needs = |i: usize| self.nodes[node.inputs[i]].requires_grad;
        let val = |i: usize| self.nodes[node.inputs[i]].value.data();
        macro_rules! slot {
            ($i:expr) => {{
                let id = node.inputs[$i];
                let len = self.nodes[id].value.len();
                grads[id].get_or_insert_with(|| vec![T::zero(); len])
            }};
        }
        macro_rules! take_slot {
            ($i:expr) => {{
                if needs($i) {
                    let id = node.inputs[$i];
                    let len = self.nodes[id].value.len();
                    Some(grads[id].take().unwrap_or_else(|| vec![T::zero(); len]))
                } else {
                    None
                }
            }};
        }
        macro_rules! put_slot {
            ($i:expr, $v:expr) => {{
                if let Some(v) = $v {
                    grads[node.inputs[$i]] = Some(v);
                }
            }};
        }

        match &node.op {
            Op::Leaf => {}
            Op::Opaque(name) => return Err(AutogradError::MissingAdjoint(name.clone())),
            Op::Conv1d { geom, has_bias } => {
                let mut dx = take_slot!(0);
                let mut dw = take_slot!(1);
                let mut db = if *has_bias { take_slot!(2) } else { None };
                kernels::conv1d_backward(
                    geom,
                    val(0),
                    val(1),
                    dout,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                put_slot!(0, dx);
                put_slot!(1, dw);
                if *has_bias {
                    put_slot!(2, db);
                }
            }
            Op::Linear {
                m,
                f_in,
                f_out,
                has_bias,
            } => {
                let mut dx = take_slot!(0);
                let mut dw = take_slot!(1);
                let mut db = if *has_bias { take_slot!(2) } else { None };
                kernels::linear_backward(
                    *m,
                    *f_in,
                    *f_out,
                    val(0),
                    val(1),
                    dout,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                put_slot!(0, dx);
                put_slot!(1, dw);
                if *has_bias {
                    put_slot!(2, db);
                }
            }
            Op::Silu => {
                let x = val(0);
                let g = slot!(0);
                for ((acc, &xv), &d) in g.iter_mut().zip(x).zip(dout) {
                    let s = kernels::sigmoid(xv);
                    *acc = *acc + d * s * (T::one() + xv * (T::one() - s));
                }
            }
            Op::GroupNorm { groups, stats } => {
                let xs = self.nodes[node.inputs[0]].value.shape();
                let (b, c, n) = (xs[0], xs[1], xs[2]);
                let mut dx = take_slot!(0);
                let mut dgamma = take_slot!(1);
                let mut dbeta = take_slot!(2);
                kernels::group_norm_backward(
                    b,
                    c,
                    n,
                    *groups,
                    val(0),
                    val(1),
                    stats,
                    dout,
                    dx.as_deref_mut(),
                    dgamma.as_deref_mut(),
                    dbeta.as_deref_mut(),
                );
                put_slot!(0, dx);
                put_slot!(1, dgamma);
                put_slot!(2, dbeta);
            }
            Op::Concat { sizes } => {
                let shape = node.value.shape();
                let (b, total, n) = (shape[0], shape[1], shape[2]);
                let mut offset = 0;
                for (i, &c) in sizes.iter().enumerate() {
                    if needs(i) {
                        let g = slot!(i);
                        for bi in 0..b {
                            let src =
                                &dout[(bi * total + offset) * n..(bi * total + offset + c) * n];
                            let dst = &mut g[bi * c * n..(bi + 1) * c * n];
                            for (a, &v) in dst.iter_mut().zip(src) {
                                *a = *a + v;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::BroadcastFrames { frames } => {
                let g = slot!(0);
                for (acc, chunk) in g.iter_mut().zip(dout.chunks(*frames)) {
                    *acc = chunk.iter().fold(*acc, |a, &v| a + v);
                }
            }
            Op::Resample { table } => {
                let rows = node.value.len() / table.out_len;
                let g = slot!(0);
                table.apply_adjoint_add(rows, dout, g);
            }
            Op::Add | Op::Sub => {
                let sign = if matches!(node.op, Op::Sub) {
                    -T::one()
                } else {
                    T::one()
                };
                if needs(0) {
                    let g = slot!(0);
                    for (a, &d) in g.iter_mut().zip(dout) {
                        *a = *a + d;
                    }
                }
                if needs(1) {
                    let g = slot!(1);
                    for (a, &d) in g.iter_mut().zip(dout) {
                        *a = *a + sign * d;
                    }
                }
            }
            Op::Mul => {
                let a = val(0).to_vec();
                let b = val(1).to_vec();
                if needs(0) {
                    let g = slot!(0);
                    for ((acc, &d), &bv) in g.iter_mut().zip(dout).zip(&b) {
                        *acc = *acc + d * bv;
                    }
                }
                if needs(1) {
                    let g = slot!(1);
                    for ((acc, &d), &av) in g.iter_mut().zip(dout).zip(&a) {
                        *acc = *acc + d * av;
                    }
                }
            }
            Op::Scale(s) => {
                let g = slot!(0);
                for (a, &d) in g.iter_mut().zip(dout) {
                    *a = *a + d * *s;
                }
            }
            Op::Sum | Op::Mean => {
                let len = self.nodes[node.inputs[0]].value.len();
                let d = if matches!(node.op, Op::Mean) {
                    dout[0] / T::from_f64(len as f64)
                } else {
                    dout[0]
                };
                let g = slot!(0);
                for a in g.iter_mut() {
                    *a = *a + d;
                }
            }
            Op::FrameDiff => {
                let n_out = *node.value.shape().last().unwrap();
                let n = n_out + 1;
                let g = slot!(0);
                for (r, chunk) in dout.chunks(n_out).enumerate() {
                    let row = &mut g[r * n..(r + 1) * n];
                    for (j, &d) in chunk.iter().enumerate() {
                        row[j + 1] = row[j + 1] + d;
                        row[j] = row[j] - d;
                    }
                }
            }
        }
        Ok(())
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &str {
        self.nodes[v.0].op.name()
    }
}
