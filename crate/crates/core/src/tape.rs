//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every primitive pushes one node holding its forward value and whatever it
//! needs for the backward rule. Nodes only reference earlier nodes, so the
//! tape is already in topological order and [`Tape::backward`] is a single
//! reverse sweep.
//!
//! Reductions accumulate in index order, so a forward/backward pass is
//! bit-reproducible for fixed inputs and dropout masks.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::math;
use crate::ssm::{phi, phi_prime_series, PHI_SERIES_RADIUS};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Padding, stride and grouping for [`Tape::conv1d_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dOptions {
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub groups: usize,
}

impl Conv1dOptions {
    pub fn symmetric(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            pad_left: padding,
            pad_right: padding,
            groups: 1,
        }
    }

    /// Depthwise causal convolution: output `t` sees inputs `t-k+1..=t`.
    pub fn causal_depthwise(kernel: usize, channels: usize) -> Self {
        Self {
            stride: 1,
            pad_left: kernel - 1,
            pad_right: 0,
            groups: channels,
        }
    }
}

/// Output length of a 1-D convolution or pooling window; `pad` is the total
/// padding added over both ends.
pub fn conv_output_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + pad;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Sigmoid(Var),
    Relu(Var),
    Silu(Var),
    Softplus(Var),
    MatMul(Var, Var),
    AddBias { x: Var, bias: Var },
    ScaleRows { x: Var, w: Var },
    ScaleCols { x: Var, w: Var },
    Reshape(Var),
    Transpose(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ReverseTime(Var),
    Sum(Var),
    Reduce { x: Var, axis: usize, scale: f64 },
    /// `cols` holds the unfolded input of every group, `[cin/g·k × L']`.
    Conv1d { x: Var, w: Var, bias: Option<Var>, opts: Conv1dOptions, cols: Vec<f64> },
    MaxPool1d { x: Var, argmax: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    SelectiveScan(ScanNode),
}

struct ScanNode {
    u: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    d: Var,
    /// Hidden states after each step, indexed `(e * len + t) * n + s`.
    states: Vec<f64>,
    /// `exp(Δa)` and `φ(Δa)` at the same indices.
    a_bar: Vec<f64>,
    phi: Vec<f64>,
}

impl Op {
    fn inputs(&self, out: &mut Vec<Var>) {
        out.clear();
        match self {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => {
                out.push(*a);
                out.push(*b);
            }
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Exp(x)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::Silu(x)
            | Op::Softplus(x)
            | Op::Reshape(x)
            | Op::Transpose(x)
            | Op::ReverseTime(x)
            | Op::Sum(x) => out.push(*x),
            Op::AddBias { x, bias: w } | Op::ScaleRows { x, w } | Op::ScaleCols { x, w } => {
                out.push(*x);
                out.push(*w);
            }
            Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Reduce { x, .. }
            | Op::MaxPool1d { x, .. }
            | Op::Dropout { x, .. } => out.push(*x),
            Op::Conv1d { x, w, bias, .. } => {
                out.push(*x);
                out.push(*w);
                if let Some(b) = bias {
                    out.push(*b);
                }
            }
            Op::SoftmaxXent { logits, .. } => out.push(*logits),
            Op::SelectiveScan(s) => out.extend_from_slice(&[s.u, s.delta, s.a, s.b, s.c, s.d]),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of primitive applications for one forward pass.
///
/// A tape is single-threaded; build one per sample or per batch. `train`
/// switches dropout on.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    train: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn rank2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(crate::dim_err!(
            "{} must be rank 2, got shape {:?}",
            what,
            t.shape()
        )),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(crate::dim_err!(
            "{}: left operand {:?} vs right operand {:?}",
            op,
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

impl Tape {
    /// Tape in evaluation mode (dropout is the identity).
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            train: false,
        }
    }

    /// Tape in training mode.
    pub fn training() -> Self {
        Self {
            train: true,
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn set_training(&mut self, train: bool) {
        self.train = train;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`backward`](Self::backward) loss with respect
    /// to `v`. `None` if `v` does not require gradients or was unreachable.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let mut ins = Vec::new();
        op.inputs(&mut ins);
        let needs_grad = ins.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_with(value, op, needs_grad)
    }

    fn push_with(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_with(t, Op::Leaf, false)
    }

    /// Leaf that receives gradients. The tensor's data is copied.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.set_requires_grad(false);
        self.push_with(value, Op::Leaf, true)
    }

    /// Leaf whose gradient tracking follows `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        if t.requires_grad() {
            self.param(t)
        } else {
            let mut value = t.clone();
            value.set_requires_grad(false);
            self.constant(value)
        }
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape(), data).expect("same shape");
        self.push(value, op)
    }

    fn zip_binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(ta, tb, name)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map_unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.map_unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map_unary(x, math::exp, Op::Exp(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, math::sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v * math::sigmoid(v), Op::Silu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map_unary(x, math::softplus, Op::Softplus(x))
    }

    /// `[m×k] · [k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = rank2(ta, "matmul lhs")?;
        let (k2, n) = rank2(tb, "matmul rhs")?;
        if k != k2 {
            return Err(crate::dim_err!(
                "matmul: lhs axis 1 has {} but rhs axis 0 has {}",
                k,
                k2
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Adds `bias[r]` to every element of row `r` of `x[R×L]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let (r, l) = rank2(tx, "add_bias input")?;
        if tb.shape() != [r] {
            return Err(crate::dim_err!(
                "add_bias: bias shape {:?} does not match input axis 0 ({})",
                tb.shape(),
                r
            ));
        }
        let mut out = tx.data().to_vec();
        for (row, &b) in out.chunks_mut(l.max(1)).zip(tb.data()) {
            row.iter_mut().for_each(|v| *v += b);
        }
        let value = Tensor::new(&[r, l], out)?;
        Ok(self.push(value, Op::AddBias { x, bias }))
    }

    /// Multiplies row `r` of `x[R×L]` by `w[r]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (r, l) = rank2(tx, "scale_rows input")?;
        if tw.shape() != [r] {
            return Err(crate::dim_err!(
                "scale_rows: weight shape {:?} does not match input axis 0 ({})",
                tw.shape(),
                r
            ));
        }
        let mut out = tx.data().to_vec();
        for (row, &s) in out.chunks_mut(l.max(1)).zip(tw.data()) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let value = Tensor::new(&[r, l], out)?;
        Ok(self.push(value, Op::ScaleRows { x, w }))
    }

    /// Multiplies column `t` of `x[R×L]` by `w[t]`.
    pub fn scale_cols(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (r, l) = rank2(tx, "scale_cols input")?;
        if tw.shape() != [l] {
            return Err(crate::dim_err!(
                "scale_cols: weight shape {:?} does not match input axis 1 ({})",
                tw.shape(),
                l
            ));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(l.max(1)).take(r) {
            row.iter_mut().zip(tw.data()).for_each(|(v, s)| *v *= s);
        }
        let value = Tensor::new(&[r, l], out)?;
        Ok(self.push(value, Op::ScaleCols { x, w }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (r, c) = rank2(tx, "transpose input")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = tx.data()[i * c + j];
            }
        }
        let value = Tensor::new(&[c, r], out)?;
        Ok(self.push(value, Op::Transpose(x)))
    }

    /// Rows `start..start+count` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (r, l) = rank2(tx, "slice_rows input")?;
        if start + count > r {
            return Err(crate::dim_err!(
                "slice_rows: rows {}..{} exceed axis 0 of size {}",
                start,
                start + count,
                r
            ));
        }
        let value = Tensor::new(&[count, l], tx.data()[start * l..(start + count) * l].to_vec())?;
        Ok(self.push(value, Op::SliceRows { x, start }))
    }

    /// Columns `start..start+count` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (r, l) = rank2(tx, "slice_cols input")?;
        if start + count > l {
            return Err(crate::dim_err!(
                "slice_cols: columns {}..{} exceed axis 1 of size {}",
                start,
                start + count,
                l
            ));
        }
        let mut out = Vec::with_capacity(r * count);
        for i in 0..r {
            out.extend_from_slice(&tx.data()[i * l + start..i * l + start + count]);
        }
        let value = Tensor::new(&[r, count], out)?;
        Ok(self.push(value, Op::SliceCols { x, start }))
    }

    /// Reverses the last (time) axis of a rank-1 or rank-2 tensor.
    pub fn reverse_time(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let l = match tx.shape() {
            [l] | [_, l] => *l,
            s => {
                return Err(crate::dim_err!(
                    "reverse_time expects rank 1 or 2, got {:?}",
                    s
                ))
            }
        };
        let mut out = tx.data().to_vec();
        if l > 0 {
            out.chunks_mut(l).for_each(|row| row.reverse());
        }
        let value = Tensor::new(tx.shape(), out)?;
        Ok(self.push(value, Op::ReverseTime(x)))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let shape = tx.shape();
        if axis >= shape.len() {
            return Err(crate::dim_err!(
                "reduction axis {} out of range for shape {:?}",
                axis,
                shape
            ));
        }
        let n = shape[axis];
        if mean && n == 0 {
            return Err(Error::Domain(alloc::format!(
                "mean over empty axis {} of shape {:?}",
                axis,
                shape
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let scale = if mean { 1.0 / n as f64 } else { 1.0 };
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &tx.data()[(o * n + i) * inner..(o * n + i + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, b)| *a += b);
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::Reduce { x, axis, scale }))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    /// Cross-correlation of `x[C_in×L]` with `w[C_out×C_in×k]` (no kernel
    /// flip), optional bias `[C_out]`, symmetric zero padding.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.conv1d_with(x, w, bias, Conv1dOptions::symmetric(stride, padding))
    }

    /// Grouped convolution with asymmetric padding. Weight shape is
    /// `[C_out × C_in/groups × k]`.
    pub fn conv1d_with(&mut self, x: Var, w: Var, bias: Option<Var>, opts: Conv1dOptions) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let tw = &self.nodes[w.0].value;
        let (cin, len) = rank2(tx, "conv1d input")?;
        let (cout, cin_g, k) = match *tw.shape() {
            [a, b, c] => (a, b, c),
            _ => {
                return Err(crate::dim_err!(
                    "conv1d weight must be [C_out, C_in/groups, k], got {:?}",
                    tw.shape()
                ))
            }
        };
        let g = opts.groups;
        if g == 0 || cin % g != 0 || cout % g != 0 || cin / g != cin_g {
            return Err(crate::dim_err!(
                "conv1d: input channels (axis 0 = {}) / groups ({}) must equal weight axis 1 ({}) and divide output channels (weight axis 0 = {})",
                cin,
                g,
                cin_g,
                cout
            ));
        }
        if opts.stride == 0 {
            return Err(Error::Contract("conv1d stride must be >= 1".into()));
        }
        let lout = conv_output_len(len, k, opts.stride, opts.pad_left + opts.pad_right).ok_or_else(|| {
            crate::dim_err!(
                "conv1d: kernel length (weight axis 2 = {}) exceeds padded input length (axis 1 = {} + padding {})",
                k,
                len,
                opts.pad_left + opts.pad_right
            )
        })?;
        let mut out = vec![0.0; cout * lout];
        if let Some(b) = bias {
            let tb = &self.nodes[b.0].value;
            if tb.shape() != [cout] {
                return Err(crate::dim_err!(
                    "conv1d: bias shape {:?} does not match weight axis 0 ({})",
                    tb.shape(),
                    cout
                ));
            }
            for (row, &bv) in out.chunks_mut(lout).zip(tb.data()) {
                row.iter_mut().for_each(|v| *v = bv);
            }
        }
        let cout_g = cout / g;
        let rows = cin_g * k;
        let mut cols = vec![0.0; g * rows * lout];
        for grp in 0..g {
            let col = &mut cols[grp * rows * lout..(grp + 1) * rows * lout];
            im2col(tx.data(), grp * cin_g, cin_g, len, k, lout, opts, col);
            matmul_acc(
                &tw.data()[grp * cout_g * rows..(grp + 1) * cout_g * rows],
                col,
                &mut out[grp * cout_g * lout..(grp + 1) * cout_g * lout],
                cout_g,
                rows,
                lout,
            );
        }
        let value = Tensor::new(&[cout, lout], out)?;
        Ok(self.push(value, Op::Conv1d { x, w, bias, opts, cols }))
    }

    /// Max pooling along time of `x[C×L]`; ties go to the earliest index.
    pub fn max_pool1d(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (c, l) = rank2(tx, "max_pool1d input")?;
        let lout = conv_output_len(l, size, stride, 0).ok_or_else(|| {
            crate::dim_err!(
                "max_pool1d: window {} stride {} invalid for axis 1 of size {}",
                size,
                stride,
                l
            )
        })?;
        let mut out = vec![0.0; c * lout];
        let mut argmax = vec![0usize; c * lout];
        for ch in 0..c {
            let row = tx.row(ch);
            for t in 0..lout {
                let start = t * stride;
                let mut best = start;
                for i in start + 1..start + size {
                    if row[i] > row[best] {
                        best = i;
                    }
                }
                out[ch * lout + t] = row[best];
                argmax[ch * lout + t] = ch * l + best;
            }
        }
        let value = Tensor::new(&[c, lout], out)?;
        Ok(self.push(value, Op::MaxPool1d { x, argmax }))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`. Identity in
    /// evaluation mode.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut dyn RngCore) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(alloc::format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let tx = &self.nodes[x.0].value;
        let mask: Vec<f64> = (0..tx.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(tx.shape(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    ///
    /// `logits` is `[B×K]`, or `[K]` for a single example.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = &self.nodes[logits.0].value;
        let (b, k) = match *tl.shape() {
            [k] => (1, k),
            [b, k] => (b, k),
            _ => {
                return Err(crate::dim_err!(
                    "logits must be [B, K] or [K], got {:?}",
                    tl.shape()
                ))
            }
        };
        if labels.len() != b {
            return Err(crate::dim_err!(
                "{} labels for logits batch axis of size {}",
                labels.len(),
                b
            ));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Index {
                what: "class label",
                index: y,
                bound: k,
            });
        }
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &tl.data()[i * k..(i + 1) * k];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = math::exp(v - mx);
                z += *p;
            }
            probs[i * k..(i + 1) * k].iter_mut().for_each(|p| *p /= z);
            loss += math::ln(z) + mx - row[y];
        }
        let value = Tensor::scalar(loss / b as f64);
        Ok(self.push(
            value,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Zero-order-hold selective scan over `E` channels and `N` states.
    ///
    /// Shapes: `u[E×L]` input, `delta[E×L]` step sizes (> 0), `a[E×N]`
    /// diagonal state matrix (≤ 0), `b[N×L]` and `c[N×L]` input-dependent
    /// input/output maps, `d[E]` feedthrough. Per channel `e` and state `s`:
    ///
    /// ```text
    /// h[t] = exp(Δ·a)·h[t-1] + Δ·φ(Δ·a)·b[s,t]·u[t]
    /// y[t] = Σ_s c[s,t]·h[t] + d·u[t]
    /// ```
    ///
    /// with `φ(z) = (e^z − 1)/z`, starting from `h = 0`. Returns `y[E×L]`.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        let tu = &self.nodes[u.0].value;
        let (e_dim, len) = rank2(tu, "scan input u")?;
        let (ae, n) = rank2(&self.nodes[a.0].value, "scan state matrix a")?;
        let checks: [(&str, Var, &[usize]); 4] = [
            ("delta", delta, &[e_dim, len]),
            ("b", b, &[n, len]),
            ("c", c, &[n, len]),
            ("d", d, &[e_dim]),
        ];
        if ae != e_dim {
            return Err(crate::dim_err!(
                "scan: a axis 0 ({}) must match u axis 0 ({})",
                ae,
                e_dim
            ));
        }
        for (name, v, want) in checks {
            let got = self.nodes[v.0].value.shape();
            if got != want {
                return Err(crate::dim_err!(
                    "scan: {} has shape {:?}, expected {:?}",
                    name,
                    got,
                    want
                ));
            }
        }
        let (ud, dd, ad, bd, cd, fd) = (
            tu.data(),
            self.nodes[delta.0].value.data(),
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            self.nodes[c.0].value.data(),
            self.nodes[d.0].value.data(),
        );
        let mut states = vec![0.0; e_dim * len * n];
        let mut a_bars = vec![0.0; e_dim * len * n];
        let mut phis = vec![0.0; e_dim * len * n];
        let mut y = vec![0.0; e_dim * len];
        let mut h = vec![0.0; n];
        for e in 0..e_dim {
            h.iter_mut().for_each(|v| *v = 0.0);
            let arow = &ad[e * n..(e + 1) * n];
            for t in 0..len {
                let dt = dd[e * len + t];
                let x = ud[e * len + t];
                let mut acc = 0.0;
                let base = (e * len + t) * n;
                for s in 0..n {
                    let (a_bar, ph) = discretize(dt * arow[s]);
                    let b_bar = dt * ph * bd[s * len + t];
                    h[s] = a_bar * h[s] + b_bar * x;
                    acc += cd[s * len + t] * h[s];
                    a_bars[base + s] = a_bar;
                    phis[base + s] = ph;
                }
                y[e * len + t] = acc + fd[e] * x;
                states[base..base + n].copy_from_slice(&h);
            }
        }
        let value = Tensor::new(&[e_dim, len], y)?;
        Ok(self.push(
            value,
            Op::SelectiveScan(ScanNode {
                u,
                delta,
                a,
                b,
                c,
                d,
                states,
                a_bar: a_bars,
                phi: phis,
            }),
        ))
    }

    /// Computes `∂loss/∂v` for every node that depends on a gradient leaf.
    ///
    /// Gradients from earlier calls are discarded, so the tape can be
    /// differentiated again (for example with respect to a different loss).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].needs_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, d)| *o -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((o, d), w) in ga.iter_mut().zip(g).zip(vb) {
                        *o += d * w;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, d), w) in gb.iter_mut().zip(g).zip(va) {
                        *o += d * w;
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |gx| {
                gx.iter_mut().zip(g).for_each(|(o, d)| *o += d * s)
            }),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Exp(x) => acc(*x, &mut |gx| {
                for ((o, d), yv) in gx.iter_mut().zip(g).zip(y) {
                    *o += d * yv;
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for ((o, d), yv) in gx.iter_mut().zip(g).zip(y) {
                    *o += d * yv * (1.0 - yv);
                }
            }),
            Op::Relu(x) => {
                let vx = val(*x);
                acc(*x, &mut |gx| {
                    for ((o, d), xv) in gx.iter_mut().zip(g).zip(vx) {
                        if *xv > 0.0 {
                            *o += d;
                        }
                    }
                })
            }
            Op::Silu(x) => {
                let vx = val(*x);
                acc(*x, &mut |gx| {
                    for ((o, d), &xv) in gx.iter_mut().zip(g).zip(vx) {
                        let s = math::sigmoid(xv);
                        *o += d * s * (1.0 + xv * (1.0 - s));
                    }
                })
            }
            Op::Softplus(x) => {
                let vx = val(*x);
                acc(*x, &mut |gx| {
                    for ((o, d), &xv) in gx.iter_mut().zip(g).zip(vx) {
                        *o += d * math::sigmoid(xv);
                    }
                })
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                acc(*a, &mut |ga| {
                    // ga[i,p] += Σ_j g[i,j]·b[p,j]
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] += dot(grow, &tb.data()[p * n..(p + 1) * n]);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    // gb[p,j] += Σ_i a[i,p]·g[i,j]
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            axpy(av, grow, &mut gb[p * n..(p + 1) * n]);
                        }
                    }
                });
            }
            Op::AddBias { x, bias } => {
                let l = node.value.shape()[1];
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*bias, &mut |gb| {
                    for (o, row) in gb.iter_mut().zip(g.chunks(l.max(1))) {
                        *o += row.iter().sum::<f64>();
                    }
                });
            }
            Op::ScaleRows { x, w } => {
                let l = node.value.shape()[1];
                let (vx, vw) = (val(*x), val(*w));
                acc(*x, &mut |gx| {
                    for r in 0..vw.len() {
                        let s = vw[r];
                        for t in 0..l {
                            gx[r * l + t] += g[r * l + t] * s;
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for (r, o) in gw.iter_mut().enumerate() {
                        *o += dot(&g[r * l..(r + 1) * l], &vx[r * l..(r + 1) * l]);
                    }
                });
            }
            Op::ScaleCols { x, w } => {
                let l = node.value.shape()[1];
                let rows = node.value.shape()[0];
                let (vx, vw) = (val(*x), val(*w));
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        for t in 0..l {
                            gx[r * l + t] += g[r * l + t] * vw[t];
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for r in 0..rows {
                        for t in 0..l {
                            gw[t] += g[r * l + t] * vx[r * l + t];
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                // output is [r×c], input was [c×r]
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let l = node.value.shape()[1];
                acc(*x, &mut |gx| add_into(&mut gx[start * l..start * l + g.len()], g));
            }
            Op::SliceCols { x, start } => {
                let (r, cnt) = (node.value.shape()[0], node.value.shape()[1]);
                let l = self.nodes[x.0].value.shape()[1];
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        add_into(
                            &mut gx[i * l + start..i * l + start + cnt],
                            &g[i * cnt..(i + 1) * cnt],
                        );
                    }
                });
            }
            Op::ReverseTime(x) => {
                let l = *node.value.shape().last().unwrap_or(&0);
                acc(*x, &mut |gx| {
                    if l == 0 {
                        return;
                    }
                    for (orow, grow) in gx.chunks_mut(l).zip(g.chunks(l)) {
                        for (o, d) in orow.iter_mut().zip(grow.iter().rev()) {
                            *o += d;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::Reduce { x, axis, scale } => {
                let shape = self.nodes[x.0].value.shape();
                let n = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for i in 0..n {
                            let dst = &mut gx[(o * n + i) * inner..(o * n + i + 1) * inner];
                            for (a, b) in dst.iter_mut().zip(src) {
                                *a += b * scale;
                            }
                        }
                    }
                });
            }
            Op::Conv1d { x, w, bias, opts, cols } => {
                let tx = &self.nodes[x.0].value;
                let tw = &self.nodes[w.0].value;
                let len = tx.shape()[1];
                let (cout, cin_g, k) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
                let lout = node.value.shape()[1];
                let groups = opts.groups;
                let cout_g = cout / groups;
                let rows = cin_g * k;
                acc(*x, &mut |gx| {
                    let mut gcol = vec![0.0; rows * lout];
                    for grp in 0..groups {
                        gcol.iter_mut().for_each(|v| *v = 0.0);
                        for co in grp * cout_g..(grp + 1) * cout_g {
                            let grow = &g[co * lout..(co + 1) * lout];
                            let wrow = &tw.data()[co * rows..(co + 1) * rows];
                            for (r, &wv) in wrow.iter().enumerate() {
                                axpy(wv, grow, &mut gcol[r * lout..(r + 1) * lout]);
                            }
                        }
                        col2im(&gcol, grp * cin_g, cin_g, len, k, lout, *opts, gx);
                    }
                });
                acc(*w, &mut |gw| {
                    for co in 0..cout {
                        let grp = co / cout_g;
                        let grow = &g[co * lout..(co + 1) * lout];
                        let col = &cols[grp * rows * lout..(grp + 1) * rows * lout];
                        for r in 0..rows {
                            gw[co * rows + r] += dot(grow, &col[r * lout..(r + 1) * lout]);
                        }
                    }
                });
                if let Some(b) = bias {
                    acc(*b, &mut |gb| {
                        for (o, row) in gb.iter_mut().zip(g.chunks(lout.max(1))) {
                            *o += row.iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::MaxPool1d { x, argmax } => acc(*x, &mut |gx| {
                for (d, &src) in g.iter().zip(argmax) {
                    gx[src] += d;
                }
            }),
            Op::Dropout { x, mask } => acc(*x, &mut |gx| {
                for ((o, d), m) in gx.iter_mut().zip(g).zip(mask) {
                    *o += d * m;
                }
            }),
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let k = probs.len() / b;
                let s = g[0] / b as f64;
                acc(*logits, &mut |gl| {
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            gl[i * k + j] += s * (probs[i * k + j] - onehot);
                        }
                    }
                });
            }
            Op::SelectiveScan(sn) => self.scan_backward(sn, g, grads),
        }
    }

    fn scan_backward(&self, sn: &ScanNode, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let tu = &self.nodes[sn.u.0].value;
        let (e_dim, len) = (tu.shape()[0], tu.shape()[1]);
        let n = self.nodes[sn.a.0].value.shape()[1];
        let ud = tu.data();
        let dd = self.nodes[sn.delta.0].value.data();
        let ad = self.nodes[sn.a.0].value.data();
        let bd = self.nodes[sn.b.0].value.data();
        let cd = self.nodes[sn.c.0].value.data();
        let fd = self.nodes[sn.d.0].value.data();

        let mut gu = vec![0.0; e_dim * len];
        let mut gdelta = vec![0.0; e_dim * len];
        let mut ga = vec![0.0; e_dim * n];
        let mut gb = vec![0.0; n * len];
        let mut gc = vec![0.0; n * len];
        let mut gd = vec![0.0; e_dim];
        let mut gh = vec![0.0; n];
        for e in 0..e_dim {
            gh.iter_mut().for_each(|v| *v = 0.0);
            let arow = &ad[e * n..(e + 1) * n];
            for t in (0..len).rev() {
                let idx = e * len + t;
                let gyt = gy[idx];
                let x = ud[idx];
                let dt = dd[idx];
                gd[e] += gyt * x;
                gu[idx] += gyt * fd[e];
                let h_t = &sn.states[idx * n..(idx + 1) * n];
                for s in 0..n {
                    let h_prev = if t > 0 { sn.states[(idx - 1) * n + s] } else { 0.0 };
                    gc[s * len + t] += gyt * h_t[s];
                    gh[s] += gyt * cd[s * len + t];
                    let av = arow[s];
                    let z = dt * av;
                    let a_bar = sn.a_bar[idx * n + s];
                    let ph = sn.phi[idx * n + s];
                    let bv = bd[s * len + t];
                    let b_bar = dt * ph * bv;
                    let g_abar = gh[s] * h_prev;
                    let g_bbar = gh[s] * x;
                    gu[idx] += gh[s] * b_bar;
                    gb[s * len + t] += g_bbar * dt * ph;
                    let dph = phi_prime_from(z, a_bar, ph);
                    gdelta[idx] += g_abar * av * a_bar + g_bbar * bv * (ph + z * dph);
                    ga[e * n + s] += g_abar * dt * a_bar + g_bbar * bv * dt * dt * dph;
                    gh[s] *= a_bar;
                }
            }
        }
        for (v, buf) in [
            (sn.u, gu),
            (sn.delta, gdelta),
            (sn.a, ga),
            (sn.b, gb),
            (sn.c, gc),
            (sn.d, gd),
        ] {
            if self.nodes[v.0].needs_grad {
                match grads[v.0].as_mut() {
                    Some(existing) => add_into(existing, &buf),
                    None => grads[v.0] = Some(buf),
                }
            }
        }
    }
}

/// `(exp(z), φ(z))` from a single `expm1`.
#[inline]
fn discretize(z: f64) -> (f64, f64) {
    if z.abs() < PHI_SERIES_RADIUS {
        (math::exp(z), phi(z))
    } else {
        let em1 = math::expm1(z);
        (em1 + 1.0, em1 / z)
    }
}

/// `φ'(z)` reusing `exp(z)` and `φ(z)`: `(e^z − φ(z))/z` away from zero.
#[inline]
fn phi_prime_from(z: f64, exp_z: f64, phi_z: f64) -> f64 {
    if z.abs() < 0.5 {
        phi_prime_series(z)
    } else {
        (exp_z - phi_z) / z
    }
}

/// Output indices `t` in `[t0, t1)` for which tap `j` reads inside the
/// unpadded input.
#[inline]
fn valid_range(j: usize, pad_left: usize, stride: usize, len: usize, lout: usize) -> (usize, usize) {
    let t0 = if pad_left > j {
        (pad_left - j).div_ceil(stride)
    } else {
        0
    };
    // t*stride + j - pad_left <= len - 1
    let t1 = if len + pad_left > j {
        ((len - 1 + pad_left - j) / stride + 1).min(lout)
    } else {
        0
    };
    (t0.min(t1), t1)
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yv, xv)| *yv += alpha * xv);
}

/// Dot product with four interleaved partial sums, combined in a fixed
/// order.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let mut acc = [0.0; 4];
    let chunks = n / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut tail = 0.0;
    for i in 4 * chunks..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Unfolds channels `c0..c0+cin` of `x[C×len]` into `col[(cin·k)×lout]`
/// with `col[(ci·k + j)·lout + t] = x[c0+ci, t·stride + j − pad_left]`
/// (zero outside the input).
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c0: usize, cin: usize, len: usize, k: usize, lout: usize, opts: Conv1dOptions, col: &mut [f64]) {
    for ci in 0..cin {
        let xrow = &x[(c0 + ci) * len..(c0 + ci + 1) * len];
        for j in 0..k {
            let dst = &mut col[(ci * k + j) * lout..(ci * k + j + 1) * lout];
            let (t0, t1) = valid_range(j, opts.pad_left, opts.stride, len, lout);
            for t in t0..t1 {
                dst[t] = xrow[t * opts.stride + j - opts.pad_left];
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `gcol` back onto `gx` rows `c0..c0+cin`.
#[allow(clippy::too_many_arguments)]
fn col2im(gcol: &[f64], c0: usize, cin: usize, len: usize, k: usize, lout: usize, opts: Conv1dOptions, gx: &mut [f64]) {
    for ci in 0..cin {
        let gxrow = &mut gx[(c0 + ci) * len..(c0 + ci + 1) * len];
        for j in 0..k {
            let src = &gcol[(ci * k + j) * lout..(ci * k + j + 1) * lout];
            let (t0, t1) = valid_range(j, opts.pad_left, opts.stride, len, lout);
            for t in t0..t1 {
                gxrow[t * opts.stride + j - opts.pad_left] += src[t];
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`.
fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], crow);
        }
    }
}
