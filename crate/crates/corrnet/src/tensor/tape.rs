//! Per-forward-pass recording of primitive ops and reverse-mode replay.
//!
//! A [`Tape`] is built fresh for every forward pass, consumed by
//! [`Tape::backward`], and then dropped; parameter state lives in
//! [`Parameters`] across passes. A tape is single-owner and must not be
//! shared between concurrent forward passes.

use std::collections::HashMap;

use super::conv;
use super::params::{ParamId, Parameters};
use super::{numel, Scalar, Tensor};
use crate::{correlation, ctc, Error, Result};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Names of every differentiable primitive the tape can record, used by the
/// gradient-check suite for coverage reporting.
pub const DIFFERENTIABLE_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "sub_const",
    "sigmoid",
    "relu",
    "tanh",
    "exp",
    "scale_by_var",
    "sum_all",
    "spatial_mean",
    "slice_frame",
    "stack_frames",
    "slice_row",
    "stack_rows",
    "slice_range",
    "concat",
    "linear",
    "conv2d_frames",
    "conv3d",
    "conv1x1x1",
    "conv1d",
    "max_pool1d",
    "affinity",
    "aggregate",
    "log_softmax_rows",
    "ctc_loss",
    "fuse_residual",
];

enum Op<S> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    SubConst(Var),
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    ScaleByVar {
        x: Var,
        s: Var,
    },
    SumAll(Var),
    SpatialMean(Var),
    SliceFrame {
        x: Var,
        t: usize,
    },
    StackFrames(Vec<Var>),
    SliceRow {
        x: Var,
        t: usize,
    },
    StackRows(Vec<Var>),
    SliceRange {
        x: Var,
        start: usize,
    },
    Concat(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2dFrames {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Conv3d {
        x: Var,
        w: Var,
        groups: usize,
        dilation: (usize, usize, usize),
        padding: (usize, usize, usize),
    },
    Conv1x1x1 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
    },
    MaxPool1d {
        x: Var,
        argmax: Vec<usize>,
    },
    Affinity {
        xt: Var,
        xu: Var,
        window: Option<usize>,
    },
    Aggregate {
        a: Var,
        xu: Var,
        window: Option<usize>,
    },
    LogSoftmaxRows(Var),
    CtcLoss {
        logp: Var,
        label: Vec<usize>,
        alphas: Vec<S>,
    },
    FuseResidual {
        x: Var,
        tm: Var,
        alpha: Var,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Recording tape for one forward pass.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    bound: HashMap<usize, Var>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Record an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Bind a parameter's current value onto the tape. Repeated calls for the
    /// same id return the same node so gradient contributions accumulate.
    pub fn param(&mut self, params: &Parameters<S>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id.0) {
            return v;
        }
        let v = self.push(params.value(id).clone(), Op::Param(id));
        self.bound.insert(id.0, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, context: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(context, sa, sb));
        }
        Ok(())
    }

    // ── Elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn sub_const(&mut self, a: Var, c: S) -> Var {
        let v = self.value(a).map(|x| x - c);
        self.push(v, Op::SubConst(a))
    }

    /// Logistic squashing, clamped to the open interval (0, 1) at the
    /// representation boundary so saturated inputs never round to 0 or 1.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = S::one();
        let hi = one - S::epsilon() * S::from_f64(0.5);
        let lo = S::min_positive_value();
        let v = self
            .value(a)
            .map(|x| (one / (one + (-x).exp())).min(hi).max(lo));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Op::Exp(a))
    }

    /// Multiply a tensor by a scalar variable (shape `[1]`).
    pub fn scale_by_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("scale_by_var scalar", &[1], self.value(s).shape()));
        }
        let sv = self.value(s).item();
        let v = self.value(x).map(|e| e * sv);
        Ok(self.push(v, Op::ScaleByVar { x, s }))
    }

    // ── Reductions and reshapes ─────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self
            .value(a)
            .data()
            .iter()
            .fold(S::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    /// Global average over the spatial axes: `[T, C, H, W] -> [T, C]`.
    pub fn spatial_mean(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "spatial_mean expects rank-4 input, got {shape:?}"
            )));
        }
        let (t_len, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;
        let inv = S::from_f64(1.0 / hw as f64);
        let x = self.value(a).data();
        let mut out = vec![S::zero(); t_len * c];
        for t in 0..t_len {
            for ch in 0..c {
                let base = (t * c + ch) * hw;
                let mut acc = S::zero();
                for p in 0..hw {
                    acc = acc + x[base + p];
                }
                out[t * c + ch] = acc * inv;
            }
        }
        Ok(self.push(Tensor::new(vec![t_len, c], out)?, Op::SpatialMean(a)))
    }

    /// Extract frame `t`: `[T, C, H, W] -> [C, H, W]`.
    pub fn slice_frame(&mut self, x: Var, t: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 || t >= shape[0] {
            return Err(Error::InvalidArgument(format!(
                "slice_frame {t} out of range for shape {shape:?}"
            )));
        }
        let per = shape[1] * shape[2] * shape[3];
        let data = self.value(x).data()[t * per..(t + 1) * per].to_vec();
        Ok(self.push(
            Tensor::new(vec![shape[1], shape[2], shape[3]], data)?,
            Op::SliceFrame { x, t },
        ))
    }

    /// Stack equally shaped `[C, H, W]` frames into `[T, C, H, W]`.
    pub fn stack_frames(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("stack_frames of zero frames".into()));
        }
        let fshape = self.value(parts[0]).shape().to_vec();
        if fshape.len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "stack_frames expects rank-3 frames, got {fshape:?}"
            )));
        }
        let mut data = Vec::with_capacity(parts.len() * numel(&fshape));
        for &p in parts {
            self.same_shape(parts[0], p, "stack_frames")?;
            data.extend_from_slice(self.value(p).data());
        }
        let shape = vec![parts.len(), fshape[0], fshape[1], fshape[2]];
        Ok(self.push(Tensor::new(shape, data)?, Op::StackFrames(parts.to_vec())))
    }

    /// Extract row `t`: `[T, D] -> [D]`.
    pub fn slice_row(&mut self, x: Var, t: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 2 || t >= shape[0] {
            return Err(Error::InvalidArgument(format!(
                "slice_row {t} out of range for shape {shape:?}"
            )));
        }
        let d = shape[1];
        let data = self.value(x).data()[t * d..(t + 1) * d].to_vec();
        Ok(self.push(Tensor::new(vec![d], data)?, Op::SliceRow { x, t }))
    }

    /// Stack equally sized vectors into `[T, D]`.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("stack_rows of zero rows".into()));
        }
        let d = self.value(parts[0]).numel();
        let mut data = Vec::with_capacity(parts.len() * d);
        for &p in parts {
            self.same_shape(parts[0], p, "stack_rows")?;
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(
            Tensor::new(vec![parts.len(), d], data)?,
            Op::StackRows(parts.to_vec()),
        ))
    }

    /// Contiguous slice of a vector.
    pub fn slice_range(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.value(x).numel();
        if self.value(x).shape().len() != 1 || start + len > n {
            return Err(Error::InvalidArgument(format!(
                "slice_range [{start}, {}) out of range for shape {:?}",
                start + len,
                self.value(x).shape()
            )));
        }
        let data = self.value(x).data()[start..start + len].to_vec();
        Ok(self.push(Tensor::new(vec![len], data)?, Op::SliceRange { x, start }))
    }

    /// Concatenate two vectors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape().len() != 1 || self.value(b).shape().len() != 1 {
            return Err(Error::InvalidArgument("concat expects vectors".into()));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let n = data.len();
        Ok(self.push(Tensor::new(vec![n], data)?, Op::Concat(a, b)))
    }

    // ── Linear algebra ──────────────────────────────────────────────

    /// Affine map over the last axis: `[.., n] x [m, n] (+ [m]) -> [.., m]`.
    /// Input may be a vector `[n]` or a row matrix `[r, n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "linear weights must be rank 2, got {ws:?}"
            )));
        }
        let (rows, n) = match xs.as_slice() {
            [n] => (1, *n),
            [r, n] => (*r, *n),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "linear input must be rank 1 or 2, got {xs:?}"
                )))
            }
        };
        let (m, wn) = (ws[0], ws[1]);
        if wn != n {
            return Err(Error::shape("linear inner extent", &[m, n], &ws));
        }
        if let Some(bv) = b {
            if self.value(bv).shape() != [m] {
                return Err(Error::shape("linear bias", &[m], self.value(bv).shape()));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![S::zero(); rows * m];
        for r in 0..rows {
            for k in 0..m {
                let mut acc = match b {
                    Some(bv) => self.value(bv).data()[k],
                    None => S::zero(),
                };
                let wrow = &wd[k * n..(k + 1) * n];
                let xrow = &xd[r * n..(r + 1) * n];
                for j in 0..n {
                    acc = acc + xrow[j] * wrow[j];
                }
                out[r * m + k] = acc;
            }
        }
        let out_shape = if xs.len() == 1 { vec![m] } else { vec![rows, m] };
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Linear { x, w, b }))
    }

    // ── Convolutions ────────────────────────────────────────────────

    /// Frame-wise 2D convolution with zero padding.
    pub fn conv2d_frames(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "conv2d_frames expects x rank 4 and w rank 4, got {xs:?} and {ws:?}"
            )));
        }
        if ws[1] != xs[1] {
            return Err(Error::shape("conv2d_frames channels", &[ws[0], xs[1], ws[2], ws[3]], &ws));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv stride must be >= 1".into()));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(Error::InvalidArgument(format!(
                "conv2d_frames kernel {}x{} too large for padded input {:?}",
                ws[2], ws[3], xs
            )));
        }
        if let Some(bv) = b {
            if self.value(bv).shape() != [ws[0]] {
                return Err(Error::shape("conv2d bias", &[ws[0]], self.value(bv).shape()));
            }
        }
        let (out, (h2, w2)) = conv::conv2d_frames_forward(
            self.value(x).data(),
            (xs[0], xs[1], xs[2], xs[3]),
            self.value(w).data(),
            (ws[0], ws[2], ws[3]),
            b.map(|bv| self.value(bv).data()),
            stride,
            pad,
        );
        Ok(self.push(
            Tensor::new(vec![xs[0], ws[0], h2, w2], out)?,
            Op::Conv2dFrames { x, w, b, stride, pad },
        ))
    }

    /// Grouped dilated 3D convolution, shape preserving. Kernel extents must
    /// be odd and `padding` must equal `dilation * (kernel - 1) / 2` per axis.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        groups: usize,
        dilation: (usize, usize, usize),
        padding: (usize, usize, usize),
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 5 {
            return Err(Error::InvalidArgument(format!(
                "conv3d expects x rank 4 and w rank 5, got {xs:?} and {ws:?}"
            )));
        }
        let (c_in, c_out) = (xs[1], ws[0]);
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "conv3d groups {groups} must divide both input channels {c_in} and output channels {c_out}"
            )));
        }
        if ws[1] != c_in / groups {
            return Err(Error::shape(
                "conv3d per-group input channels",
                &[c_out, c_in / groups, ws[2], ws[3], ws[4]],
                &ws,
            ));
        }
        let (kt, kh, kw) = (ws[2], ws[3], ws[4]);
        if kt % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv3d kernel extents must be odd, got {kt}x{kh}x{kw}"
            )));
        }
        if dilation.0 == 0 || dilation.1 == 0 || dilation.2 == 0 {
            return Err(Error::InvalidArgument("conv3d dilation must be >= 1".into()));
        }
        let need = (
            dilation.0 * (kt - 1) / 2,
            dilation.1 * (kh - 1) / 2,
            dilation.2 * (kw - 1) / 2,
        );
        if padding != need {
            return Err(Error::InvalidArgument(format!(
                "conv3d padding {padding:?} does not preserve shape; expected {need:?}"
            )));
        }
        let out = conv::conv3d_forward(
            self.value(x).data(),
            (xs[0], xs[1], xs[2], xs[3]),
            self.value(w).data(),
            (c_out, kt, kh, kw),
            groups,
            dilation,
            padding,
        );
        Ok(self.push(
            Tensor::new(vec![xs[0], c_out, xs[2], xs[3]], out)?,
            Op::Conv3d { x, w, groups, dilation, padding },
        ))
    }

    /// Pointwise channel projection: `[T, C, H, W] x [O, C] -> [T, O, H, W]`.
    pub fn conv1x1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "conv1x1x1 expects x rank 4 and w rank 2, got {xs:?} and {ws:?}"
            )));
        }
        if ws[1] != xs[1] {
            return Err(Error::shape("conv1x1x1 channels", &[ws[0], xs[1]], &ws));
        }
        if let Some(bv) = b {
            if self.value(bv).shape() != [ws[0]] {
                return Err(Error::shape("conv1x1x1 bias", &[ws[0]], self.value(bv).shape()));
            }
        }
        let out = conv::conv1x1x1_forward(
            self.value(x).data(),
            (xs[0], xs[1], xs[2], xs[3]),
            self.value(w).data(),
            ws[0],
            b.map(|bv| self.value(bv).data()),
        );
        Ok(self.push(
            Tensor::new(vec![xs[0], ws[0], xs[2], xs[3]], out)?,
            Op::Conv1x1x1 { x, w, b },
        ))
    }

    /// Temporal convolution over `[T, C]`, length preserving.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "conv1d expects x rank 2 and w rank 3, got {xs:?} and {ws:?}"
            )));
        }
        if ws[1] != xs[1] {
            return Err(Error::shape("conv1d channels", &[ws[0], xs[1], ws[2]], &ws));
        }
        if ws[2] % 2 == 0 || pad != (ws[2] - 1) / 2 {
            return Err(Error::InvalidArgument(format!(
                "conv1d kernel {} must be odd with pad {}",
                ws[2],
                (ws[2].max(1) - 1) / 2
            )));
        }
        if let Some(bv) = b {
            if self.value(bv).shape() != [ws[0]] {
                return Err(Error::shape("conv1d bias", &[ws[0]], self.value(bv).shape()));
            }
        }
        let out = conv::conv1d_forward(
            self.value(x).data(),
            (xs[0], xs[1]),
            self.value(w).data(),
            (ws[0], ws[2]),
            b.map(|bv| self.value(bv).data()),
            pad,
        );
        Ok(self.push(
            Tensor::new(vec![xs[0], ws[0]], out)?,
            Op::Conv1d { x, w, b, pad },
        ))
    }

    /// Max pooling over time with stride = kernel; `[T, C] -> [T/k, C]`.
    pub fn max_pool1d(&mut self, x: Var, k: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "max_pool1d expects rank-2 input, got {xs:?}"
            )));
        }
        if k == 0 || xs[0] < k {
            return Err(Error::InvalidArgument(format!(
                "max_pool1d kernel {k} exceeds sequence length {}",
                xs[0]
            )));
        }
        let (out, argmax) = conv::max_pool1d_forward(self.value(x).data(), (xs[0], xs[1]), k);
        Ok(self.push(
            Tensor::new(vec![xs[0] / k, xs[1]], out)?,
            Op::MaxPool1d { x, argmax },
        ))
    }

    // ── Cross-frame correlation ─────────────────────────────────────

    /// Channel-averaged dot-product affinities between two frames.
    /// `window: None` uses every position (`[H, W, H, W]` output); an odd
    /// `window = K` restricts to a `K x K` neighborhood (`[H, W, K, K]`).
    pub fn affinity(&mut self, xt: Var, xu: Var, window: Option<usize>) -> Result<Var> {
        self.same_shape(xt, xu, "affinity frames")?;
        let xs = self.value(xt).shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "affinity expects rank-3 frames, got {xs:?}"
            )));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        correlation::validate_window(window, h, w)?;
        let (out, shape) = correlation::affinity_forward(
            self.value(xt).data(),
            self.value(xu).data(),
            (c, h, w),
            window,
        );
        Ok(self.push(Tensor::new(shape, out)?, Op::Affinity { xt, xu, window }))
    }

    /// Affinity-weighted sum of adjacent-frame features over the neighborhood.
    pub fn aggregate(&mut self, a: Var, xu: Var, window: Option<usize>) -> Result<Var> {
        let as_ = self.value(a).shape().to_vec();
        let xs = self.value(xu).shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "aggregate expects rank-3 features, got {xs:?}"
            )));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        correlation::validate_window(window, h, w)?;
        let expect = match window {
            None => vec![h, w, h, w],
            Some(k) => vec![h, w, k, k],
        };
        if as_ != expect {
            return Err(Error::shape("aggregate affinity extents", &expect, &as_));
        }
        let out = correlation::aggregate_forward(
            self.value(a).data(),
            self.value(xu).data(),
            (c, h, w),
            window,
        );
        Ok(self.push(
            Tensor::new(vec![c, h, w], out)?,
            Op::Aggregate { a, xu, window },
        ))
    }

    // ── Sequence heads ──────────────────────────────────────────────

    /// Row-wise log-softmax over `[T, V]`.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "log_softmax_rows expects rank-2 input, got {xs:?}"
            )));
        }
        let (t_len, v) = (xs[0], xs[1]);
        let xd = self.value(x).data();
        let mut out = vec![S::zero(); t_len * v];
        for t in 0..t_len {
            let row = &xd[t * v..(t + 1) * v];
            let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
            let mut lse = S::zero();
            for &e in row {
                lse = lse + (e - m).exp();
            }
            let lse = m + lse.ln();
            for (j, &e) in row.iter().enumerate() {
                out[t * v + j] = e - lse;
            }
        }
        Ok(self.push(Tensor::new(xs, out)?, Op::LogSoftmaxRows(x)))
    }

    /// CTC negative log-likelihood of `label` given per-step log-probabilities
    /// `[T, V+1]` with blank at index 0. Gradients flow by replaying the
    /// dynamic program's adjoint.
    pub fn ctc_loss(&mut self, logp: Var, label: &[usize]) -> Result<Var> {
        let xs = self.value(logp).shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "ctc_loss expects rank-2 log-probabilities, got {xs:?}"
            )));
        }
        let (loss, alphas) =
            ctc::forward_alphas(self.value(logp).data(), (xs[0], xs[1]), label)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CtcLoss {
                logp,
                label: label.to_vec(),
                alphas,
            },
        ))
    }

    /// Gated residual fusion `x + alpha * tm` with a scalar variable `alpha`.
    /// At `alpha == 0` the output is exactly `x`, bit for bit.
    pub fn fuse_residual(&mut self, x: Var, tm: Var, alpha: Var) -> Result<Var> {
        self.same_shape(x, tm, "fuse_residual")?;
        if self.value(alpha).numel() != 1 {
            return Err(Error::shape("fuse_residual alpha", &[1], self.value(alpha).shape()));
        }
        let av = self.value(alpha).item();
        let value = if av == S::zero() {
            self.value(x).clone()
        } else {
            let data = zip_map(self.value(x).data(), self.value(tm).data(), |a, b| a + av * b);
            Tensor::new(self.value(x).shape().to_vec(), data)?
        };
        Ok(self.push(value, Op::FuseResidual { x, tm, alpha }))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Replay adjoints in reverse, accumulating gradients of `loss` into the
    /// learnable entries of `params`. Consumes the tape.
    pub fn backward(self, loss: Var, params: &mut Parameters<S>) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(pid) => params.accumulate_grad(*pid, &g),
                Op::Add(a, b) => {
                    add_into(&mut grads, *a, self.numel_of(*a), |d| axpy(d, &g, S::one()));
                    add_into(&mut grads, *b, self.numel_of(*b), |d| axpy(d, &g, S::one()));
                }
                Op::Sub(a, b) => {
                    add_into(&mut grads, *a, self.numel_of(*a), |d| axpy(d, &g, S::one()));
                    add_into(&mut grads, *b, self.numel_of(*b), |d| axpy(d, &g, -S::one()));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.data_of(*a), self.data_of(*b));
                    add_into(&mut grads, *a, av.len(), |d| {
                        for j in 0..d.len() {
                            d[j] = d[j] + g[j] * bv[j];
                        }
                    });
                    add_into(&mut grads, *b, bv.len(), |d| {
                        for j in 0..d.len() {
                            d[j] = d[j] + g[j] * av[j];
                        }
                    });
                }
                Op::Scale(a, c) => {
                    add_into(&mut grads, *a, self.numel_of(*a), |d| axpy(d, &g, *c));
                }
                Op::SubConst(a) => {
                    add_into(&mut grads, *a, self.numel_of(*a), |d| axpy(d, &g, S::one()));
                }
                Op::Sigmoid(a) => {
                    let out = node.value.data();
                    add_into(&mut grads, *a, out.len(), |d| {
                        for j in 0..d.len() {
                            d[j] = d[j] + g[j] * out[j] * (S::one() - out[j]);
                        }
                    });
                }
                Op::Relu(a) => {
                    let xin = self.data_of(*a);
                    add_into(&mut grads, *a, xin.len(), |d| {
                        for j in 0..d.len() {
                            if xin[j] > S::zero() {
                                d[j] = d[j] + g[j];
                            }
                        }
                    });
                }
                Op::Tanh(a) => {
                    let out = node.value.data();
                    add_into(&mut grads, *a, out.len(), |d| {
                        for j in 0..d.len() {
                            d[j] = d[j] + g[j] * (S::one() - out[j] * out[j]);
                        }
                    });
                }
                Op::Exp(a) => {
                    let out = node.value.data();
                    add_into(&mut grads, *a, out.len(), |d| {
                        for j in 0..d.len() {
                            d[j] = d[j] + g[j] * out[j];
                        }
                    });
                }
                Op::ScaleByVar { x, s } => {
                    let sv = self.data_of(*s)[0];
                    let xv = self.data_of(*x);
                    add_into(&mut grads, *x, xv.len(), |d| axpy(d, &g, sv));
                    let mut dot = S::zero();
                    for j in 0..xv.len() {
                        dot = dot + g[j] * xv[j];
                    }
                    add_into(&mut grads, *s, 1, |d| d[0] = d[0] + dot);
                }
                Op::SumAll(a) => {
                    let g0 = g[0];
                    add_into(&mut grads, *a, self.numel_of(*a), |d| {
                        for e in d.iter_mut() {
                            *e = *e + g0;
                        }
                    });
                }
                Op::SpatialMean(a) => {
                    let shape = self.shape_of(*a);
                    let (t_len, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    let hw = h * w;
                    let inv = S::from_f64(1.0 / hw as f64);
                    add_into(&mut grads, *a, t_len * c * hw, |d| {
                        for t in 0..t_len {
                            for ch in 0..c {
                                let gv = g[t * c + ch] * inv;
                                let base = (t * c + ch) * hw;
                                for p in 0..hw {
                                    d[base + p] = d[base + p] + gv;
                                }
                            }
                        }
                    });
                }
                Op::SliceFrame { x, t } => {
                    let per = g.len();
                    add_into(&mut grads, *x, self.numel_of(*x), |d| {
                        for j in 0..per {
                            d[t * per + j] = d[t * per + j] + g[j];
                        }
                    });
                }
                Op::StackFrames(parts) => {
                    let per = self.numel_of(parts[0]);
                    for (k, &p) in parts.iter().enumerate() {
                        add_into(&mut grads, p, per, |d| {
                            for j in 0..per {
                                d[j] = d[j] + g[k * per + j];
                            }
                        });
                    }
                }
                Op::SliceRow { x, t } => {
                    let d_len = g.len();
                    add_into(&mut grads, *x, self.numel_of(*x), |d| {
                        for j in 0..d_len {
                            d[t * d_len + j] = d[t * d_len + j] + g[j];
                        }
                    });
                }
                Op::StackRows(parts) => {
                    let per = self.numel_of(parts[0]);
                    for (k, &p) in parts.iter().enumerate() {
                        add_into(&mut grads, p, per, |d| {
                            for j in 0..per {
                                d[j] = d[j] + g[k * per + j];
                            }
                        });
                    }
                }
                Op::SliceRange { x, start } => {
                    let len = g.len();
                    add_into(&mut grads, *x, self.numel_of(*x), |d| {
                        for j in 0..len {
                            d[start + j] = d[start + j] + g[j];
                        }
                    });
                }
                Op::Concat(a, b) => {
                    let na = self.numel_of(*a);
                    let nb = self.numel_of(*b);
                    add_into(&mut grads, *a, na, |d| axpy(d, &g[..na], S::one()));
                    add_into(&mut grads, *b, nb, |d| axpy(d, &g[na..], S::one()));
                }
                Op::Linear { x, w, b } => {
                    let xs = self.shape_of(*x);
                    let (rows, nfeat) = match xs {
                        [n] => (1usize, *n),
                        [r, n] => (*r, *n),
                        _ => unreachable!("validated at record time"),
                    };
                    let m = self.shape_of(*w)[0];
                    let xd = self.data_of(*x);
                    let wd = self.data_of(*w);
                    add_into(&mut grads, *x, rows * nfeat, |d| {
                        for r in 0..rows {
                            for k in 0..m {
                                let gv = g[r * m + k];
                                if gv == S::zero() {
                                    continue;
                                }
                                for j in 0..nfeat {
                                    d[r * nfeat + j] = d[r * nfeat + j] + gv * wd[k * nfeat + j];
                                }
                            }
                        }
                    });
                    add_into(&mut grads, *w, m * nfeat, |d| {
                        for r in 0..rows {
                            for k in 0..m {
                                let gv = g[r * m + k];
                                if gv == S::zero() {
                                    continue;
                                }
                                for j in 0..nfeat {
                                    d[k * nfeat + j] = d[k * nfeat + j] + gv * xd[r * nfeat + j];
                                }
                            }
                        }
                    });
                    if let Some(bv) = b {
                        add_into(&mut grads, *bv, m, |d| {
                            for r in 0..rows {
                                for k in 0..m {
                                    d[k] = d[k] + g[r * m + k];
                                }
                            }
                        });
                    }
                }
                Op::Conv2dFrames { x, w, b, stride, pad } => {
                    let xs = self.shape_of(*x).to_vec();
                    let ws = self.shape_of(*w).to_vec();
                    let os = node.value.shape();
                    let mut dx = vec![S::zero(); self.numel_of(*x)];
                    let mut dw = vec![S::zero(); self.numel_of(*w)];
                    let mut db = b.map(|bv| vec![S::zero(); self.numel_of(bv)]);
                    conv::conv2d_frames_backward(
                        &g,
                        self.data_of(*x),
                        (xs[0], xs[1], xs[2], xs[3]),
                        self.data_of(*w),
                        (ws[0], ws[2], ws[3]),
                        *stride,
                        *pad,
                        (os[2], os[3]),
                        &mut dx,
                        &mut dw,
                        db.as_deref_mut(),
                    );
                    add_into(&mut grads, *x, dx.len(), |d| axpy(d, &dx, S::one()));
                    add_into(&mut grads, *w, dw.len(), |d| axpy(d, &dw, S::one()));
                    if let (Some(bv), Some(dbv)) = (b, db) {
                        add_into(&mut grads, *bv, dbv.len(), |d| axpy(d, &dbv, S::one()));
                    }
                }
                Op::Conv3d { x, w, groups, dilation, padding } => {
                    let xs = self.shape_of(*x).to_vec();
                    let ws = self.shape_of(*w).to_vec();
                    let mut dx = vec![S::zero(); self.numel_of(*x)];
                    let mut dw = vec![S::zero(); self.numel_of(*w)];
                    conv::conv3d_backward(
                        &g,
                        self.data_of(*x),
                        (xs[0], xs[1], xs[2], xs[3]),
                        self.data_of(*w),
                        (ws[0], ws[2], ws[3], ws[4]),
                        *groups,
                        *dilation,
                        *padding,
                        &mut dx,
                        &mut dw,
                    );
                    add_into(&mut grads, *x, dx.len(), |d| axpy(d, &dx, S::one()));
                    add_into(&mut grads, *w, dw.len(), |d| axpy(d, &dw, S::one()));
                }
                Op::Conv1x1x1 { x, w, b } => {
                    let xs = self.shape_of(*x).to_vec();
                    let ws = self.shape_of(*w).to_vec();
                    let mut dx = vec![S::zero(); self.numel_of(*x)];
                    let mut dw = vec![S::zero(); self.numel_of(*w)];
                    let mut db = b.map(|bv| vec![S::zero(); self.numel_of(bv)]);
                    conv::conv1x1x1_backward(
                        &g,
                        self.data_of(*x),
                        (xs[0], xs[1], xs[2], xs[3]),
                        self.data_of(*w),
                        ws[0],
                        &mut dx,
                        &mut dw,
                        db.as_deref_mut(),
                    );
                    add_into(&mut grads, *x, dx.len(), |d| axpy(d, &dx, S::one()));
                    add_into(&mut grads, *w, dw.len(), |d| axpy(d, &dw, S::one()));
                    if let (Some(bv), Some(dbv)) = (b, db) {
                        add_into(&mut grads, *bv, dbv.len(), |d| axpy(d, &dbv, S::one()));
                    }
                }
                Op::Conv1d { x, w, b, pad } => {
                    let xs = self.shape_of(*x).to_vec();
                    let ws = self.shape_of(*w).to_vec();
                    let mut dx = vec![S::zero(); self.numel_of(*x)];
                    let mut dw = vec![S::zero(); self.numel_of(*w)];
                    let mut db = b.map(|bv| vec![S::zero(); self.numel_of(bv)]);
                    conv::conv1d_backward(
                        &g,
                        self.data_of(*x),
                        (xs[0], xs[1]),
                        self.data_of(*w),
                        (ws[0], ws[2]),
                        *pad,
                        &mut dx,
                        &mut dw,
                        db.as_deref_mut(),
                    );
                    add_into(&mut grads, *x, dx.len(), |d| axpy(d, &dx, S::one()));
                    add_into(&mut grads, *w, dw.len(), |d| axpy(d, &dw, S::one()));
                    if let (Some(bv), Some(dbv)) = (b, db) {
                        add_into(&mut grads, *bv, dbv.len(), |d| axpy(d, &dbv, S::one()));
                    }
                }
                Op::MaxPool1d { x, argmax } => {
                    add_into(&mut grads, *x, self.numel_of(*x), |d| {
                        for (j, &src) in argmax.iter().enumerate() {
                            d[src] = d[src] + g[j];
                        }
                    });
                }
                Op::Affinity { xt, xu, window } => {
                    let xs = self.shape_of(*xt).to_vec();
                    let dims = (xs[0], xs[1], xs[2]);
                    let mut dxt = vec![S::zero(); self.numel_of(*xt)];
                    let mut dxu = vec![S::zero(); self.numel_of(*xu)];
                    correlation::affinity_backward(
                        &g,
                        self.data_of(*xt),
                        self.data_of(*xu),
                        dims,
                        *window,
                        &mut dxt,
                        &mut dxu,
                    );
                    add_into(&mut grads, *xt, dxt.len(), |d| axpy(d, &dxt, S::one()));
                    add_into(&mut grads, *xu, dxu.len(), |d| axpy(d, &dxu, S::one()));
                }
                Op::Aggregate { a, xu, window } => {
                    let xs = self.shape_of(*xu).to_vec();
                    let dims = (xs[0], xs[1], xs[2]);
                    let mut da = vec![S::zero(); self.numel_of(*a)];
                    let mut dxu = vec![S::zero(); self.numel_of(*xu)];
                    correlation::aggregate_backward(
                        &g,
                        self.data_of(*a),
                        self.data_of(*xu),
                        dims,
                        *window,
                        &mut da,
                        &mut dxu,
                    );
                    add_into(&mut grads, *a, da.len(), |d| axpy(d, &da, S::one()));
                    add_into(&mut grads, *xu, dxu.len(), |d| axpy(d, &dxu, S::one()));
                }
                Op::LogSoftmaxRows(x) => {
                    let out = node.value.data();
                    let xs = self.shape_of(*x);
                    let (t_len, v) = (xs[0], xs[1]);
                    add_into(&mut grads, *x, t_len * v, |d| {
                        for t in 0..t_len {
                            let mut gsum = S::zero();
                            for j in 0..v {
                                gsum = gsum + g[t * v + j];
                            }
                            for j in 0..v {
                                let p = out[t * v + j].exp();
                                d[t * v + j] = d[t * v + j] + g[t * v + j] - p * gsum;
                            }
                        }
                    });
                }
                Op::CtcLoss { logp, label, alphas } => {
                    let xs = self.shape_of(*logp);
                    let dlogp = ctc::backward_from_alphas(
                        g[0],
                        self.data_of(*logp),
                        (xs[0], xs[1]),
                        label,
                        alphas,
                    );
                    add_into(&mut grads, *logp, dlogp.len(), |d| axpy(d, &dlogp, S::one()));
                }
                Op::FuseResidual { x, tm, alpha } => {
                    let av = self.data_of(*alpha)[0];
                    let tmv = self.data_of(*tm);
                    add_into(&mut grads, *x, self.numel_of(*x), |d| axpy(d, &g, S::one()));
                    add_into(&mut grads, *tm, tmv.len(), |d| axpy(d, &g, av));
                    let mut dot = S::zero();
                    for j in 0..tmv.len() {
                        dot = dot + g[j] * tmv[j];
                    }
                    add_into(&mut grads, *alpha, 1, |d| d[0] = d[0] + dot);
                }
            }
        }
        Ok(())
    }

    fn numel_of(&self, v: Var) -> usize {
        self.nodes[v.0].value.numel()
    }

    fn shape_of(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data_of(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }
}

fn zip_map<S: Scalar>(a: &[S], b: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn axpy<S: Scalar>(dst: &mut [S], src: &[S], c: S) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + c * s;
    }
}

fn add_into<S: Scalar>(
    grads: &mut [Option<Vec<S>>],
    v: Var,
    n: usize,
    f: impl FnOnce(&mut [S]),
) {
    let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); n]);
    f(slot);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params_with<S: Scalar>(entries: &[(&str, Tensor<S>)]) -> (Parameters<S>, Vec<ParamId>) {
        let mut ps = Parameters::new();
        let ids = entries
            .iter()
            .map(|(n, t)| ps.register(n, t.clone(), true).unwrap())
            .collect();
        (ps, ids)
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).item(), 0.5);
        let gated = tape.sub_const(s, 0.5);
        assert_eq!(tape.value(gated).item(), 0.0);
    }

    #[test]
    fn elementwise_product_matches_definition() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![3], vec![4.0, 5.0, 6.0]).unwrap());
        let m = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(m).data(), &[4.0, 10.0, 18.0]);
    }

    #[test]
    fn elementwise_shape_mismatch_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let err = tape.add(a, b).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }), "{err}");
    }

    #[test]
    fn sum_gradient_is_ones() {
        let (mut ps, ids) =
            params_with(&[("p", Tensor::<f64>::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap())]);
        let mut tape = Tape::new();
        let p = tape.param(&ps, ids[0]);
        let loss = tape.sum_all(p);
        tape.backward(loss, &mut ps).unwrap();
        assert_eq!(ps.grad(ids[0]).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient_is_two_p() {
        let (mut ps, ids) =
            params_with(&[("p", Tensor::<f64>::new(vec![2], vec![1.0, 2.0]).unwrap())]);
        let mut tape = Tape::new();
        let p = tape.param(&ps, ids[0]);
        let sq = tape.mul(p, p).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss, &mut ps).unwrap();
        assert_eq!(ps.grad(ids[0]).data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let (mut ps, ids) = params_with(&[("p", Tensor::<f64>::zeros(&[2]))]);
        let mut tape = Tape::new();
        let p = tape.param(&ps, ids[0]);
        assert!(tape.backward(p, &mut ps).is_err());
    }

    #[test]
    fn param_binding_is_memoized() {
        let (ps, ids) = params_with(&[("p", Tensor::<f64>::zeros(&[2]))]);
        let mut tape = Tape::new();
        let a = tape.param(&ps, ids[0]);
        let b = tape.param(&ps, ids[0]);
        assert_eq!(a, b);
        assert_eq!(tape.len(), 1);
    }

    #[test]
    fn identity_conv3d_reproduces_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(
            Tensor::new(vec![2, 1, 3, 3], (0..18).map(|i| i as f64 * 0.3 - 2.0).collect())
                .unwrap(),
        );
        // 1 at the kernel center, zero elsewhere.
        let mut wdata = vec![0.0; 27];
        wdata[13] = 1.0;
        let w = tape.constant(Tensor::new(vec![1, 1, 3, 3, 3], wdata).unwrap());
        let y = tape.conv3d(x, w, 1, (1, 1, 1), (1, 1, 1)).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn zero_conv3d_weights_give_zero_output() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::filled(&[2, 2, 3, 3], 1.5));
        let w = tape.constant(Tensor::zeros(&[2, 2, 1, 1, 1]));
        let y = tape.conv3d(x, w, 1, (1, 1, 1), (0, 0, 0)).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv3d_rejects_even_kernel_and_bad_groups() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 4, 3, 3]));
        let w_even = tape.constant(Tensor::zeros(&[4, 4, 2, 1, 1]));
        assert!(tape.conv3d(x, w_even, 1, (1, 1, 1), (0, 0, 0)).is_err());
        let w = tape.constant(Tensor::zeros(&[4, 2, 1, 1, 1]));
        assert!(tape.conv3d(x, w, 3, (1, 1, 1), (0, 0, 0)).is_err());
    }

    #[test]
    fn conv3d_matches_six_loop_oracle() {
        // Direct nested-loop convolution, written independently of the kernel
        // in conv.rs, over a 2x1x4x4 input with a random-ish 3x3x3 kernel.
        let t_len = 2;
        let (h, w) = (4, 4);
        let x: Vec<f64> = (0..t_len * h * w).map(|i| ((i * 7 + 3) % 11) as f64 * 0.25 - 1.0).collect();
        let k: Vec<f64> = (0..27).map(|i| ((i * 5 + 1) % 13) as f64 * 0.1 - 0.6).collect();

        let mut expected = vec![0.0f64; t_len * h * w];
        for t in 0..t_len as isize {
            for oh in 0..h as isize {
                for ow in 0..w as isize {
                    let mut acc = 0.0;
                    for qt in -1..=1isize {
                        for qh in -1..=1isize {
                            for qw in -1..=1isize {
                                let (it, ih, iw) = (t + qt, oh + qh, ow + qw);
                                if it < 0 || it >= t_len as isize || ih < 0 || ih >= h as isize
                                    || iw < 0 || iw >= w as isize
                                {
                                    continue;
                                }
                                let xi = (it as usize * h + ih as usize) * w + iw as usize;
                                let wi = ((qt + 1) as usize * 3 + (qh + 1) as usize) * 3
                                    + (qw + 1) as usize;
                                acc += x[xi] * k[wi];
                            }
                        }
                    }
                    expected[(t as usize * h + oh as usize) * w + ow as usize] = acc;
                }
            }
        }

        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(Tensor::new(vec![t_len, 1, h, w], x).unwrap());
        let wv = tape.constant(Tensor::new(vec![1, 1, 3, 3, 3], k).unwrap());
        let y = tape.conv3d(xv, wv, 1, (1, 1, 1), (1, 1, 1)).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn conv1x1x1_identity_and_mean() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(
            Tensor::new(vec![1, 3, 2, 2], (0..12).map(|i| i as f64).collect()).unwrap(),
        );
        let eye = tape.constant(
            Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
        );
        let y = tape.conv1x1x1(x, eye, None).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());

        let third = tape.constant(Tensor::filled(&[1, 3], 1.0 / 3.0));
        let m = tape.conv1x1x1(x, third, None).unwrap();
        // Per-position channel mean of (p, p+4, p+8) = p + 4.
        for (p, &v) in tape.value(m).data().iter().enumerate() {
            assert!((v - (p as f64 + 4.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn conv1x1x1_matches_matrix_oracle() {
        // 3 -> 2 projection on a 1x3x2x2 input against a plain matrix product
        // per spatial position.
        let x: Vec<f64> = vec![0.5, -1.0, 2.0, 0.25, 1.5, 0.75, -0.5, 1.0, -2.0, 0.1, 0.2, 0.3];
        let w: Vec<f64> = vec![0.3, -0.2, 0.5, 1.0, 0.4, -0.6];
        let mut expected = vec![0.0f64; 8];
        for o in 0..2 {
            for p in 0..4 {
                let mut acc = 0.0;
                for c in 0..3 {
                    acc += w[o * 3 + c] * x[c * 4 + p];
                }
                expected[o * 4 + p] = acc;
            }
        }
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(Tensor::new(vec![1, 3, 2, 2], x).unwrap());
        let wv = tape.constant(Tensor::new(vec![2, 3], w).unwrap());
        let y = tape.conv1x1x1(xv, wv, None).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn conv1x1x1_extent_mismatch_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let w = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(tape.conv1x1x1(x, w, None).is_err());
    }

    #[test]
    fn max_pool_takes_window_maxima() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![4, 1], vec![1.0, 3.0, 2.0, 8.0]).unwrap());
        let y = tape.max_pool1d(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 8.0]);
    }

    #[test]
    fn conv1d_identity_kernel_preserves_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![4, 1], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let mut k = vec![0.0; 5];
        k[2] = 1.0;
        let w = tape.constant(Tensor::new(vec![1, 1, 5], k).unwrap());
        let y = tape.conv1d(x, w, None, 2).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv1d_matches_sliding_window_oracle() {
        let xs: Vec<f64> = vec![0.2, -0.4, 1.0, 0.6, -1.2, 0.8];
        let ks: Vec<f64> = vec![0.5, -0.25, 1.5, 0.75, -1.0];
        let mut expected = vec![0.0f64; 6];
        for t in 0..6isize {
            let mut acc = 0.0;
            for (dk, &kv) in ks.iter().enumerate() {
                let it = t + dk as isize - 2;
                if (0..6).contains(&it) {
                    acc += xs[it as usize] * kv;
                }
            }
            expected[t as usize] = acc;
        }
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![6, 1], xs).unwrap());
        let w = tape.constant(Tensor::new(vec![1, 1, 5], ks).unwrap());
        let y = tape.conv1d(x, w, None, 2).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_residual_zero_alpha_is_bitwise_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2, 2], vec![1.0, -0.0, 3.5, f64::MIN_POSITIVE]).unwrap());
        let tm = tape.constant(Tensor::new(vec![2, 2], vec![9.0, 9.0, 9.0, 9.0]).unwrap());
        let alpha = tape.constant(Tensor::scalar(0.0));
        let y = tape.fuse_residual(x, tm, alpha).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(tape.value(x).data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn conv3d_is_linear_in_input() {
        // conv(a*x + b*y) == a*conv(x) + b*conv(y) to near machine precision.
        let (a, b) = (1.7, -0.35);
        let xd: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let yd: Vec<f64> = (0..32).map(|i| (i as f64 * 0.21).cos()).collect();
        let kd: Vec<f64> = (0..27).map(|i| (i as f64 * 0.11).sin() * 0.5).collect();

        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2, 1, 4, 4], xd.clone()).unwrap());
        let y = tape.constant(Tensor::new(vec![2, 1, 4, 4], yd.clone()).unwrap());
        let w = tape.constant(Tensor::new(vec![1, 1, 3, 3, 3], kd).unwrap());
        let xa = tape.scale(x, a);
        let yb = tape.scale(y, b);
        let mix = tape.add(xa, yb).unwrap();
        let conv_mix = tape.conv3d(mix, w, 1, (1, 1, 1), (1, 1, 1)).unwrap();
        let cx = tape.conv3d(x, w, 1, (1, 1, 1), (1, 1, 1)).unwrap();
        let cy = tape.conv3d(y, w, 1, (1, 1, 1), (1, 1, 1)).unwrap();
        let cxa = tape.scale(cx, a);
        let cyb = tape.scale(cy, b);
        let lin = tape.add(cxa, cyb).unwrap();
        for (u, v) in tape.value(conv_mix).data().iter().zip(tape.value(lin).data()) {
            assert!((u - v).abs() < 1e-10, "{u} vs {v}");
        }
    }
}
