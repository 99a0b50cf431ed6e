//! Reverse-mode compute graph.
//!
//! A [`Graph`] is an append-only tape: every operation validates shapes,
//! evaluates eagerly, and records enough to replay adjoints. [`Graph::backward`]
//! walks the tape once in reverse id order, so gradient accumulation has a
//! fixed order and replaying it twice is bitwise identical.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    InstanceNorm { x: Var, inv_std: T },
    InstanceNorm2d { x: Var, gain: Var, offset: Var },
    LayerNormRows { x: Var, gain: Var, offset: Var },
    Conv2d { x: Var, w: Var, bias: Option<Var>, pad: usize, stride: usize },
    DwConvPatch { x: Var, w: Var, p: usize },
    MaxPool2(Var),
    AvgPool { x: Var, p: usize },
    UpsampleNearest { x: Var, f: usize },
    GlobalAvgPool(Var),
    Concat { parts: Vec<Var>, axis: usize },
    AddVec { m: Var, v: Var, axis: usize },
    AddChannelBias { x: Var, b: Var },
    ScaleChannels { x: Var, s: Var },
    SumAll(Var),
    MeanAll(Var),
    Reshape(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Gelu(_) => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::InstanceNorm2d { .. } => "instance_norm_2d",
            Op::LayerNormRows { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::DwConvPatch { .. } => "dwconv_patch",
            Op::MaxPool2(_) => "max_pool2",
            Op::AvgPool { .. } => "avg_pool",
            Op::UpsampleNearest { .. } => "upsample_nearest",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Concat { .. } => "concat",
            Op::AddVec { .. } => "add_vec",
            Op::AddChannelBias { .. } => "add_channel_bias",
            Op::ScaleChannels { .. } => "scale_channels",
            Op::SumAll(_) => "sum_all",
            Op::MeanAll(_) => "mean_all",
            Op::Reshape(_) => "reshape",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients for every node that required them, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor shaped like the node, zeros when the node never
    /// received an adjoint.
    pub fn tensor(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    eps: T,
    check_finite: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            eps: T::from_f64(crate::NORM_EPS),
            check_finite: false,
        }
    }

    /// Verify every node output is finite as it is produced. Cheap insurance
    /// used by gradient-check mode; training checks the loss instead.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
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

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: &[usize], data: Vec<T>, op: Op<T>, requires: bool) -> Result<Var> {
        let value = Tensor::new(shape, data)?;
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite {
                context: op.name().to_string(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dim_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dim {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    // ── core algebra ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.dim_err("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let req = self.needs(a) || self.needs(b);
        self.push(&[m, n], data, Op::Matmul(a, b), req)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(self.dim_err("transpose", x, x));
        }
        let (r, c) = (s[0], s[1]);
        let data = kernels::transpose(self.value(x).data(), r, c);
        let req = self.needs(x);
        self.push(&[c, r], data, Op::Transpose(x), req)
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dim_err(op_name, a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let req = self.needs(a) || self.needs(b);
        self.push(&shape, data, op, req)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        let req = self.needs(x);
        self.push(&shape, data, Op::AddScalar(x), req)
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let req = self.needs(x);
        self.push(&shape, data, Op::MulScalar(x, c), req)
    }

    // ── activations ────────────────────────────────────────────────────

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        let req = self.needs(x);
        self.push(&shape, data, Op::Relu(x), req)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let req = self.needs(x);
        self.push(&shape, data, Op::Sigmoid(x), req)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let req = self.needs(x);
        self.push(&shape, data, Op::Gelu(x), req)
    }

    // ── normalization / softmax ────────────────────────────────────────

    /// Softmax over 2-D lanes; `axis` is the dimension that sums to one.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (rows, cols) = self.expect_2d("softmax", x, axis)?;
        let xv = self.value(x).data();
        let mut data = vec![T::zero(); xv.len()];
        if axis == 1 {
            for r in 0..rows {
                kernels::softmax_lane(&xv[r * cols..(r + 1) * cols], &mut data[r * cols..(r + 1) * cols]);
            }
        } else {
            let mut lane = vec![T::zero(); rows];
            let mut out = vec![T::zero(); rows];
            for c in 0..cols {
                for r in 0..rows {
                    lane[r] = xv[r * cols + c];
                }
                kernels::softmax_lane(&lane, &mut out);
                for r in 0..rows {
                    data[r * cols + c] = out[r];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let req = self.needs(x);
        self.push(&shape, data, Op::Softmax { x, axis }, req)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (rows, cols) = self.expect_2d("log_softmax", x, axis)?;
        let xv = self.value(x).data();
        let mut data = vec![T::zero(); xv.len()];
        let lane_ls = |lane: &[T], out: &mut [T]| {
            let max = lane.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = lane.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for (o, &v) in out.iter_mut().zip(lane) {
                *o = v - lse;
            }
        };
        if axis == 1 {
            for r in 0..rows {
                let (src, dst) = (&xv[r * cols..(r + 1) * cols], &mut data[r * cols..(r + 1) * cols]);
                lane_ls(src, dst);
            }
        } else {
            let mut lane = vec![T::zero(); rows];
            let mut out = vec![T::zero(); rows];
            for c in 0..cols {
                for r in 0..rows {
                    lane[r] = xv[r * cols + c];
                }
                lane_ls(&lane, &mut out);
                for r in 0..rows {
                    data[r * cols + c] = out[r];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let req = self.needs(x);
        self.push(&shape, data, Op::LogSoftmax { x, axis }, req)
    }

    fn expect_2d(&self, op: &'static str, x: Var, axis: usize) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 2 || axis > 1 {
            return Err(Error::Dim {
                op,
                lhs: s.to_vec(),
                rhs: vec![axis],
            });
        }
        Ok((s[0], s[1]))
    }

    /// Whole-map whitening of a 2-D tensor (one instance): zero mean, unit
    /// variance over all r·c entries.
    pub fn instance_norm(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s.iter().product::<usize>() < 2 {
            return Err(Error::Dim {
                op: "instance_norm",
                lhs: s.to_vec(),
                rhs: vec![2],
            });
        }
        let xv = self.value(x).data();
        let mut data = vec![T::zero(); xv.len()];
        let inv_std = kernels::whiten(xv, self.eps, &mut data);
        let shape = s.to_vec();
        let req = self.needs(x);
        self.push(&shape, data, Op::InstanceNorm { x, inv_std }, req)
    }

    /// Per-channel whitening of a C×H×W map with per-channel affine.
    pub fn instance_norm_2d(&mut self, x: Var, gain: Var, offset: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || self.shape(gain) != [s[0]] || self.shape(offset) != [s[0]] {
            return Err(self.dim_err("instance_norm_2d", x, gain));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let xv = self.value(x).data();
        let gv = self.value(gain).data().to_vec();
        let ov = self.value(offset).data().to_vec();
        let mut data = vec![T::zero(); xv.len()];
        for ch in 0..c {
            let lane = &xv[ch * hw..(ch + 1) * hw];
            let out = &mut data[ch * hw..(ch + 1) * hw];
            kernels::whiten(lane, self.eps, out);
            for v in out.iter_mut() {
                *v = gv[ch] * *v + ov[ch];
            }
        }
        let req = self.needs(x) || self.needs(gain) || self.needs(offset);
        self.push(&s, data, Op::InstanceNorm2d { x, gain, offset }, req)
    }

    /// Per-row whitening of an r×c matrix with per-column affine (token-major
    /// layer norm over the channel axis).
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, offset: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || self.shape(gain) != [s[1]] || self.shape(offset) != [s[1]] {
            return Err(self.dim_err("layer_norm", x, gain));
        }
        let (rows, cols) = (s[0], s[1]);
        let xv = self.value(x).data();
        let gv = self.value(gain).data().to_vec();
        let ov = self.value(offset).data().to_vec();
        let mut data = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let lane = &xv[r * cols..(r + 1) * cols];
            let out = &mut data[r * cols..(r + 1) * cols];
            kernels::whiten(lane, self.eps, out);
            for (j, v) in out.iter_mut().enumerate() {
                *v = gv[j] * *v + ov[j];
            }
        }
        let req = self.needs(x) || self.needs(gain) || self.needs(offset);
        self.push(&s, data, Op::LayerNormRows { x, gain, offset }, req)
    }

    // ── spatial ops ────────────────────────────────────────────────────

    /// Cross-correlation of a C×H×W input with C_out×C_in×k×k weights.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, pad: usize, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sx[0] != sw[1] {
            return Err(self.dim_err("conv2d", x, w));
        }
        let (ci, h, wd) = (sx[0], sx[1], sx[2]);
        let (co, kh, kw) = (sw[0], sw[2], sw[3]);
        let oh = kernels::conv_out_dim(h, kh, pad, stride);
        let ow = kernels::conv_out_dim(wd, kw, pad, stride);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(self.dim_err("conv2d", x, w)),
        };
        if let Some(b) = bias {
            if self.shape(b) != [co] {
                return Err(self.dim_err("conv2d_bias", w, b));
            }
        }
        let bias_data = bias.map(|b| self.value(b).data().to_vec());
        let data = kernels::conv2d_fwd(
            self.value(x).data(),
            self.value(w).data(),
            bias_data.as_deref(),
            ci,
            h,
            wd,
            co,
            kh,
            kw,
            pad,
            stride,
            oh,
            ow,
        );
        let req = self.needs(x) || self.needs(w) || bias.map(|b| self.needs(b)).unwrap_or(false);
        self.push(&[co, oh, ow], data, Op::Conv2d { x, w, bias, pad, stride }, req)
    }

    /// Depthwise p×p convolution with stride p (learned patch embedding).
    pub fn dwconv_patch(&mut self, x: Var, w: Var, p: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw != [sx[0], p, p] || sx[1] % p != 0 || sx[2] % p != 0 {
            return Err(self.dim_err("dwconv_patch", x, w));
        }
        let data = kernels::dwconv_fwd(self.value(x).data(), self.value(w).data(), sx[0], sx[1], sx[2], p);
        let req = self.needs(x) || self.needs(w);
        self.push(&[sx[0], sx[1] / p, sx[2] / p], data, Op::DwConvPatch { x, w, p }, req)
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(self.dim_err("max_pool2", x, x));
        }
        let data = kernels::maxpool2_fwd(self.value(x).data(), s[0], s[1], s[2]);
        let req = self.needs(x);
        self.push(&[s[0], s[1] / 2, s[2] / 2], data, Op::MaxPool2(x), req)
    }

    pub fn avg_pool(&mut self, x: Var, p: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || p == 0 || s[1] % p != 0 || s[2] % p != 0 {
            return Err(self.dim_err("avg_pool", x, x));
        }
        let data = kernels::avgpool_fwd(self.value(x).data(), s[0], s[1], s[2], p);
        let req = self.needs(x);
        self.push(&[s[0], s[1] / p, s[2] / p], data, Op::AvgPool { x, p }, req)
    }

    /// Each source pixel becomes an f×f block.
    pub fn upsample_nearest(&mut self, x: Var, f: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || f == 0 {
            return Err(self.dim_err("upsample_nearest", x, x));
        }
        let data = kernels::upsample_nearest_fwd(self.value(x).data(), s[0], s[1], s[2], f);
        let req = self.needs(x);
        self.push(&[s[0], s[1] * f, s[2] * f], data, Op::UpsampleNearest { x, f }, req)
    }

    /// Per-channel spatial mean: C×H×W → C×1×1.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(self.dim_err("global_avg_pool", x, x));
        }
        let hw = s[1] * s[2];
        let inv = T::from_f64(1.0 / hw as f64);
        let xv = self.value(x).data();
        let data = (0..s[0])
            .map(|c| xv[c * hw..(c + 1) * hw].iter().copied().sum::<T>() * inv)
            .collect();
        let req = self.needs(x);
        self.push(&[s[0], 1, 1], data, Op::GlobalAvgPool(x), req)
    }

    // ── structure ops ──────────────────────────────────────────────────

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Config("concat of zero parts".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(self.dim_err("concat", parts[0], parts[0]));
        }
        let mut cat_dim = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(self.dim_err("concat", parts[0], p));
            }
            cat_dim += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut shape = first.clone();
        shape[axis] = cat_dim;
        let mut data = Vec::with_capacity(outer * cat_dim * inner);
        for o in 0..outer {
            for &p in parts {
                let s_axis = self.shape(p)[axis];
                let block = s_axis * inner;
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * block..(o + 1) * block]);
            }
        }
        let req = parts.iter().any(|&p| self.needs(p));
        self.push(
            &shape,
            data,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            req,
        )
    }

    /// Broadcast-add a vector to a matrix. `axis` is the dimension the vector
    /// indexes: 0 adds v[r] to row r, 1 adds v[c] to column c.
    pub fn add_vec(&mut self, m: Var, v: Var, axis: usize) -> Result<Var> {
        let s = self.shape(m).to_vec();
        if s.len() != 2 || axis > 1 || self.shape(v) != [s[axis]] {
            return Err(self.dim_err("add_vec", m, v));
        }
        let (rows, cols) = (s[0], s[1]);
        let mv = self.value(m).data();
        let vv = self.value(v).data();
        let mut data = Vec::with_capacity(mv.len());
        for r in 0..rows {
            for c in 0..cols {
                let b = if axis == 0 { vv[r] } else { vv[c] };
                data.push(mv[r * cols + c] + b);
            }
        }
        let req = self.needs(m) || self.needs(v);
        self.push(&s, data, Op::AddVec { m, v, axis }, req)
    }

    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || self.shape(b) != [s[0]] {
            return Err(self.dim_err("add_channel_bias", x, b));
        }
        let hw = s[1] * s[2];
        let xv = self.value(x).data();
        let bv = self.value(b).data();
        let mut data = Vec::with_capacity(xv.len());
        for c in 0..s[0] {
            for i in 0..hw {
                data.push(xv[c * hw + i] + bv[c]);
            }
        }
        let req = self.needs(x) || self.needs(b);
        self.push(&s, data, Op::AddChannelBias { x, b }, req)
    }

    /// Multiply each channel plane of a C×H×W map by a per-channel factor;
    /// `s` may be shaped [C] or [C,1,1].
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sv = self.shape(s);
        if sx.len() != 3 || self.value(s).len() != sx[0] || (sv.len() != 1 && sv != [sx[0], 1, 1]) {
            return Err(self.dim_err("scale_channels", x, s));
        }
        let hw = sx[1] * sx[2];
        let xv = self.value(x).data();
        let sv = self.value(s).data();
        let mut data = Vec::with_capacity(xv.len());
        for c in 0..sx[0] {
            for i in 0..hw {
                data.push(xv[c * hw + i] * sv[c]);
            }
        }
        let req = self.needs(x) || self.needs(s);
        self.push(&sx, data, Op::ScaleChannels { x, s }, req)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum::<T>();
        let req = self.needs(x);
        self.push(&[1], vec![total], Op::SumAll(x), req)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = T::from_f64(self.value(x).len() as f64);
        let total = self.value(x).data().iter().copied().sum::<T>() / n;
        let req = self.needs(x);
        self.push(&[1], vec![total], Op::MeanAll(x), req)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let req = self.needs(x);
        self.nodes.push(Node {
            value: t,
            op: Op::Reshape(x),
            requires_grad: req,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Accumulation visits nodes in
    /// strictly decreasing id order, so the result is deterministic and two
    /// replays from the same tape are bitwise identical.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Dim {
                op: "backward",
                lhs: self.shape(loss).to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.accumulate(Var(id), &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn add_into(&self, grads: &mut Vec<Option<Vec<T>>>, v: Var, contrib: impl Fn(&mut [T])) {
        if !self.needs(v) {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.value(v).len()]);
        contrib(buf);
    }

    fn add_slice(&self, grads: &mut Vec<Option<Vec<T>>>, v: Var, src: &[T]) {
        self.add_into(grads, v, |buf| {
            for (b, &s) in buf.iter_mut().zip(src) {
                *b += s;
            }
        });
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, out: Var, g: &[T], grads: &mut Vec<Option<Vec<T>>>) {
        let node = &self.nodes[out.0];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let da = kernels::matmul_nt(g, self.value(*b).data(), m, n, k);
                    self.add_slice(grads, *a, &da);
                }
                if self.needs(*b) {
                    // dB[k×n] = A[m×k]ᵀ · G[m×n]
                    let db = kernels::matmul_tn(self.value(*a).data(), g, k, m, n);
                    self.add_slice(grads, *b, &db);
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(out);
                let dt = kernels::transpose(g, s[0], s[1]);
                self.add_slice(grads, *x, &dt);
            }
            Op::Add(a, b) => {
                self.add_slice(grads, *a, g);
                self.add_slice(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.add_slice(grads, *a, g);
                self.add_into(grads, *b, |buf| {
                    for (d, &gv) in buf.iter_mut().zip(g) {
                        *d -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.add_into(grads, *a, |buf| {
                    for ((d, &gv), &x) in buf.iter_mut().zip(g).zip(bv) {
                        *d += gv * x;
                    }
                });
                self.add_into(grads, *b, |buf| {
                    for ((d, &gv), &x) in buf.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let (bv, yv) = (self.value(*b).data(), node.value.data());
                self.add_into(grads, *a, |buf| {
                    for ((d, &gv), &den) in buf.iter_mut().zip(g).zip(bv) {
                        *d += gv / den;
                    }
                });
                self.add_into(grads, *b, |buf| {
                    for (((d, &gv), &den), &y) in buf.iter_mut().zip(g).zip(bv).zip(yv) {
                        *d -= gv * y / den;
                    }
                });
            }
            Op::AddScalar(x) => self.add_slice(grads, *x, g),
            Op::MulScalar(x, c) => {
                let c = *c;
                self.add_into(grads, *x, |buf| {
                    for (d, &gv) in buf.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.add_into(grads, *x, |buf| {
                    for ((d, &gv), &v) in buf.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                self.add_into(grads, *x, |buf| {
                    for ((d, &gv), &y) in buf.iter_mut().zip(g).zip(yv) {
                        *d += gv * y * (T::one() - y);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.add_into(grads, *x, |buf| {
                    for ((d, &gv), &v) in buf.iter_mut().zip(g).zip(xv) {
                        *d += gv * gelu_grad(v);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (rows, cols) = {
                    let s = self.shape(out);
                    (s[0], s[1])
                };
                let yv = node.value.data();
                if !self.needs(*x) {
                    return;
                }
                let mut dx = vec![T::zero(); yv.len()];
                if *axis == 1 {
                    for r in 0..rows {
                        kernels::softmax_lane_bwd(
                            &yv[r * cols..(r + 1) * cols],
                            &g[r * cols..(r + 1) * cols],
                            &mut dx[r * cols..(r + 1) * cols],
                        );
                    }
                } else {
                    let mut ylane = vec![T::zero(); rows];
                    let mut glane = vec![T::zero(); rows];
                    let mut dlane = vec![T::zero(); rows];
                    for c in 0..cols {
                        for r in 0..rows {
                            ylane[r] = yv[r * cols + c];
                            glane[r] = g[r * cols + c];
                            dlane[r] = T::zero();
                        }
                        kernels::softmax_lane_bwd(&ylane, &glane, &mut dlane);
                        for r in 0..rows {
                            dx[r * cols + c] = dlane[r];
                        }
                    }
                }
                self.add_slice(grads, *x, &dx);
            }
            Op::LogSoftmax { x, axis } => {
                let (rows, cols) = {
                    let s = self.shape(out);
                    (s[0], s[1])
                };
                let yv = node.value.data();
                if !self.needs(*x) {
                    return;
                }
                let mut dx = vec![T::zero(); yv.len()];
                let lane_bwd = |y: &[T], gl: &[T], d: &mut [T]| {
                    let sum_g = gl.iter().copied().sum::<T>();
                    for ((dv, &gv), &lv) in d.iter_mut().zip(gl).zip(y) {
                        *dv = gv - lv.exp() * sum_g;
                    }
                };
                if *axis == 1 {
                    for r in 0..rows {
                        let range = r * cols..(r + 1) * cols;
                        lane_bwd(&yv[range.clone()], &g[range.clone()], &mut dx[range]);
                    }
                } else {
                    let mut ylane = vec![T::zero(); rows];
                    let mut glane = vec![T::zero(); rows];
                    let mut dlane = vec![T::zero(); rows];
                    for c in 0..cols {
                        for r in 0..rows {
                            ylane[r] = yv[r * cols + c];
                            glane[r] = g[r * cols + c];
                        }
                        lane_bwd(&ylane, &glane, &mut dlane);
                        for r in 0..rows {
                            dx[r * cols + c] = dlane[r];
                        }
                    }
                }
                self.add_slice(grads, *x, &dx);
            }
            Op::InstanceNorm { x, inv_std } => {
                if !self.needs(*x) {
                    return;
                }
                let mut dx = vec![T::zero(); g.len()];
                kernels::whiten_bwd(node.value.data(), g, *inv_std, &mut dx);
                self.add_slice(grads, *x, &dx);
            }
            Op::InstanceNorm2d { x, gain, offset } => {
                let s = self.shape(*x);
                let (c, hw) = (s[0], s[1] * s[2]);
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let mut dgain = vec![T::zero(); c];
                let mut doffset = vec![T::zero(); c];
                let mut dx = vec![T::zero(); xv.len()];
                let mut y = vec![T::zero(); hw];
                let mut gscaled = vec![T::zero(); hw];
                for ch in 0..c {
                    let lane = &xv[ch * hw..(ch + 1) * hw];
                    let glane = &g[ch * hw..(ch + 1) * hw];
                    let inv_std = kernels::whiten(lane, self.eps, &mut y);
                    for i in 0..hw {
                        dgain[ch] += glane[i] * y[i];
                        doffset[ch] += glane[i];
                        gscaled[i] = glane[i] * gv[ch];
                    }
                    kernels::whiten_bwd(&y, &gscaled, inv_std, &mut dx[ch * hw..(ch + 1) * hw]);
                }
                self.add_slice(grads, *x, &dx);
                self.add_slice(grads, *gain, &dgain);
                self.add_slice(grads, *offset, &doffset);
            }
            Op::LayerNormRows { x, gain, offset } => {
                let s = self.shape(*x);
                let (rows, cols) = (s[0], s[1]);
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let mut dgain = vec![T::zero(); cols];
                let mut doffset = vec![T::zero(); cols];
                let mut dx = vec![T::zero(); xv.len()];
                let mut y = vec![T::zero(); cols];
                let mut gscaled = vec![T::zero(); cols];
                for r in 0..rows {
                    let lane = &xv[r * cols..(r + 1) * cols];
                    let glane = &g[r * cols..(r + 1) * cols];
                    let inv_std = kernels::whiten(lane, self.eps, &mut y);
                    for j in 0..cols {
                        dgain[j] += glane[j] * y[j];
                        doffset[j] += glane[j];
                        gscaled[j] = glane[j] * gv[j];
                    }
                    kernels::whiten_bwd(&y, &gscaled, inv_std, &mut dx[r * cols..(r + 1) * cols]);
                }
                self.add_slice(grads, *x, &dx);
                self.add_slice(grads, *gain, &dgain);
                self.add_slice(grads, *offset, &doffset);
            }
            Op::Conv2d { x, w, bias, pad, stride } => {
                let (sx, sw, so) = (self.shape(*x), self.shape(*w), self.shape(out));
                let (ci, h, wd) = (sx[0], sx[1], sx[2]);
                let (co, kh, kw) = (sw[0], sw[2], sw[3]);
                let (oh, ow) = (so[1], so[2]);
                if self.needs(*x) {
                    let dx = kernels::conv2d_bwd_input(
                        g,
                        self.value(*w).data(),
                        ci,
                        h,
                        wd,
                        co,
                        kh,
                        kw,
                        *pad,
                        *stride,
                        oh,
                        ow,
                    );
                    self.add_slice(grads, *x, &dx);
                }
                if self.needs(*w) {
                    let dw = kernels::conv2d_bwd_weight(
                        g,
                        self.value(*x).data(),
                        ci,
                        h,
                        wd,
                        co,
                        kh,
                        kw,
                        *pad,
                        *stride,
                        oh,
                        ow,
                    );
                    self.add_slice(grads, *w, &dw);
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let db = kernels::conv2d_bwd_bias(g, co, oh * ow);
                        self.add_slice(grads, *b, &db);
                    }
                }
            }
            Op::DwConvPatch { x, w, p } => {
                let s = self.shape(*x);
                let (dx, dw) =
                    kernels::dwconv_bwd(g, self.value(*x).data(), self.value(*w).data(), s[0], s[1], s[2], *p);
                self.add_slice(grads, *x, &dx);
                self.add_slice(grads, *w, &dw);
            }
            Op::MaxPool2(x) => {
                let s = self.shape(*x);
                let dx = kernels::maxpool2_bwd(g, self.value(*x).data(), s[0], s[1], s[2]);
                self.add_slice(grads, *x, &dx);
            }
            Op::AvgPool { x, p } => {
                let s = self.shape(*x);
                let dx = kernels::avgpool_bwd(g, s[0], s[1], s[2], *p);
                self.add_slice(grads, *x, &dx);
            }
            Op::UpsampleNearest { x, f } => {
                let s = self.shape(*x);
                let dx = kernels::upsample_nearest_bwd(g, s[0], s[1], s[2], *f);
                self.add_slice(grads, *x, &dx);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[1] * s[2];
                let inv = T::from_f64(1.0 / hw as f64);
                self.add_into(grads, *x, |buf| {
                    for c in 0..s[0] {
                        let gc = g[c] * inv;
                        for d in &mut buf[c * hw..(c + 1) * hw] {
                            *d += gc;
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.shape(out).to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total_block = out_shape[*axis] * inner;
                let mut offset_units = 0;
                for &p in parts {
                    let block = self.shape(p)[*axis] * inner;
                    if self.needs(p) {
                        let start = offset_units;
                        self.add_into(grads, p, |buf| {
                            for o in 0..outer {
                                let src = &g[o * total_block + start..o * total_block + start + block];
                                for (d, &s) in buf[o * block..(o + 1) * block].iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        });
                    }
                    offset_units += block;
                }
            }
            Op::AddVec { m, v, axis } => {
                let s = self.shape(*m);
                let (rows, cols) = (s[0], s[1]);
                self.add_slice(grads, *m, g);
                self.add_into(grads, *v, |buf| {
                    if *axis == 0 {
                        for r in 0..rows {
                            buf[r] += g[r * cols..(r + 1) * cols].iter().copied().sum::<T>();
                        }
                    } else {
                        for r in 0..rows {
                            for c in 0..cols {
                                buf[c] += g[r * cols + c];
                            }
                        }
                    }
                });
            }
            Op::AddChannelBias { x, b } => {
                let s = self.shape(*x);
                let hw = s[1] * s[2];
                self.add_slice(grads, *x, g);
                self.add_into(grads, *b, |buf| {
                    for (c, d) in buf.iter_mut().enumerate() {
                        *d += g[c * hw..(c + 1) * hw].iter().copied().sum::<T>();
                    }
                });
            }
            Op::ScaleChannels { x, s } => {
                let sx = self.shape(*x);
                let hw = sx[1] * sx[2];
                let (xv, sv) = (self.value(*x).data(), self.value(*s).data());
                self.add_into(grads, *x, |buf| {
                    for c in 0..sx[0] {
                        let f = sv[c];
                        for (d, &gv) in buf[c * hw..(c + 1) * hw].iter_mut().zip(&g[c * hw..(c + 1) * hw]) {
                            *d += gv * f;
                        }
                    }
                });
                self.add_into(grads, *s, |buf| {
                    for c in 0..sx[0] {
                        let mut acc = T::zero();
                        for i in 0..hw {
                            acc += g[c * hw + i] * xv[c * hw + i];
                        }
                        buf[c] += acc;
                    }
                });
            }
            Op::SumAll(x) => {
                let gv = g[0];
                self.add_into(grads, *x, |buf| {
                    for d in buf.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::MeanAll(x) => {
                let gv = g[0] * T::from_f64(1.0 / self.value(*x).len() as f64);
                self.add_into(grads, *x, |buf| {
                    for d in buf.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::Reshape(x) => self.add_slice(grads, *x, g),
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let a = T::from_f64(GELU_A);
    let b = T::from_f64(GELU_B);
    let half = T::from_f64(0.5);
    let u = a * (x + b * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let a = T::from_f64(GELU_A);
    let b = T::from_f64(GELU_B);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = a * (x + b * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * a * (T::one() + three * b * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::new(&[rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_mismatch() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let a = g.constant(t2(2, 2, &[3.0, -1.0, 2.0, 5.0]));
        let prod = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(prod).data(), g.value(a).data());

        let b = g.constant(t2(2, 3, &[0.0; 6]));
        let c = g.constant(t2(2, 3, &[0.0; 6]));
        match g.matmul(b, c) {
            Err(Error::Dim { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dim error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t2(1, 2, &[0.0, 0.0]));
        let y = g.softmax(x, 1).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        // closed-form exp normalization: [0, ln 3] → [1/4, 3/4]
        let x = g.constant(t2(1, 2, &[0.0, 3.0f64.ln()]));
        let y = g.softmax(x, 1).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);

        // shift invariance without overflow
        let x = g.constant(t2(1, 2, &[1000.0, 1000.0]));
        let y = g.softmax(x, 1).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn instance_norm_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t2(2, 2, &[5.0, 5.0, 5.0, 5.0]));
        let y = g.instance_norm(x).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-6));

        let x = g.constant(t2(1, 4, &[1.0, 2.0, 3.0, 4.0]));
        let y = g.instance_norm(x).unwrap();
        let expect: Vec<f64> = [1.0, 2.0, 3.0, 4.0]
            .iter()
            .map(|v| (v - 2.5) / (1.25f64 + 1e-5).sqrt())
            .collect();
        for (a, b) in g.value(y).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_matches_instance_norm_on_full_slice() {
        let mut g = Graph::<f64>::new();
        let v = [0.3, -1.2, 2.5, 0.0, 4.0];
        let x1 = g.constant(t2(1, 5, &v));
        let gain = g.constant(Tensor::new(&[5], vec![1.0; 5]).unwrap());
        let offset = g.constant(Tensor::new(&[5], vec![0.0; 5]).unwrap());
        let ln = g.layer_norm_rows(x1, gain, offset).unwrap();
        let x2 = g.constant(t2(1, 5, &v));
        let inorm = g.instance_norm(x2).unwrap();
        for (a, b) in g.value(ln).data().iter().zip(g.value(inorm).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn activations_at_reference_points() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t2(1, 3, &[-1.0, 2.0, 0.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 2.0, 0.0]);
        let s = g.sigmoid(x).unwrap();
        assert!((g.value(s).data()[2] - 0.5).abs() < 1e-15);
        let ge = g.gelu(x).unwrap();
        assert_eq!(g.value(ge).data()[2], 0.0);
    }

    #[test]
    fn backward_square() {
        // y = x², dy/dx at 3 is 6
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        let loss = g.sum_all(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_requires_scalar_seed() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t2(1, 2, &[1.0, 2.0]), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn backward_replay_is_bitwise_identical() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t2(2, 2, &[0.1, -0.7, 1.3, 2.0]), true);
        let w = g.leaf(t2(2, 2, &[0.5, 0.2, -0.3, 0.9]), true);
        let y = g.matmul(x, w).unwrap();
        let s = g.sigmoid(y).unwrap();
        let loss = g.mean_all(s).unwrap();
        let g1 = g.backward(loss).unwrap();
        let g2 = g.backward(loss).unwrap();
        for v in [x, w] {
            let (a, b) = (g1.get(v).unwrap(), g2.get(v).unwrap());
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn finite_check_surfaces_error() {
        let mut g = Graph::<f64>::new().with_finite_checks(true);
        let a = g.constant(Tensor::scalar(1.0));
        let b = g.constant(Tensor::scalar(0.0));
        let r = g.div(a, b);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn softmax_cross_entropy_grad_is_p_minus_onehot() {
        // loss = -log p[target]; d/dlogits = p - onehot
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(t2(1, 3, &[0.2, -1.0, 0.7]), true);
        let lp = g.log_softmax(logits, 1).unwrap();
        let onehot = g.constant(t2(1, 3, &[0.0, 0.0, 1.0]));
        let picked = g.mul(lp, onehot).unwrap();
        let sum = g.sum_all(picked).unwrap();
        let loss = g.mul_scalar(sum, -1.0).unwrap();
        let grads = g.backward(loss).unwrap();
        let p = {
            let mut gg = Graph::<f64>::new();
            let l = gg.constant(t2(1, 3, &[0.2, -1.0, 0.7]));
            let sm = gg.softmax(l, 1).unwrap();
            gg.value(sm).data().to_vec()
        };
        let got = grads.get(logits).unwrap();
        let expect = [p[0], p[1], p[2] - 1.0];
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}
