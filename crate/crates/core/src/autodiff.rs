//! Reverse-mode differentiation over a tape of dense tensor operations.
//!
//! A [`Graph`] owns every value produced during a forward pass. Nodes are
//! appended in creation order and only ever reference earlier nodes, so the
//! tape is acyclic by construction and the backward sweep is a single pass
//! over node indices in reverse.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::resample::{axis_taps, Region, Tap};
use crate::tensor::{axis_split, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Exp(Var),
    Log { x: Var, floor: f64 },
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    Softmax { x: Var, axis: usize, tau: f64 },
    L2Normalize { x: Var, axis: usize, eps: f64 },
    AvgPool { x: Var, window: usize },
    Resize {
        x: Var,
        rows: Vec<Tap>,
        cols: Vec<Tap>,
    },
    PairwiseSqDist(Var),
    MaskedMean { x: Var, weights: Vec<f64>, total: f64 },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Dropout { x: Var, keep: Vec<f64> },
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    MaxAxis { x: Var, axis: usize, argmax: Vec<usize> },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Lowest value fed to `ln` by [`Graph::log_clamped`] callers that need a
/// finite result at exact zeros.
pub const LOG_FLOOR: f64 = 1e-12;

/// Epsilon guarding L2 normalization of (near-)zero vectors.
pub const NORM_EPS: f64 = 1e-12;

/// A differentiable primitive with its attributes, for table-driven use of
/// the operation set (see [`Graph::apply`]).
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Exp,
    Log,
    Neg,
    Scale(f64),
    MatMul,
    Conv2d { stride: usize, pad: usize },
    Relu,
    Softmax { axis: usize, tau: f64 },
    L2Normalize { axis: usize },
    AvgPool { window: usize },
    UpsampleBilinear { out_h: usize, out_w: usize },
    PairwiseSqDist,
    MaskedMean { weights: Vec<f64> },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Dropout { p: f64, seed: u64 },
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf: gradients accumulate into it on [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A constant copy of `v`'s current value (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        self.push_op(value, op, &[x])
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.push_op(value, op, &[a, b])
    }

    // ---------------------------------------------------------------- elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.binary(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), libm::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.log_clamped(x, 0.0)
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, Op::Log { x, floor }, |v| libm::log(v.max(floor)))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, Op::Scale(x, factor), |v| v * factor)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    // ---------------------------------------------------------------- linear algebra

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let value = Tensor::new([m, n], out)?;
        Ok(self.push_op(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: s.to_vec(),
                reason: "expected a matrix",
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new([c, r], out)?;
        Ok(self.push_op(value, Op::Transpose(x), &[x]))
    }

    /// 2-D cross-correlation. `x: [N, C, H, W]`, `w: [Co, C, kh, kw]`,
    /// optional `b: [Co]`, zero padding on all sides.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geo = ConvGeometry::new(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [geo.co] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    left: self.shape(b).to_vec(),
                    right: vec![geo.co],
                });
            }
        }
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = vec![0.0; geo.n * geo.co * geo.out_plane()];
        let mut col = vec![0.0; geo.col_len()];
        let per_out = geo.co * geo.out_plane();
        for n in 0..geo.n {
            geo.im2col(&xs[n * geo.in_image()..(n + 1) * geo.in_image()], &mut col);
            let dst = &mut out[n * per_out..(n + 1) * per_out];
            gemm_nn(geo.co, geo.patch(), geo.out_plane(), ws, &col, dst);
            if let Some(b) = b {
                let bs = self.value(b).data();
                for (o, chunk) in dst.chunks_mut(geo.out_plane()).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bs[o]);
                }
            }
        }
        let value = Tensor::new([geo.n, geo.co, geo.ho, geo.wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push_op(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &inputs,
        ))
    }

    // ---------------------------------------------------------------- normalizations

    /// Softmax of `x / tau` along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::InvalidTemperature(tau));
        }
        self.check_axis("softmax", x, axis)?;
        let value = softmax_values(self.value(x), axis, tau);
        Ok(self.push_op(value, Op::Softmax { x, axis, tau }, &[x]))
    }

    /// `x / max(||x||, eps)` along `axis`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        self.check_axis("l2_normalize", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = t.axis_split(axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let norm = libm::sqrt((0..len).map(|a| src[base + a * inner].powi(2)).sum());
                let denom = norm.max(eps);
                for a in 0..len {
                    out[base + a * inner] = src[base + a * inner] / denom;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push_op(value, Op::L2Normalize { x, axis, eps }, &[x]))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::InvalidShape {
                op,
                shape: self.shape(x).to_vec(),
                reason: "axis out of range",
            });
        }
        Ok(())
    }

    // ---------------------------------------------------------------- spatial

    /// Non-overlapping `window x window` average pooling of `[N, C, H, W]`.
    pub fn avg_pool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || window == 0 || s[2] % window != 0 || s[3] % window != 0 {
            return Err(Error::InvalidShape {
                op: "avg_pool2d",
                shape: s,
                reason: "expected [N, C, H, W] with H and W divisible by the window",
            });
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / window, w / window);
        let src = self.value(x).data();
        let inv = 1.0 / (window * window) as f64;
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..window {
                        let row = p * h * w + (oy * window + dy) * w + ox * window;
                        acc += src[row..row + window].iter().sum::<f64>();
                    }
                    out[p * oh * ow + oy * ow + ox] = acc * inv;
                }
            }
        }
        let value = Tensor::new([s[0], s[1], oh, ow], out)?;
        Ok(self.push_op(value, Op::AvgPool { x, window }, &[x]))
    }

    /// Bilinear resampling of `region` of every plane of `[N, C, H, W]` onto an
    /// `out_h x out_w` grid, align-corners convention: output corners sample
    /// the region corners exactly.
    pub fn resize_bilinear(
        &mut self,
        x: Var,
        region: Region,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || out_h == 0 || out_w == 0 {
            return Err(Error::InvalidShape {
                op: "resize_bilinear",
                shape: s,
                reason: "expected [N, C, H, W] and a non-empty output",
            });
        }
        region.check_within(s[2], s[3])?;
        let rows = axis_taps(s[2], region.top, region.bottom, out_h);
        let cols = axis_taps(s[3], region.left, region.right, out_w);
        let planes = s[0] * s[1];
        let src = self.value(x).data();
        let (h, w) = (s[2], s[3]);
        let mut out = vec![0.0; planes * out_h * out_w];
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, ry) in rows.iter().enumerate() {
                for (ox, cx) in cols.iter().enumerate() {
                    dst[oy * out_w + ox] = bilinear(plane, w, ry, cx);
                }
            }
        }
        let value = Tensor::new([s[0], s[1], out_h, out_w], out)?;
        Ok(self.push_op(value, Op::Resize { x, rows, cols }, &[x]))
    }

    /// Upsamples the full extent of `[N, C, h, w]` to `out_h x out_w`.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::InvalidShape {
                op: "upsample_bilinear",
                shape: s.to_vec(),
                reason: "expected [N, C, H, W]",
            });
        }
        let region = Region::full(s[2], s[3]);
        self.resize_bilinear(x, region, out_h, out_w)
    }

    // ---------------------------------------------------------------- reductions

    /// `[M, F] -> [M, M]` of squared Euclidean distances between rows.
    pub fn pairwise_sq_dist(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                op: "pairwise_sq_dist",
                shape: s.to_vec(),
                reason: "expected a matrix of row vectors",
            });
        }
        let (m, f) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                let (a, b) = (&src[i * f..(i + 1) * f], &src[j * f..(j + 1) * f]);
                out[i * m + j] = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
            }
        }
        let value = Tensor::new([m, m], out)?;
        Ok(self.push_op(value, Op::PairwiseSqDist(x), &[x]))
    }

    /// `sum(w * x) / sum(w)` as a scalar; zero when every weight is zero.
    pub fn masked_mean(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                op: "masked_mean",
                left: self.shape(x).to_vec(),
                right: vec![weights.len()],
            });
        }
        let total: f64 = weights.iter().sum();
        let mean = if total == 0.0 {
            0.0
        } else {
            let acc: f64 = self
                .value(x)
                .data()
                .iter()
                .zip(weights)
                .map(|(v, w)| v * w)
                .sum();
            acc / total
        };
        Ok(self.push_op(
            Tensor::scalar(mean),
            Op::MaskedMean {
                x,
                weights: weights.to_vec(),
                total,
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push_op(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = t.axis_split(axis);
        let src = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = &src[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(value, Op::SumAxis { x, axis }, &[x]))
    }

    /// Maximum over `axis`, removing it; the gradient routes to the first
    /// maximal element.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("max_axis", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = t.axis_split(axis);
        if len == 0 {
            return Err(Error::Empty("max_axis"));
        }
        let src = t.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for a in 1..len {
                    if src[(o * len + a) * inner + i] > src[(o * len + best) * inner + i] {
                        best = a;
                    }
                }
                out[o * inner + i] = src[(o * len + best) * inner + i];
                argmax[o * inner + i] = best;
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(value, Op::MaxAxis { x, axis, argmax }, &[x]))
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push_op(value, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidShape {
                op: "permute",
                shape: s,
                reason: "permutation does not match rank",
            });
        }
        let value = permute_values(self.value(x), perm);
        Ok(self.push_op(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(Error::Empty("concat"))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: base.clone(),
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let src = self.value(v).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// The `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let t = self.value(x);
        let full = t.shape()[axis];
        if start + len > full {
            return Err(Error::InvalidShape {
                op: "slice",
                shape: t.shape().to_vec(),
                reason: "slice range exceeds the axis length",
            });
        }
        let (outer, _, inner) = t.axis_split(axis);
        let src = t.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(value, Op::Slice { x, axis, start }, &[x]))
    }

    /// Inverted dropout: each element is zeroed with probability `p` and the
    /// survivors scaled by `1 / (1 - p)`. The mask is a pure function of
    /// `(seed, element index)`.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(alloc::format!(
                "dropout probability must lie in [0, 1), got {p}"
            )));
        }
        let scale = 1.0 / (1.0 - p);
        let keep: Vec<f64> = (0..self.value(x).len() as u64)
            .map(|i| if counter_uniform(seed, i) < p { 0.0 } else { scale })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&keep).map(|(v, k)| v * k).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push_op(value, Op::Dropout { x, keep }, &[x]))
    }

    /// Applies a [`Primitive`] to `inputs` (one or two tensors; three for a
    /// biased convolution, any number for concatenation).
    pub fn apply(&mut self, prim: &Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::InvalidArgument(alloc::format!(
                    "{prim:?} takes {n} inputs, got {}",
                    inputs.len()
                )))
            }
        };
        match *prim {
            Primitive::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            Primitive::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            Primitive::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            Primitive::Exp => arity(1).map(|_| self.exp(inputs[0])),
            Primitive::Log => arity(1).map(|_| self.log(inputs[0])),
            Primitive::Neg => arity(1).map(|_| self.neg(inputs[0])),
            Primitive::Scale(f) => arity(1).map(|_| self.scale(inputs[0], f)),
            Primitive::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            Primitive::Conv2d { stride, pad } => match inputs.len() {
                2 => self.conv2d(inputs[0], inputs[1], None, stride, pad),
                _ => arity(3).and_then(|_| self.conv2d(inputs[0], inputs[1], Some(inputs[2]), stride, pad)),
            },
            Primitive::Relu => arity(1).map(|_| self.relu(inputs[0])),
            Primitive::Softmax { axis, tau } => arity(1).and_then(|_| self.softmax(inputs[0], axis, tau)),
            Primitive::L2Normalize { axis } => {
                arity(1).and_then(|_| self.l2_normalize(inputs[0], axis, NORM_EPS))
            }
            Primitive::AvgPool { window } => arity(1).and_then(|_| self.avg_pool2d(inputs[0], window)),
            Primitive::UpsampleBilinear { out_h, out_w } => {
                arity(1).and_then(|_| self.upsample_bilinear(inputs[0], out_h, out_w))
            }
            Primitive::PairwiseSqDist => arity(1).and_then(|_| self.pairwise_sq_dist(inputs[0])),
            Primitive::MaskedMean { ref weights } => {
                arity(1).and_then(|_| self.masked_mean(inputs[0], weights))
            }
            Primitive::Concat { axis } => self.concat(inputs, axis),
            Primitive::Slice { axis, start, len } => {
                arity(1).and_then(|_| self.slice(inputs[0], axis, start, len))
            }
            Primitive::Dropout { p, seed } => arity(1).and_then(|_| self.dropout(inputs[0], p, seed)),
        }
    }

    // ---------------------------------------------------------------- backward

    /// Propagates `d root / d leaf` into every reachable trainable leaf.
    /// Leaf gradients accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        if !self.requires_grad(root) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                    }
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let nodes = &self.nodes;
        // Calls `f` with the gradient buffer of `v` if `v` needs gradient.
        let mut with = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let len = nodes[v.0].value.len();
                f(grads[v.0].get_or_insert_with(|| vec![0.0; len]));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                with(*a, &mut |d| add_into(d, g));
                with(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                with(*a, &mut |d| add_into(d, g));
                with(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                with(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * vb[i];
                    }
                });
                with(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * va[i];
                    }
                });
            }
            Op::Exp(x) => with(*x, &mut |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * out[i];
                }
            }),
            Op::Log { x, floor } => {
                let vx = nodes[x.0].value.data();
                with(*x, &mut |d| {
                    for i in 0..d.len() {
                        if vx[i] > *floor {
                            d[i] += g[i] / vx[i];
                        }
                    }
                });
            }
            Op::Neg(x) => with(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g)),
            Op::Scale(x, f) => with(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * f)),
            Op::AddScalar(x) | Op::Reshape(x) => with(*x, &mut |d| add_into(d, g)),
            Op::Relu(x) => with(*x, &mut |d| {
                for i in 0..d.len() {
                    if out[i] > 0.0 {
                        d[i] += g[i];
                    }
                }
            }),
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                with(*a, &mut |d| gemm_nt(m, n, k, g, vb, d));
                with(*b, &mut |d| gemm_tn(k, m, n, va, g, d));
            }
            Op::Transpose(x) => {
                let s = nodes[x.0].value.shape();
                let (r, c) = (s[0], s[1]);
                with(*x, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let geo = ConvGeometry::new(
                    nodes[x.0].value.shape(),
                    nodes[w.0].value.shape(),
                    *stride,
                    *pad,
                )
                .expect("validated in forward");
                let xs = nodes[x.0].value.data();
                let ws = nodes[w.0].value.data();
                let per_out = geo.co * geo.out_plane();
                if let Some(b) = b {
                    with(*b, &mut |d| {
                        for n in 0..geo.n {
                            for (o, chunk) in g[n * per_out..(n + 1) * per_out]
                                .chunks(geo.out_plane())
                                .enumerate()
                            {
                                d[o] += chunk.iter().sum::<f64>();
                            }
                        }
                    });
                }
                let mut col = vec![0.0; geo.col_len()];
                with(*w, &mut |d| {
                    for n in 0..geo.n {
                        geo.im2col(&xs[n * geo.in_image()..(n + 1) * geo.in_image()], &mut col);
                        let gy = &g[n * per_out..(n + 1) * per_out];
                        gemm_nt(geo.co, geo.out_plane(), geo.patch(), gy, &col, d);
                    }
                });
                with(*x, &mut |d| {
                    for n in 0..geo.n {
                        col.iter_mut().for_each(|v| *v = 0.0);
                        let gy = &g[n * per_out..(n + 1) * per_out];
                        gemm_tn(geo.patch(), geo.co, geo.out_plane(), ws, gy, &mut col);
                        geo.col2im(&col, &mut d[n * geo.in_image()..(n + 1) * geo.in_image()]);
                    }
                });
            }
            Op::Softmax { x, axis, tau } => {
                let (outer, len, inner) = node.value.axis_split(*axis);
                with(*x, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..len).map(|a| g[base + a * inner] * out[base + a * inner]).sum();
                            for a in 0..len {
                                let k = base + a * inner;
                                d[k] += out[k] * (g[k] - dot) / tau;
                            }
                        }
                    }
                });
            }
            Op::L2Normalize { x, axis, eps } => {
                let (outer, len, inner) = node.value.axis_split(*axis);
                let vx = nodes[x.0].value.data();
                with(*x, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let norm = libm::sqrt((0..len).map(|a| vx[base + a * inner].powi(2)).sum());
                            if norm > *eps {
                                let dot: f64 =
                                    (0..len).map(|a| g[base + a * inner] * out[base + a * inner]).sum();
                                for a in 0..len {
                                    let k = base + a * inner;
                                    d[k] += (g[k] - out[k] * dot) / norm;
                                }
                            } else {
                                for a in 0..len {
                                    let k = base + a * inner;
                                    d[k] += g[k] / eps;
                                }
                            }
                        }
                    }
                });
            }
            Op::AvgPool { x, window } => {
                let s = nodes[x.0].value.shape();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h / window, w / window);
                let inv = 1.0 / (window * window) as f64;
                with(*x, &mut |d| {
                    for p in 0..planes {
                        for y in 0..h {
                            for xx in 0..w {
                                d[p * h * w + y * w + xx] +=
                                    g[p * oh * ow + (y / window) * ow + xx / window] * inv;
                            }
                        }
                    }
                });
            }
            Op::Resize { x, rows, cols } => {
                let s = nodes[x.0].value.shape();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (rows.len(), cols.len());
                with(*x, &mut |d| {
                    for p in 0..planes {
                        let dst = &mut d[p * h * w..(p + 1) * h * w];
                        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
                        for (oy, ry) in rows.iter().enumerate() {
                            for (ox, cx) in cols.iter().enumerate() {
                                let gv = gp[oy * ow + ox];
                                dst[ry.lo * w + cx.lo] += gv * (1.0 - ry.frac) * (1.0 - cx.frac);
                                dst[ry.lo * w + cx.hi] += gv * (1.0 - ry.frac) * cx.frac;
                                dst[ry.hi * w + cx.lo] += gv * ry.frac * (1.0 - cx.frac);
                                dst[ry.hi * w + cx.hi] += gv * ry.frac * cx.frac;
                            }
                        }
                    }
                });
            }
            Op::PairwiseSqDist(x) => {
                let s = nodes[x.0].value.shape();
                let (m, f) = (s[0], s[1]);
                let vx = nodes[x.0].value.data();
                with(*x, &mut |d| {
                    for i in 0..m {
                        for j in 0..m {
                            let c = 2.0 * (g[i * m + j] + g[j * m + i]);
                            if c == 0.0 || i == j {
                                continue;
                            }
                            for k in 0..f {
                                d[i * f + k] += c * (vx[i * f + k] - vx[j * f + k]);
                            }
                        }
                    }
                });
            }
            Op::MaskedMean { x, weights, total } => {
                if *total != 0.0 {
                    with(*x, &mut |d| {
                        for i in 0..d.len() {
                            d[i] += g[0] * weights[i] / total;
                        }
                    });
                }
            }
            Op::Sum(x) => with(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = nodes[x.0].value.axis_split(*axis);
                with(*x, &mut |d| {
                    for o in 0..outer {
                        for a in 0..len {
                            for i in 0..inner {
                                d[(o * len + a) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::MaxAxis { x, axis, argmax } => {
                let (outer, len, inner) = nodes[x.0].value.axis_split(*axis);
                with(*x, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            d[(o * len + argmax[o * inner + i]) * inner + i] += g[o * inner + i];
                        }
                    }
                });
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("grad shape");
                let back = permute_values(&gt, &inverse);
                with(*x, &mut |d| add_into(d, back.data()));
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = node.value.axis_split(*axis);
                let total = node.value.shape()[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let len = nodes[v.0].value.shape()[*axis];
                    with(v, &mut |d| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut d[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let full = nodes[x.0].value.shape()[*axis];
                let (outer, len, inner) = node.value.axis_split(*axis);
                with(*x, &mut |d| {
                    for o in 0..outer {
                        let dst = &mut d[(o * full + start) * inner..(o * full + start + len) * inner];
                        add_into(dst, &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Dropout { x, keep } => with(*x, &mut |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * keep[i];
                }
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[inline]
fn bilinear(plane: &[f64], w: usize, ry: &Tap, cx: &Tap) -> f64 {
    let top = plane[ry.lo * w + cx.lo] * (1.0 - cx.frac) + plane[ry.lo * w + cx.hi] * cx.frac;
    let bottom = plane[ry.hi * w + cx.lo] * (1.0 - cx.frac) + plane[ry.hi * w + cx.hi] * cx.frac;
    top * (1.0 - ry.frac) + bottom * ry.frac
}

pub(crate) fn softmax_values(t: &Tensor, axis: usize, tau: f64) -> Tensor {
    let (outer, len, inner) = t.axis_split(axis);
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let max = (0..len).map(|a| src[base + a * inner]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for a in 0..len {
                let e = libm::exp((src[base + a * inner] - max) / tau);
                out[base + a * inner] = e;
                z += e;
            }
            for a in 0..len {
                out[base + a * inner] /= z;
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

pub(crate) fn permute_values(t: &Tensor, perm: &[usize]) -> Tensor {
    let s = t.shape();
    let rank = s.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * s[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0; rank];
    let mut off = 0;
    for _ in 0..src.len() {
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permuted shape")
}

/// Uniform `[0, 1)` value derived from `(seed, counter)` by a SplitMix64
/// finalizer; independent of call order.
pub fn counter_uniform(seed: u64, counter: u64) -> f64 {
    let mut z = seed
        .wrapping_add(counter.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

// ------------------------------------------------------------------- kernels

/// `c[m, n] += a[m, k] * b[k, n]`
fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(c, b)| *c += av * b);
        }
    }
}

/// `c[m, n] += a[m, k] * b[n, k]^T`
fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[m, n] += a[k, m]^T * b[k, n]`
fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(c, b)| *c += av * b);
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: x.to_vec(),
                right: w.to_vec(),
            });
        }
        let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d kernel larger than padded input",
                left: x.to_vec(),
                right: w.to_vec(),
            });
        }
        Ok(Self {
            n: x[0],
            c: x[1],
            h,
            w: wd,
            co: w[0],
            kh,
            kw,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        })
    }

    fn in_image(&self) -> usize {
        self.c * self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_len(&self) -> usize {
        self.patch() * self.out_plane()
    }

    /// Source coordinate for output position `o` and kernel tap `k`, or
    /// `None` inside the zero padding.
    #[inline]
    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(self.pad).filter(|&s| s < limit)
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let plane = self.out_plane();
        for c in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * plane;
                    for oy in 0..self.ho {
                        let sy = self.source(oy, ky, self.h);
                        for ox in 0..self.wo {
                            col[row + oy * self.wo + ox] = match (sy, self.source(ox, kx, self.w)) {
                                (Some(sy), Some(sx)) => x[(c * self.h + sy) * self.w + sx],
                                _ => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let plane = self.out_plane();
        for c in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * plane;
                    for oy in 0..self.ho {
                        let Some(sy) = self.source(oy, ky, self.h) else { continue };
                        for ox in 0..self.wo {
                            if let Some(sx) = self.source(ox, kx, self.w) {
                                dx[(c * self.h + sy) * self.w + sx] += col[row + oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
