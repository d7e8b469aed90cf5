//! Tape-based reverse-mode automatic differentiation.
//!
//! Operations execute eagerly and record themselves on the tape; recording
//! order is a topological order of the graph, so the backward pass is a
//! single reverse sweep that visits each node exactly once. Gradients
//! accumulate with `+=`, which makes fan-out sum naturally.
//!
//! A tape is confined to one logical training thread. Parameters enter the
//! graph as value copies via [`Tape::param`]; after [`Tape::backward`],
//! [`Tape::accumulate_param_grads`] adds the computed gradients back into
//! the owning [`ParamStore`].

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{self, KanConvMode, Padding};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{broadcast_shape, broadcast_strides, reduce_to_shape, strides, Tensor};

pub type ValueId = usize;

/// Canonical SeLU constants.
pub const SELU_ALPHA: f64 = 1.6732632423543772;
pub const SELU_LAMBDA: f64 = 1.0507009873554805;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Tanh,
    Sigmoid,
    /// x·sigmoid(x). The swish activation is the same function.
    Silu,
    Selu,
    Relu,
}

fn unary_fwd(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::Tanh => x.tanh(),
        UnaryKind::Sigmoid => sigmoid(x),
        UnaryKind::Silu => x * sigmoid(x),
        UnaryKind::Selu => {
            if x > 0.0 {
                SELU_LAMBDA * x
            } else {
                SELU_LAMBDA * SELU_ALPHA * (x.exp() - 1.0)
            }
        }
        UnaryKind::Relu => x.max(0.0),
    }
}

/// Derivative given the input x and the output y.
fn unary_bwd(kind: UnaryKind, x: f64, y: f64) -> f64 {
    match kind {
        UnaryKind::Tanh => 1.0 - y * y,
        UnaryKind::Sigmoid => y * (1.0 - y),
        UnaryKind::Silu => {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        }
        UnaryKind::Selu => {
            if x > 0.0 {
                SELU_LAMBDA
            } else {
                SELU_LAMBDA * SELU_ALPHA * x.exp()
            }
        }
        UnaryKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Uniform B-spline grid over a closed interval.
#[derive(Debug, Clone)]
pub struct BsplineGrid {
    pub(crate) knots: Vec<f64>,
    pub intervals: usize,
    pub order: usize,
    pub lo: f64,
    pub hi: f64,
}

impl BsplineGrid {
    pub fn uniform(lo: f64, hi: f64, intervals: usize, order: usize) -> Result<Self> {
        if !(lo < hi) || intervals == 0 {
            return Err(Error::Config(format!(
                "b-spline grid requires lo < hi and at least one interval, got [{lo}, {hi}] with {intervals}"
            )));
        }
        Ok(BsplineGrid {
            knots: ops::bspline_knots(lo, hi, intervals, order),
            intervals,
            order,
            lo,
            hi,
        })
    }

    /// Grid from explicit breakpoints (must be strictly increasing); the
    /// knot vector is extended `order` steps beyond each end.
    pub fn from_breakpoints(breaks: &[f64], order: usize) -> Result<Self> {
        if breaks.len() < 2 {
            return Err(Error::Config("b-spline grid needs at least 2 breakpoints".into()));
        }
        if breaks.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "b-spline grid must be strictly increasing, got {breaks:?}"
            )));
        }
        let h0 = breaks[1] - breaks[0];
        let hn = breaks[breaks.len() - 1] - breaks[breaks.len() - 2];
        let mut knots = Vec::with_capacity(breaks.len() + 2 * order);
        for i in (1..=order).rev() {
            knots.push(breaks[0] - i as f64 * h0);
        }
        knots.extend_from_slice(breaks);
        for i in 1..=order {
            knots.push(breaks[breaks.len() - 1] + i as f64 * hn);
        }
        Ok(BsplineGrid {
            knots,
            intervals: breaks.len() - 1,
            order,
            lo: breaks[0],
            hi: breaks[breaks.len() - 1],
        })
    }

    pub fn basis_count(&self) -> usize {
        self.intervals + self.order
    }
}

// ── recorded operations ──────────────────────────────────────────────

enum Op {
    Leaf,
    Param(ParamId),
    /// Batched matmul over the last two axes; leading axes must be equal.
    Matmul { a: ValueId, b: ValueId },
    /// y[n,o] = Σ_h Σ_j t[n,h,j]·c[h,o,j]
    ContractCheby { basis: ValueId, coeffs: ValueId },
    Conv1d {
        x: ValueId,
        w: ValueId,
        bias: Option<ValueId>,
        groups: usize,
        padding: Padding,
    },
    KanConv {
        x: ValueId,
        coeffs: ValueId,
        mode: KanConvMode,
        k: usize,
        degree: usize,
        padding: Padding,
    },
    /// Fused tanh → Chebyshev basis → coefficient contraction.
    ChebyKan {
        x: ValueId,
        coeffs: ValueId,
        degree: usize,
    },
    Unary { x: ValueId, kind: UnaryKind },
    Add { a: ValueId, b: ValueId },
    Sub { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    Scale { x: ValueId, c: f64 },
    ChebyBasis { x: ValueId, degree: usize },
    BsplineBasis { x: ValueId, grid: BsplineGrid },
    Softmax { x: ValueId, axis: usize },
    LayerNorm {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: Vec<f64>,
        invstd: Vec<f64>,
    },
    BatchNorm {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: Vec<f64>,
        invstd: Vec<f64>,
        train: bool,
    },
    Glu { x: ValueId },
    Concat { parts: Vec<ValueId>, axis: usize },
    Slice {
        x: ValueId,
        axis: usize,
        start: usize,
        len: usize,
    },
    SwapAxes { x: ValueId, ax0: usize, ax1: usize },
    Reshape { x: ValueId },
    BroadcastTo { x: ValueId },
    Sum { x: ValueId },
    Mean { x: ValueId },
    Dropout { x: ValueId, mask: Vec<f64> },
    CrossEntropy {
        logits: ValueId,
        targets: Vec<usize>,
        class_weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Per-node gradients produced by [`Tape::backward`]. Nodes the loss does
/// not depend on have no entry (their gradient is identically zero).
pub struct Gradients {
    g: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, id: ValueId) -> Option<&[f64]> {
        self.g.get(id).and_then(|o| o.as_deref())
    }

    pub fn wrt_or_zeros(&self, id: ValueId, n: usize) -> Vec<f64> {
        self.wrt(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n])
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> ValueId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    /// Record an input or constant.
    pub fn leaf(&mut self, t: Tensor) -> ValueId {
        self.push(t, Op::Leaf)
    }

    /// Record a parameter leaf (copies the current value).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> ValueId {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    // ── linear algebra ───────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() < 2 || sb.len() < 2 || sa.len() != sb.len() {
            return Err(Error::Dim(format!("matmul: ranks of {sa:?} and {sb:?} do not line up")));
        }
        let nd = sa.len();
        if sa[..nd - 2] != sb[..nd - 2] || sa[nd - 1] != sb[nd - 2] {
            return Err(Error::Dim(format!("matmul: {sa:?} incompatible with {sb:?}")));
        }
        let (m, k, n) = (sa[nd - 2], sa[nd - 1], sb[nd - 1]);
        let nb: usize = sa[..nd - 2].iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(nb * m * n);
        for i in 0..nb {
            out.extend(ops::matmul(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        let mut shape = sa[..nd - 2].to_vec();
        shape.push(m);
        shape.push(n);
        Ok(self.push(Tensor::new(shape, out)?, Op::Matmul { a, b }))
    }

    /// Eq-style coefficient contraction: basis [N,H,J] with coeffs [H,O,J]
    /// gives [N,O].
    pub fn contract_cheby(&mut self, basis: ValueId, coeffs: ValueId) -> Result<ValueId> {
        let (st, sc) = (self.value(basis).shape(), self.value(coeffs).shape());
        if st.len() != 3 || sc.len() != 3 || st[1] != sc[0] || st[2] != sc[2] {
            return Err(Error::Dim(format!(
                "contract: basis {st:?} incompatible with coeffs {sc:?} (need [N,H,J] x [H,O,J])"
            )));
        }
        let (n, h, j, o) = (st[0], st[1], st[2], sc[1]);
        let out = ops::contract_basis(self.value(basis).data(), self.value(coeffs).data(), n, h, o, j);
        Ok(self.push(Tensor::new(vec![n, o], out)?, Op::ContractCheby { basis, coeffs }))
    }

    /// Fused ChebyKAN layer: y[n,o] = Σ_h Σ_j T_j(tanh x[n,h])·c[h,o,j].
    /// Equivalent to tanh → cheby_basis → contract_cheby without
    /// materializing the basis tensor.
    pub fn cheby_kan(&mut self, x: ValueId, coeffs: ValueId, degree: usize) -> Result<ValueId> {
        let (sx, sc) = (self.value(x).shape(), self.value(coeffs).shape());
        if sx.len() != 2 || sc.len() != 3 || sc[0] != sx[1] || sc[2] != degree + 1 {
            return Err(Error::Dim(format!(
                "cheby_kan: input {sx:?} incompatible with coeffs {sc:?} at degree {degree}"
            )));
        }
        let (n, h, o) = (sx[0], sx[1], sc[1]);
        let out = ops::cheby_kan_fwd(self.value(x).data(), self.value(coeffs).data(), n, h, o, degree);
        Ok(self.push(
            Tensor::new(vec![n, o], out)?,
            Op::ChebyKan { x, coeffs, degree },
        ))
    }

    pub fn conv1d(
        &mut self,
        x: ValueId,
        w: ValueId,
        bias: Option<ValueId>,
        groups: usize,
        padding: Padding,
    ) -> Result<ValueId> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        if sx.len() != 3 || sw.len() != 3 {
            return Err(Error::Dim(format!(
                "conv1d: need x [B,C,T] and w [O,C/groups,K], got {sx:?} and {sw:?}"
            )));
        }
        let (batch, c_in, t_in) = (sx[0], sx[1], sx[2]);
        let (c_out, cpg, k) = (sw[0], sw[1], sw[2]);
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::Config(format!(
                "conv1d: channel counts (in {c_in}, out {c_out}) not divisible by groups {groups}"
            )));
        }
        if cpg != c_in / groups {
            return Err(Error::Dim(format!(
                "conv1d: kernel {sw:?} expects {} channels per group, input has {}",
                cpg,
                c_in / groups
            )));
        }
        if padding == Padding::Valid && k > t_in {
            return Err(Error::Dim(format!(
                "conv1d: kernel {k} longer than input {t_in} with valid padding"
            )));
        }
        if let Some(b) = bias {
            let sb = self.value(b).shape();
            if sb != [c_out] {
                return Err(Error::Dim(format!(
                    "conv1d: bias shape {sb:?} does not match {c_out} output channels"
                )));
            }
        }
        let bias_data = bias.map(|b| self.value(b).data().to_vec());
        let out = ops::conv1d(
            self.value(x).data(),
            self.value(w).data(),
            bias_data.as_deref(),
            batch,
            c_in,
            t_in,
            c_out,
            k,
            groups,
            padding,
        );
        let t_out = padding.out_len(t_in, k);
        Ok(self.push(
            Tensor::new(vec![batch, c_out, t_out], out)?,
            Op::Conv1d { x, w, bias, groups, padding },
        ))
    }

    pub fn kan_conv1d(
        &mut self,
        x: ValueId,
        coeffs: ValueId,
        mode: KanConvMode,
        k: usize,
        degree: usize,
        padding: Padding,
    ) -> Result<ValueId> {
        let sx = self.value(x).shape().to_vec();
        let sc = self.value(coeffs).shape().to_vec();
        if sx.len() != 3 {
            return Err(Error::Dim(format!("kan_conv1d: need x [B,C,T], got {sx:?}")));
        }
        let (batch, c_in, t_in) = (sx[0], sx[1], sx[2]);
        let j = degree + 1;
        let c_out = match mode {
            KanConvMode::Pointwise => {
                if k != 1 || sc.len() != 3 || sc[0] != c_in || sc[2] != j {
                    return Err(Error::Config(format!(
                        "kan_conv1d pointwise: coeffs {sc:?} incompatible with {c_in} channels, degree {degree}, k {k}"
                    )));
                }
                sc[1]
            }
            KanConvMode::Depthwise => {
                if sc.len() != 3 || sc[0] != k || sc[1] != c_in || sc[2] != j {
                    return Err(Error::Config(format!(
                        "kan_conv1d depthwise: coeffs {sc:?} incompatible with k {k}, {c_in} channels, degree {degree}"
                    )));
                }
                c_in
            }
            KanConvMode::Full => {
                if sc.len() != 4 || sc[0] != k || sc[1] != c_in || sc[3] != j {
                    return Err(Error::Config(format!(
                        "kan_conv1d full: coeffs {sc:?} incompatible with k {k}, {c_in} channels, degree {degree}"
                    )));
                }
                sc[2]
            }
        };
        if padding == Padding::Valid && k > t_in {
            return Err(Error::Dim(format!(
                "kan_conv1d: kernel {k} longer than input {t_in} with valid padding"
            )));
        }
        let dims = ops::KanConvDims {
            batch,
            c_in,
            t_in,
            c_out,
            k,
            degree,
            padding,
        };
        let out = ops::kan_conv1d_fwd(self.value(x).data(), self.value(coeffs).data(), mode, &dims);
        let t_out = padding.out_len(t_in, k);
        Ok(self.push(
            Tensor::new(vec![batch, c_out, t_out], out)?,
            Op::KanConv { x, coeffs, mode, k, degree, padding },
        ))
    }

    // ── elementwise ──────────────────────────────────────────────

    fn unary(&mut self, x: ValueId, kind: UnaryKind) -> ValueId {
        let t = self.value(x);
        let out = Tensor::from_fn(t.shape(), |i| unary_fwd(kind, t.data()[i]));
        self.push(out, Op::Unary { x, kind })
    }

    pub fn tanh(&mut self, x: ValueId) -> ValueId {
        self.unary(x, UnaryKind::Tanh)
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn silu(&mut self, x: ValueId) -> ValueId {
        self.unary(x, UnaryKind::Silu)
    }

    /// Swish is x·sigmoid(x), identical to SiLU.
    pub fn swish(&mut self, x: ValueId) -> ValueId {
        self.unary(x, UnaryKind::Silu)
    }

    pub fn selu(&mut self, x: ValueId) -> ValueId {
        self.unary(x, UnaryKind::Selu)
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        self.unary(x, UnaryKind::Relu)
    }

    fn binary(&mut self, a: ValueId, b: ValueId, which: u8) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let full = broadcast_shape(ta.shape(), tb.shape())?;
        let n: usize = full.iter().product();
        let f = |x: f64, y: f64| match which {
            0 => x + y,
            1 => x - y,
            _ => x * y,
        };
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let stra = broadcast_strides(ta.shape(), &full);
            let strb = broadcast_strides(tb.shape(), &full);
            let fstr = strides(&full);
            let mut out = Vec::with_capacity(n);
            for flat in 0..n {
                let (mut ia, mut ib, mut rem) = (0usize, 0usize, flat);
                for ax in 0..full.len() {
                    let coord = rem / fstr[ax];
                    rem %= fstr[ax];
                    ia += coord * stra[ax];
                    ib += coord * strb[ax];
                }
                out.push(f(ta.data()[ia], tb.data()[ib]));
            }
            out
        };
        let op = match which {
            0 => Op::Add { a, b },
            1 => Op::Sub { a, b },
            _ => Op::Mul { a, b },
        };
        Ok(self.push(Tensor::new(full, data)?, op))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(a, b, 0)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(a, b, 1)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(a, b, 2)
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> ValueId {
        let t = self.value(x);
        let out = Tensor::from_fn(t.shape(), |i| c * t.data()[i]);
        self.push(out, Op::Scale { x, c })
    }

    // ── basis expansions ─────────────────────────────────────────

    /// Stack T_0..T_degree along a new trailing axis. Inputs must lie in
    /// [-1, 1]; the usual caller squashes with tanh first.
    pub fn cheby_basis(&mut self, x: ValueId, degree: usize) -> Result<ValueId> {
        let t = self.value(x);
        if let Some(bad) = t.data().iter().find(|v| v.abs() > 1.0 + 1e-9) {
            return Err(Error::Domain(format!(
                "chebyshev basis input {bad} outside [-1, 1]"
            )));
        }
        let j = degree + 1;
        let mut shape = t.shape().to_vec();
        shape.push(j);
        let mut data = vec![0.0; t.numel() * j];
        for (i, &u) in t.data().iter().enumerate() {
            ops::cheby_row(u.clamp(-1.0, 1.0), degree, &mut data[i * j..(i + 1) * j]);
        }
        Ok(self.push(Tensor::new(shape, data)?, Op::ChebyBasis { x, degree }))
    }

    /// Stack all B-spline basis values along a new trailing axis; inputs are
    /// clamped to the grid range.
    pub fn bspline_basis(&mut self, x: ValueId, grid: &BsplineGrid) -> Result<ValueId> {
        let t = self.value(x);
        let nb = grid.basis_count();
        let mut shape = t.shape().to_vec();
        shape.push(nb);
        let mut data = vec![0.0; t.numel() * nb];
        for (i, &v) in t.data().iter().enumerate() {
            let xc = v.clamp(grid.lo, grid.hi);
            ops::bspline_row(&grid.knots, grid.intervals, grid.order, xc, &mut data[i * nb..(i + 1) * nb]);
        }
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::BsplineBasis { x, grid: grid.clone() },
        ))
    }

    // ── normalization and gating ─────────────────────────────────

    pub fn softmax(&mut self, x: ValueId, axis: usize) -> Result<ValueId> {
        let t = self.value(x);
        let nd = t.shape().len();
        if axis >= nd {
            return Err(Error::Dim(format!(
                "softmax axis {axis} out of bounds for shape {:?}",
                t.shape()
            )));
        }
        let len = t.shape()[axis];
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let outer: usize = t.shape()[..axis].iter().product();
        let mut data = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..len {
                    mx = mx.max(data[base + l * inner]);
                }
                let mut z = 0.0;
                for l in 0..len {
                    let e = (data[base + l * inner] - mx).exp();
                    data[base + l * inner] = e;
                    z += e;
                }
                for l in 0..len {
                    data[base + l * inner] /= z;
                }
            }
        }
        Ok(self.push(Tensor::new(t.shape().to_vec(), data)?, Op::Softmax { x, axis }))
    }

    /// Normalize over the last axis, then apply the affine (gamma, beta).
    pub fn layer_norm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    ) -> Result<ValueId> {
        let t = self.value(x);
        let nd = t.shape().len();
        if nd == 0 {
            return Err(Error::Dim("layer_norm on a scalar".into()));
        }
        let f = t.shape()[nd - 1];
        if self.value(gamma).shape() != [f] || self.value(beta).shape() != [f] {
            return Err(Error::Dim(format!(
                "layer_norm: gamma {:?} / beta {:?} do not match last extent {f}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let rows = t.numel() / f;
        let g = self.value(gamma).data().to_vec();
        let be = self.value(beta).data().to_vec();
        let mut mean = vec![0.0; rows];
        let mut invstd = vec![0.0; rows];
        let mut data = vec![0.0; t.numel()];
        let xd = self.value(x).data();
        for r in 0..rows {
            let row = &xd[r * f..(r + 1) * f];
            let mu = row.iter().sum::<f64>() / f as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / f as f64;
            let inv = 1.0 / (var + eps).sqrt();
            mean[r] = mu;
            invstd[r] = inv;
            for l in 0..f {
                data[r * f + l] = g[l] * (row[l] - mu) * inv + be[l];
            }
        }
        Ok(self.push(
            Tensor::new(t.shape().to_vec(), data)?,
            Op::LayerNorm { x, gamma, beta, mean, invstd },
        ))
    }

    /// Batch normalization of [B,C,T] over (B,T) per channel.
    ///
    /// Train mode normalizes with batch statistics and updates the running
    /// buffers in place (momentum-weighted, unbiased variance); eval mode
    /// normalizes with the running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        running_mean: &mut Tensor,
        running_var: &mut Tensor,
        momentum: f64,
        eps: f64,
        train: bool,
    ) -> Result<ValueId> {
        let t = self.value(x);
        if t.shape().len() != 3 {
            return Err(Error::Dim(format!("batch_norm: need [B,C,T], got {:?}", t.shape())));
        }
        let (b, c, tt) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        if self.value(gamma).shape() != [c]
            || self.value(beta).shape() != [c]
            || running_mean.shape() != [c]
            || running_var.shape() != [c]
        {
            return Err(Error::Dim(format!(
                "batch_norm: affine/running shapes do not match {c} channels"
            )));
        }
        let n = b * tt;
        if train && n < 2 {
            return Err(Error::Input(format!(
                "batch_norm: train mode needs at least 2 elements per channel, got {n}"
            )));
        }
        let (mut mean, mut invstd) = (vec![0.0; c], vec![0.0; c]);
        let xd = t.data();
        if train {
            for ch in 0..c {
                let mut s = 0.0;
                for ib in 0..b {
                    let row = &xd[(ib * c + ch) * tt..(ib * c + ch + 1) * tt];
                    s += row.iter().sum::<f64>();
                }
                let mu = s / n as f64;
                let mut v = 0.0;
                for ib in 0..b {
                    let row = &xd[(ib * c + ch) * tt..(ib * c + ch + 1) * tt];
                    v += row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>();
                }
                let var = v / n as f64;
                mean[ch] = mu;
                invstd[ch] = 1.0 / (var + eps).sqrt();
                let unbiased = v / (n as f64 - 1.0);
                running_mean.data_mut()[ch] = (1.0 - momentum) * running_mean.data()[ch] + momentum * mu;
                running_var.data_mut()[ch] = (1.0 - momentum) * running_var.data()[ch] + momentum * unbiased;
            }
        } else {
            for ch in 0..c {
                mean[ch] = running_mean.data()[ch];
                invstd[ch] = 1.0 / (running_var.data()[ch] + eps).sqrt();
            }
        }
        let g = self.value(gamma).data().to_vec();
        let be = self.value(beta).data().to_vec();
        let mut data = vec![0.0; t.numel()];
        for ib in 0..b {
            for ch in 0..c {
                let off = (ib * c + ch) * tt;
                for it in 0..tt {
                    data[off + it] = g[ch] * (xd[off + it] - mean[ch]) * invstd[ch] + be[ch];
                }
            }
        }
        Ok(self.push(
            Tensor::new(t.shape().to_vec(), data)?,
            Op::BatchNorm { x, gamma, beta, mean, invstd, train },
        ))
    }

    /// Gated linear unit over the last axis: first half ⊙ sigmoid(second half).
    pub fn glu(&mut self, x: ValueId) -> Result<ValueId> {
        let t = self.value(x);
        let nd = t.shape().len();
        if nd == 0 || t.shape()[nd - 1] % 2 != 0 {
            return Err(Error::Dim(format!(
                "glu: last axis of {:?} must be even",
                t.shape()
            )));
        }
        let f2 = t.shape()[nd - 1];
        let f = f2 / 2;
        let rows = t.numel() / f2;
        let mut shape = t.shape().to_vec();
        shape[nd - 1] = f;
        let mut data = vec![0.0; rows * f];
        let xd = t.data();
        for r in 0..rows {
            for l in 0..f {
                data[r * f + l] = xd[r * f2 + l] * sigmoid(xd[r * f2 + f + l]);
            }
        }
        Ok(self.push(Tensor::new(shape, data)?, Op::Glu { x }))
    }

    // ── shape plumbing ───────────────────────────────────────────

    pub fn concat(&mut self, parts: &[ValueId], axis: usize) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Dim(format!("concat axis {axis} out of bounds for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Dim(format!(
                    "concat: shape {s:?} incompatible with {first:?} along axis {axis}"
                )));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * total * inner];
        let mut off = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let la = s[axis];
            let pd = self.value(p).data();
            for o in 0..outer {
                let src = &pd[o * la * inner..(o + 1) * la * inner];
                let dst_base = (o * total + off) * inner;
                data[dst_base..dst_base + la * inner].copy_from_slice(src);
            }
            off += la;
        }
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat { parts: parts.to_vec(), axis }))
    }

    pub fn slice(&mut self, x: ValueId, axis: usize, start: usize, len: usize) -> Result<ValueId> {
        let t = self.value(x);
        let s = t.shape();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::Dim(format!(
                "slice [{start}, {start}+{len}) on axis {axis} out of bounds for {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let la = s[axis];
        let mut shape = s.to_vec();
        shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = &t.data()[(o * la + start) * inner..(o * la + start + len) * inner];
            data[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        Ok(self.push(Tensor::new(shape, data)?, Op::Slice { x, axis, start, len }))
    }

    pub fn swap_axes(&mut self, x: ValueId, ax0: usize, ax1: usize) -> Result<ValueId> {
        let t = self.value(x);
        let s = t.shape();
        if ax0 >= s.len() || ax1 >= s.len() {
            return Err(Error::Dim(format!(
                "swap_axes({ax0}, {ax1}) out of bounds for {s:?}"
            )));
        }
        let mut shape = s.to_vec();
        shape.swap(ax0, ax1);
        let data = permute_two(t.data(), s, ax0, ax1);
        Ok(self.push(Tensor::new(shape, data)?, Op::SwapAxes { x, ax0, ax1 }))
    }

    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> Result<ValueId> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape { x }))
    }

    pub fn broadcast_to(&mut self, x: ValueId, shape: &[usize]) -> Result<ValueId> {
        let t = self.value(x);
        let full = broadcast_shape(t.shape(), shape)?;
        if full != shape {
            return Err(Error::Dim(format!(
                "broadcast_to: {:?} does not broadcast to {shape:?}",
                t.shape()
            )));
        }
        let bstr = broadcast_strides(t.shape(), shape);
        let fstr = strides(shape);
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for flat in 0..n {
            let (mut ix, mut rem) = (0usize, flat);
            for ax in 0..shape.len() {
                let coord = rem / fstr[ax];
                rem %= fstr[ax];
                ix += coord * bstr[ax];
            }
            data.push(t.data()[ix]);
        }
        Ok(self.push(Tensor::new(shape.to_vec(), data)?, Op::BroadcastTo { x }))
    }

    // ── reductions and loss ──────────────────────────────────────

    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn mean(&mut self, x: ValueId) -> ValueId {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean { x })
    }

    /// Train-mode inverted dropout. With p == 0 this is a no-op that
    /// returns `x` itself.
    pub fn dropout(&mut self, x: ValueId, p: f64, rng: &mut ChaCha8Rng) -> Result<ValueId> {
        use rand::Rng;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let t = self.value(x);
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 / keep })
            .collect();
        let data: Vec<f64> = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        Ok(self.push(Tensor::new(t.shape().to_vec(), data)?, Op::Dropout { x, mask }))
    }

    /// Class-weighted cross-entropy over rows of logits [B,K]:
    /// Σ_b w[y_b]·(-log softmax(logits)[b, y_b]) / Σ_b w[y_b].
    pub fn weighted_cross_entropy(
        &mut self,
        logits: ValueId,
        targets: &[usize],
        class_weights: &[f64],
    ) -> Result<ValueId> {
        let t = self.value(logits);
        let s = t.shape();
        if s.len() != 2 {
            return Err(Error::Dim(format!("cross_entropy: logits must be [B,K], got {s:?}")));
        }
        let (b, k) = (s[0], s[1]);
        if targets.len() != b {
            return Err(Error::Dim(format!(
                "cross_entropy: {} targets for batch of {b}",
                targets.len()
            )));
        }
        if class_weights.len() != k {
            return Err(Error::Dim(format!(
                "cross_entropy: {} class weights for {k} classes",
                class_weights.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= k) {
            return Err(Error::Input(format!("cross_entropy: target {bad} out of range")));
        }
        let xd = t.data();
        let mut probs = vec![0.0; b * k];
        let mut num = 0.0;
        let mut den = 0.0;
        for ib in 0..b {
            let row = &xd[ib * k..(ib + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let logz = mx + z.ln();
            for l in 0..k {
                probs[ib * k + l] = (row[l] - logz).exp();
            }
            let w = class_weights[targets[ib]];
            num += w * (logz - row[targets[ib]]);
            den += w;
        }
        if den <= 0.0 {
            return Err(Error::Config("cross_entropy: class weights sum to zero".into()));
        }
        Ok(self.push(
            Tensor::scalar(num / den),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                class_weights: class_weights.to_vec(),
                probs,
            },
        ))
    }

    // ── backward ─────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns per-node gradients; use
    /// [`Tape::accumulate_param_grads`] to fold them into parameters.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients> {
        let lt = &self.nodes[loss].value;
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut g: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            let Some(dout) = g[id].take() else { continue };
            self.backward_node(id, &dout, &mut g);
            g[id] = Some(dout);
        }
        Ok(Gradients { g })
    }

    /// Add the gradients of every recorded parameter leaf into the store
    /// (`+=`; callers zero grads between optimizer steps).
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for (vid, node) in self.nodes.iter().enumerate() {
            if let Op::Param(pid) = node.op {
                if let Some(gv) = grads.wrt(vid) {
                    let dst = store.get_mut(pid).grad.data_mut();
                    for (d, &s) in dst.iter_mut().zip(gv) {
                        *d += s;
                    }
                }
            }
        }
    }

    fn backward_node(&self, id: ValueId, dout: &[f64], g: &mut [Option<Vec<f64>>]) {
        // Gradient slots are taken out, mutated, and put back, so an op that
        // references the same node twice accumulates both contributions.
        fn with_grad<F: FnOnce(&mut [f64])>(
            g: &mut [Option<Vec<f64>>],
            vid: ValueId,
            n: usize,
            f: F,
        ) {
            let mut buf = g[vid].take().unwrap_or_else(|| vec![0.0; n]);
            f(&mut buf);
            g[vid] = Some(buf);
        }
        let numel = |vid: ValueId| self.nodes[vid].value.numel();
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Matmul { a, b } => {
                let (sa, sb) = (self.nodes[*a].value.shape(), self.nodes[*b].value.shape());
                let nd = sa.len();
                let (m, k, n) = (sa[nd - 2], sa[nd - 1], sb[nd - 1]);
                let nb: usize = sa[..nd - 2].iter().product();
                let (ad, bd) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                with_grad(g, *a, numel(*a), |da| {
                    for i in 0..nb {
                        ops::matmul_grad_a(
                            &dout[i * m * n..(i + 1) * m * n],
                            &bd[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                });
                with_grad(g, *b, numel(*b), |db| {
                    for i in 0..nb {
                        ops::matmul_grad_b(
                            &ad[i * m * k..(i + 1) * m * k],
                            &dout[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut db[i * k * n..(i + 1) * k * n],
                        );
                    }
                });
            }
            Op::ContractCheby { basis, coeffs } => {
                let st = self.nodes[*basis].value.shape();
                let sc = self.nodes[*coeffs].value.shape();
                let (n, h, j, o) = (st[0], st[1], st[2], sc[1]);
                let cd = self.nodes[*coeffs].value.data();
                let td = self.nodes[*basis].value.data();
                with_grad(g, *basis, numel(*basis), |dt| {
                    ops::contract_basis_grad_t(dout, cd, n, h, o, j, dt);
                });
                with_grad(g, *coeffs, numel(*coeffs), |dc| {
                    ops::contract_basis_grad_c(td, dout, n, h, o, j, dc);
                });
            }
            Op::Conv1d { x, w, bias, groups, padding } => {
                let sx = self.nodes[*x].value.shape();
                let sw = self.nodes[*w].value.shape();
                let (batch, c_in, t_in) = (sx[0], sx[1], sx[2]);
                let (c_out, k) = (sw[0], sw[2]);
                let mut dx = vec![0.0; batch * c_in * t_in];
                let mut dw = vec![0.0; c_out * sw[1] * k];
                let mut dbias = bias.map(|_| vec![0.0; c_out]);
                ops::conv1d_grad(
                    self.nodes[*x].value.data(),
                    self.nodes[*w].value.data(),
                    dout,
                    batch,
                    c_in,
                    t_in,
                    c_out,
                    k,
                    *groups,
                    *padding,
                    &mut dx,
                    &mut dw,
                    dbias.as_deref_mut(),
                );
                with_grad(g, *x, numel(*x), |b| add_assign(b, &dx));
                with_grad(g, *w, numel(*w), |b| add_assign(b, &dw));
                if let (Some(bid), Some(db)) = (bias, dbias) {
                    with_grad(g, *bid, numel(*bid), |b| add_assign(b, &db));
                }
            }
            Op::KanConv { x, coeffs, mode, k, degree, padding } => {
                let sx = self.nodes[*x].value.shape();
                let sc = self.nodes[*coeffs].value.shape();
                let c_out = match mode {
                    KanConvMode::Pointwise => sc[1],
                    KanConvMode::Depthwise => sx[1],
                    KanConvMode::Full => sc[2],
                };
                let dims = ops::KanConvDims {
                    batch: sx[0],
                    c_in: sx[1],
                    t_in: sx[2],
                    c_out,
                    k: *k,
                    degree: *degree,
                    padding: *padding,
                };
                let mut dx = vec![0.0; self.nodes[*x].value.numel()];
                let mut dc = vec![0.0; self.nodes[*coeffs].value.numel()];
                ops::kan_conv1d_grad(
                    self.nodes[*x].value.data(),
                    self.nodes[*coeffs].value.data(),
                    dout,
                    *mode,
                    &dims,
                    &mut dx,
                    &mut dc,
                );
                with_grad(g, *x, numel(*x), |b| add_assign(b, &dx));
                with_grad(g, *coeffs, numel(*coeffs), |b| add_assign(b, &dc));
            }
            Op::ChebyKan { x, coeffs, degree } => {
                let sx = self.nodes[*x].value.shape();
                let sc = self.nodes[*coeffs].value.shape();
                let (n, h, o) = (sx[0], sx[1], sc[1]);
                let mut dx = vec![0.0; self.nodes[*x].value.numel()];
                let mut dc = vec![0.0; self.nodes[*coeffs].value.numel()];
                ops::cheby_kan_grad(
                    self.nodes[*x].value.data(),
                    self.nodes[*coeffs].value.data(),
                    dout,
                    n,
                    h,
                    o,
                    *degree,
                    &mut dx,
                    &mut dc,
                );
                with_grad(g, *x, numel(*x), |b| add_assign(b, &dx));
                with_grad(g, *coeffs, numel(*coeffs), |b| add_assign(b, &dc));
            }
            Op::Unary { x, kind } => {
                let xd = self.nodes[*x].value.data();
                let yd = node.value.data();
                with_grad(g, *x, numel(*x), |dx| {
                    for i in 0..dout.len() {
                        dx[i] += dout[i] * unary_bwd(*kind, xd[i], yd[i]);
                    }
                });
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                let full = node.value.shape();
                let sa = self.nodes[*a].value.shape().to_vec();
                let sb = self.nodes[*b].value.shape().to_vec();
                let ra = reduce_to_shape(dout, full, &sa);
                with_grad(g, *a, numel(*a), |buf| add_assign(buf, &ra));
                let mut rb = reduce_to_shape(dout, full, &sb);
                if sign < 0.0 {
                    rb.iter_mut().for_each(|v| *v = -*v);
                }
                with_grad(g, *b, numel(*b), |buf| add_assign(buf, &rb));
            }
            Op::Mul { a, b } => {
                let full = node.value.shape().to_vec();
                let ta = &self.nodes[*a].value;
                let tb = &self.nodes[*b].value;
                let n: usize = full.iter().product();
                let stra = broadcast_strides(ta.shape(), &full);
                let strb = broadcast_strides(tb.shape(), &full);
                let fstr = strides(&full);
                let mut da_full = vec![0.0; n];
                let mut db_full = vec![0.0; n];
                for flat in 0..n {
                    let (mut ia, mut ib, mut rem) = (0usize, 0usize, flat);
                    for ax in 0..full.len() {
                        let coord = rem / fstr[ax];
                        rem %= fstr[ax];
                        ia += coord * stra[ax];
                        ib += coord * strb[ax];
                    }
                    da_full[flat] = dout[flat] * tb.data()[ib];
                    db_full[flat] = dout[flat] * ta.data()[ia];
                }
                let ra = reduce_to_shape(&da_full, &full, ta.shape());
                let rb = reduce_to_shape(&db_full, &full, tb.shape());
                with_grad(g, *a, numel(*a), |buf| add_assign(buf, &ra));
                with_grad(g, *b, numel(*b), |buf| add_assign(buf, &rb));
            }
            Op::Scale { x, c } => {
                with_grad(g, *x, numel(*x), |dx| {
                    for i in 0..dout.len() {
                        dx[i] += dout[i] * c;
                    }
                });
            }
            Op::ChebyBasis { x, degree } => {
                let j = degree + 1;
                let xd = self.nodes[*x].value.data();
                with_grad(g, *x, numel(*x), |dx| {
                    let mut t = vec![0.0; j];
                    let mut dt = vec![0.0; j];
                    for i in 0..xd.len() {
                        ops::cheby_row_with_deriv(xd[i].clamp(-1.0, 1.0), *degree, &mut t, &mut dt);
                        let mut s = 0.0;
                        for l in 0..j {
                            s += dout[i * j + l] * dt[l];
                        }
                        dx[i] += s;
                    }
                });
            }
            Op::BsplineBasis { x, grid } => {
                let nb = grid.basis_count();
                let xd = self.nodes[*x].value.data();
                with_grad(g, *x, numel(*x), |dx| {
                    let mut dr = vec![0.0; nb];
                    for i in 0..xd.len() {
                        let v = xd[i];
                        // clamp has zero slope strictly outside the grid range
                        if v < grid.lo || v > grid.hi {
                            continue;
                        }
                        ops::bspline_row_deriv(&grid.knots, grid.intervals, grid.order, v, &mut dr);
                        let mut s = 0.0;
                        for l in 0..nb {
                            s += dout[i * nb + l] * dr[l];
                        }
                        dx[i] += s;
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let s = node.value.shape();
                let len = s[*axis];
                let inner: usize = s[*axis + 1..].iter().product();
                let outer: usize = s[..*axis].iter().product();
                with_grad(g, *x, numel(*x), |dx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for l in 0..len {
                                dot += dout[base + l * inner] * y[base + l * inner];
                            }
                            for l in 0..len {
                                let ix = base + l * inner;
                                dx[ix] += y[ix] * (dout[ix] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, mean, invstd } => {
                let f = self.nodes[*gamma].value.numel();
                let rows = node.value.numel() / f;
                let xd = self.nodes[*x].value.data();
                let gd = self.nodes[*gamma].value.data();
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                with_grad(g, *x, numel(*x), |dx| {
                    for r in 0..rows {
                        let inv = invstd[r];
                        let mu = mean[r];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for l in 0..f {
                            let xhat = (xd[r * f + l] - mu) * inv;
                            let dyg = dout[r * f + l] * gd[l];
                            m1 += dyg;
                            m2 += dyg * xhat;
                            dgamma[l] += dout[r * f + l] * xhat;
                            dbeta[l] += dout[r * f + l];
                        }
                        m1 /= f as f64;
                        m2 /= f as f64;
                        for l in 0..f {
                            let xhat = (xd[r * f + l] - mu) * inv;
                            let dyg = dout[r * f + l] * gd[l];
                            dx[r * f + l] += inv * (dyg - m1 - xhat * m2);
                        }
                    }
                });
                with_grad(g, *gamma, f, |buf| add_assign(buf, &dgamma));
                with_grad(g, *beta, f, |buf| add_assign(buf, &dbeta));
            }
            Op::BatchNorm { x, gamma, beta, mean, invstd, train } => {
                let s = node.value.shape();
                let (b, c, tt) = (s[0], s[1], s[2]);
                let n = (b * tt) as f64;
                let xd = self.nodes[*x].value.data();
                let gd = self.nodes[*gamma].value.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                with_grad(g, *x, numel(*x), |dx| {
                    for ch in 0..c {
                        let inv = invstd[ch];
                        let mu = mean[ch];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for ib in 0..b {
                            let off = (ib * c + ch) * tt;
                            for it in 0..tt {
                                let xhat = (xd[off + it] - mu) * inv;
                                let d = dout[off + it];
                                m1 += d * gd[ch];
                                m2 += d * gd[ch] * xhat;
                                dgamma[ch] += d * xhat;
                                dbeta[ch] += d;
                            }
                        }
                        m1 /= n;
                        m2 /= n;
                        for ib in 0..b {
                            let off = (ib * c + ch) * tt;
                            for it in 0..tt {
                                let d = dout[off + it] * gd[ch];
                                if *train {
                                    let xhat = (xd[off + it] - mu) * inv;
                                    dx[off + it] += inv * (d - m1 - xhat * m2);
                                } else {
                                    dx[off + it] += inv * d;
                                }
                            }
                        }
                    }
                });
                with_grad(g, *gamma, c, |buf| add_assign(buf, &dgamma));
                with_grad(g, *beta, c, |buf| add_assign(buf, &dbeta));
            }
            Op::Glu { x } => {
                let xt = &self.nodes[*x].value;
                let nd = xt.shape().len();
                let f2 = xt.shape()[nd - 1];
                let f = f2 / 2;
                let rows = xt.numel() / f2;
                let xd = xt.data();
                with_grad(g, *x, numel(*x), |dx| {
                    for r in 0..rows {
                        for l in 0..f {
                            let a = xd[r * f2 + l];
                            let gate = sigmoid(xd[r * f2 + f + l]);
                            let d = dout[r * f + l];
                            dx[r * f2 + l] += d * gate;
                            dx[r * f2 + f + l] += d * a * gate * (1.0 - gate);
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let s = node.value.shape();
                let total = s[*axis];
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                let mut off = 0;
                for &p in parts {
                    let la = self.nodes[p].value.shape()[*axis];
                    with_grad(g, p, numel(p), |dp| {
                        for o in 0..outer {
                            let src =
                                &dout[(o * total + off) * inner..(o * total + off + la) * inner];
                            add_assign(&mut dp[o * la * inner..(o + 1) * la * inner], src);
                        }
                    });
                    off += la;
                }
            }
            Op::Slice { x, axis, start, len } => {
                let sx = self.nodes[*x].value.shape();
                let la = sx[*axis];
                let outer: usize = sx[..*axis].iter().product();
                let inner: usize = sx[*axis + 1..].iter().product();
                with_grad(g, *x, numel(*x), |dx| {
                    for o in 0..outer {
                        let dst =
                            &mut dx[(o * la + start) * inner..(o * la + start + len) * inner];
                        add_assign(dst, &dout[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::SwapAxes { x, ax0, ax1 } => {
                // the inverse permutation is the same swap applied to dout
                let back = permute_two(dout, node.value.shape(), *ax0, *ax1);
                with_grad(g, *x, numel(*x), |buf| add_assign(buf, &back));
            }
            Op::Reshape { x } => {
                with_grad(g, *x, numel(*x), |buf| add_assign(buf, dout));
            }
            Op::BroadcastTo { x } => {
                let target = self.nodes[*x].value.shape().to_vec();
                let r = reduce_to_shape(dout, node.value.shape(), &target);
                with_grad(g, *x, numel(*x), |buf| add_assign(buf, &r));
            }
            Op::Sum { x } => {
                with_grad(g, *x, numel(*x), |dx| {
                    for v in dx.iter_mut() {
                        *v += dout[0];
                    }
                });
            }
            Op::Mean { x } => {
                let n = self.nodes[*x].value.numel() as f64;
                with_grad(g, *x, numel(*x), |dx| {
                    for v in dx.iter_mut() {
                        *v += dout[0] / n;
                    }
                });
            }
            Op::Dropout { x, mask } => {
                with_grad(g, *x, numel(*x), |dx| {
                    for i in 0..dout.len() {
                        dx[i] += dout[i] * mask[i];
                    }
                });
            }
            Op::CrossEntropy { logits, targets, class_weights, probs } => {
                let s = self.nodes[*logits].value.shape();
                let (b, k) = (s[0], s[1]);
                let den: f64 = targets.iter().map(|&y| class_weights[y]).sum();
                with_grad(g, *logits, numel(*logits), |dl| {
                    for ib in 0..b {
                        let w = class_weights[targets[ib]] / den;
                        for l in 0..k {
                            let ind = if l == targets[ib] { 1.0 } else { 0.0 };
                            dl[ib * k + l] += dout[0] * w * (probs[ib * k + l] - ind);
                        }
                    }
                });
            }
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Copy with two axes swapped. The shape is folded to
/// [pre, d0, mid, d1, post] around the swapped axes so the innermost copy
/// runs over contiguous blocks.
fn permute_two(data: &[f64], shape: &[usize], ax0: usize, ax1: usize) -> Vec<f64> {
    if ax0 == ax1 {
        return data.to_vec();
    }
    let (a0, a1) = (ax0.min(ax1), ax0.max(ax1));
    let pre: usize = shape[..a0].iter().product();
    let d0 = shape[a0];
    let mid: usize = shape[a0 + 1..a1].iter().product();
    let d1 = shape[a1];
    let post: usize = shape[a1 + 1..].iter().product();
    let mut out = vec![0.0; data.len()];
    for p in 0..pre {
        for i0 in 0..d0 {
            for m in 0..mid {
                for i1 in 0..d1 {
                    let src = ((((p * d0 + i0) * mid) + m) * d1 + i1) * post;
                    let dst = ((((p * d1 + i1) * mid) + m) * d0 + i0) * post;
                    out[dst..dst + post].copy_from_slice(&data[src..src + post]);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, finite_diff_check_params};
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let c = tape.leaf(Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let y = tape.matmul(p, c).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut r = rng(1);
        let a = rand_tensor(&[3, 4], &mut r);
        let b = rand_tensor(&[4, 2], &mut r);
        let mut tape = Tape::new();
        let aid = tape.leaf(a.clone());
        let bid = tape.leaf(b.clone());
        let y = tape.matmul(aid, bid).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a.at(&[i, p]) * b.at(&[p, j]);
                }
                assert!((tape.value(y).at(&[i, j]) - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn contract_ones_sums_over_h() {
        let mut tape = Tape::new();
        let t = tape.leaf(Tensor::full(&[1, 2, 1], 1.0));
        let c = tape.leaf(Tensor::full(&[2, 1, 1], 1.0));
        let y = tape.contract_cheby(t, c).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0]);
    }

    #[test]
    fn contract_zero_coefficients_annihilate() {
        let mut r = rng(2);
        let mut tape = Tape::new();
        let t = tape.leaf(rand_tensor(&[3, 2, 4], &mut r));
        let c = tape.leaf(Tensor::zeros(&[2, 5, 4]));
        let y = tape.contract_cheby(t, c).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn contract_matches_quadruple_loop_oracle() {
        let mut r = rng(3);
        let t = rand_tensor(&[2, 3, 3], &mut r);
        let c = rand_tensor(&[3, 2, 3], &mut r);
        let mut tape = Tape::new();
        let tid = tape.leaf(t.clone());
        let cid = tape.leaf(c.clone());
        let y = tape.contract_cheby(tid, cid).unwrap();
        for n in 0..2 {
            for o in 0..2 {
                let mut s = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        s += t.at(&[n, i, j]) * c.at(&[i, o, j]);
                    }
                }
                assert!((tape.value(y).at(&[n, o]) - s).abs() <= 1e-12);
            }
        }
        let bad = tape.leaf(Tensor::zeros(&[4, 2, 3]));
        assert!(tape.contract_cheby(tid, bad).is_err());
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 4], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let w = tape.leaf(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
        let y = tape.conv1d(x, w, None, 1, Padding::Same).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv1d_box_filter_by_hand() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let w = tape.leaf(Tensor::new(vec![1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap());
        let y = tape.conv1d(x, w, None, 1, Padding::Same).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv1d_matches_sliding_window_oracle() {
        let mut r = rng(4);
        let x = rand_tensor(&[1, 2, 7], &mut r);
        let w = rand_tensor(&[2, 2, 3], &mut r);
        let b = rand_tensor(&[2], &mut r);
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let wid = tape.leaf(w.clone());
        let bid = tape.leaf(b.clone());
        let y = tape.conv1d(xid, wid, Some(bid), 1, Padding::Same).unwrap();
        for o in 0..2 {
            for t in 0..7 {
                let mut s = b.at(&[o]);
                for c in 0..2 {
                    for a in 0..3 {
                        let q = t as isize + a as isize - 1;
                        if q >= 0 && q < 7 {
                            s += x.at(&[0, c, q as usize]) * w.at(&[o, c, a]);
                        }
                    }
                }
                assert!((tape.value(y).at(&[0, o, t]) - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn conv1d_groups_must_divide_channels() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3, 5]));
        let w = tape.leaf(Tensor::zeros(&[3, 1, 3]));
        assert!(matches!(
            tape.conv1d(x, w, None, 2, Padding::Same),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn elementwise_fixed_points() {
        let mut tape = Tape::new();
        let zero = tape.leaf(Tensor::scalar(0.0));
        let one = tape.leaf(Tensor::scalar(1.0));
        let t = tape.tanh(zero);
        assert_eq!(tape.value(t).data(), &[0.0]);
        let s = tape.silu(zero);
        assert_eq!(tape.value(s).data(), &[0.0]);
        let g = tape.sigmoid(zero);
        assert_eq!(tape.value(g).data(), &[0.5]);
        let e = tape.selu(one);
        assert!((tape.value(e).data()[0] - SELU_LAMBDA).abs() < 1e-10);
    }

    #[test]
    fn elementwise_broadcast_and_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = tape.leaf(Tensor::new(vec![3], vec![10., 20., 30.]).unwrap());
        let y = tape.add(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11., 22., 33., 14., 25., 36.]);
        let bad = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.add(a, bad), Err(Error::Dim(_))));
    }

    #[test]
    fn softmax_uniform_stability_and_normalization() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() <= 1e-15);
        }

        let big = tape.leaf(Tensor::new(vec![2], vec![1000.0, 1000.0]).unwrap());
        let y = tape.softmax(big, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let mut r = rng(5);
        let x = tape.leaf(rand_tensor(&[5], &mut r));
        let y = tape.softmax(x, 0).unwrap();
        let s: f64 = tape.value(y).data().iter().sum();
        assert!((s - 1.0).abs() <= 1e-12);
        assert!(tape.value(y).data().iter().all(|&v| v >= 0.0));

        assert!(tape.softmax(x, 1).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_on_matrix_axis() {
        let mut r = rng(6);
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&[4, 7], &mut r));
        let y = tape.softmax(x, 1).unwrap();
        for row in 0..4 {
            let s: f64 = (0..7).map(|c| tape.value(y).at(&[row, c])).sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let gamma = tape.leaf(Tensor::full(&[4], 1.0));
        let beta = tape.leaf(Tensor::zeros(&[4]));
        let c = tape.leaf(Tensor::full(&[4], 3.7));
        let y = tape.layer_norm(c, gamma, beta, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let g2 = tape.leaf(Tensor::full(&[2], 1.0));
        let b2 = tape.leaf(Tensor::zeros(&[2]));
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 3.0]).unwrap());
        let y = tape.layer_norm(x, g2, b2, 1e-5).unwrap();
        assert!((tape.value(y).data()[0] + 1.0).abs() < 1e-4);
        assert!((tape.value(y).data()[1] - 1.0).abs() < 1e-4);

        let mut r = rng(7);
        let x = tape.leaf(rand_tensor(&[3, 4], &mut r));
        let y = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for row in 0..3 {
            let vals: Vec<f64> = (0..4).map(|c| tape.value(y).at(&[row, c])).collect();
            let mean: f64 = vals.iter().sum::<f64>() / 4.0;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }

        let bad_gamma = tape.leaf(Tensor::zeros(&[3]));
        assert!(tape.layer_norm(x, bad_gamma, beta, 1e-5).is_err());
    }

    #[test]
    fn batch_norm_standardized_channel_passes_through() {
        let mut tape = Tape::new();
        let gamma = tape.leaf(Tensor::full(&[1], 1.0));
        let beta = tape.leaf(Tensor::zeros(&[1]));
        let mut rm = Tensor::zeros(&[1]);
        let mut rv = Tensor::full(&[1], 1.0);
        let x = tape.leaf(Tensor::new(vec![1, 1, 2], vec![-1.0, 1.0]).unwrap());
        let y = tape
            .batch_norm(x, gamma, beta, &mut rm, &mut rv, 0.1, 1e-5, true)
            .unwrap();
        let scale = 1.0 / (1.0 + 1e-5_f64).sqrt();
        assert!((tape.value(y).data()[0] + scale).abs() < 1e-12);
        assert!((tape.value(y).data()[1] - scale).abs() < 1e-12);
        // running stats moved toward the batch stats (unbiased var = 2)
        assert!((rm.data()[0] - 0.0).abs() < 1e-12);
        assert!((rv.data()[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_eval_with_unit_running_stats_is_identity_up_to_eps() {
        let mut r = rng(8);
        let mut tape = Tape::new();
        let gamma = tape.leaf(Tensor::full(&[2], 1.0));
        let beta = tape.leaf(Tensor::zeros(&[2]));
        let mut rm = Tensor::zeros(&[2]);
        let mut rv = Tensor::full(&[2], 1.0);
        let xt = rand_tensor(&[2, 2, 3], &mut r);
        let x = tape.leaf(xt.clone());
        let y = tape
            .batch_norm(x, gamma, beta, &mut rm, &mut rv, 0.1, 1e-5, false)
            .unwrap();
        for (a, b) in tape.value(y).data().iter().zip(xt.data()) {
            assert!((a - b).abs() <= 1e-4);
        }
    }

    #[test]
    fn batch_norm_train_centers_each_channel() {
        let mut r = rng(9);
        let mut tape = Tape::new();
        let gamma = tape.leaf(Tensor::full(&[3], 1.0));
        let beta = tape.leaf(Tensor::zeros(&[3]));
        let mut rm = Tensor::zeros(&[3]);
        let mut rv = Tensor::full(&[3], 1.0);
        let x = tape.leaf(rand_tensor(&[2, 3, 5], &mut r));
        let y = tape
            .batch_norm(x, gamma, beta, &mut rm, &mut rv, 0.1, 1e-5, true)
            .unwrap();
        for c in 0..3 {
            let mut s = 0.0;
            for b in 0..2 {
                for t in 0..5 {
                    s += tape.value(y).at(&[b, c, t]);
                }
            }
            assert!((s / 10.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn batch_norm_degenerate_batch_is_an_error() {
        let mut tape = Tape::new();
        let gamma = tape.leaf(Tensor::full(&[1], 1.0));
        let beta = tape.leaf(Tensor::zeros(&[1]));
        let mut rm = Tensor::zeros(&[1]);
        let mut rv = Tensor::full(&[1], 1.0);
        let x = tape.leaf(Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap());
        assert!(matches!(
            tape.batch_norm(x, gamma, beta, &mut rm, &mut rv, 0.1, 1e-5, true),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn glu_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![2.0, 0.0]).unwrap());
        let y = tape.glu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0]);

        // saturated gate: second half large positive -> output ~ first half
        let x = tape.leaf(Tensor::new(vec![2], vec![0.7, 60.0]).unwrap());
        let y = tape.glu(x).unwrap();
        assert!((tape.value(y).data()[0] - 0.7).abs() < 1e-12);

        let odd = tape.leaf(Tensor::zeros(&[3]));
        assert!(matches!(tape.glu(odd), Err(Error::Dim(_))));
    }

    #[test]
    fn backward_of_square_at_three_is_six() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1], vec![3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_constant_loss_leaves_params_untouched() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::full(&[3], 2.0)).unwrap();
        let mut tape = Tape::new();
        let _wid = tape.param(&store, w);
        let c = tape.leaf(Tensor::scalar(5.0));
        let grads = tape.backward(c).unwrap();
        tape.accumulate_param_grads(&grads, &mut store);
        assert!(store.get(w).grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_fan_out_accumulates() {
        // f(x) = x + x has gradient 2
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.5, -0.5]).unwrap());
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_grads_accumulate_across_calls() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![1], vec![3.0]).unwrap()).unwrap();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let wid = tape.param(&store, w);
            let sq = tape.mul(wid, wid).unwrap();
            let loss = tape.sum(sq);
            let grads = tape.backward(loss).unwrap();
            tape.accumulate_param_grads(&grads, &mut store);
        }
        // two backward passes, each contributing 6
        assert_eq!(store.get(w).grad.data(), &[12.0]);
    }

    #[test]
    fn matmul_loss_gradient_matches_finite_differences() {
        let mut r = rng(10);
        let b = rand_tensor(&[4, 2], &mut r);
        let f = move |tape: &mut Tape, x: ValueId| -> Result<ValueId> {
            let bid = tape.leaf(b.clone());
            let y = tape.matmul(x, bid)?;
            Ok(tape.sum(y))
        };
        let a = rand_tensor(&[3, 4], &mut r);
        let err = finite_diff_check(&f, &a, 1e-5).unwrap();
        assert!(err <= 1e-6, "max rel err {err}");
    }

    #[test]
    fn op_gradients_match_finite_differences() {
        let mut r = rng(11);
        type CheckFn = Box<dyn Fn(&mut Tape, ValueId) -> Result<ValueId>>;
        let cases: Vec<(&str, Vec<usize>, CheckFn)> = vec![
            ("tanh", vec![5], Box::new(|t, x| { let y = t.tanh(x); Ok(t.sum(y)) })),
            ("sigmoid", vec![5], Box::new(|t, x| { let y = t.sigmoid(x); Ok(t.sum(y)) })),
            ("silu", vec![5], Box::new(|t, x| { let y = t.silu(x); Ok(t.sum(y)) })),
            ("selu", vec![6], Box::new(|t, x| { let y = t.selu(x); Ok(t.sum(y)) })),
            ("scale", vec![4], Box::new(|t, x| { let y = t.scale(x, -1.7); Ok(t.sum(y)) })),
            ("softmax", vec![2, 5], Box::new(|t, x| {
                let y = t.softmax(x, 1)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            })),
            ("glu", vec![3, 4], Box::new(|t, x| {
                let y = t.glu(x)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            })),
            ("mean", vec![7], Box::new(|t, x| {
                let y = t.mul(x, x)?;
                Ok(t.mean(y))
            })),
            ("swap_axes", vec![2, 3, 4], Box::new(|t, x| {
                let y = t.swap_axes(x, 1, 2)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            })),
            ("slice_concat", vec![3, 4], Box::new(|t, x| {
                let a = t.slice(x, 1, 0, 2)?;
                let b = t.slice(x, 1, 2, 2)?;
                let y = t.concat(&[b, a], 1)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            })),
            ("broadcast_to", vec![1, 3], Box::new(|t, x| {
                let y = t.broadcast_to(x, &[4, 3])?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            })),
            ("layer_norm", vec![3, 4], Box::new(|t, x| {
                let g = t.leaf(Tensor::new(vec![4], vec![1.1, 0.9, -0.5, 1.3]).unwrap());
                let b = t.leaf(Tensor::new(vec![4], vec![0.1, -0.2, 0.3, 0.0]).unwrap());
                let y = t.layer_norm(x, g, b, 1e-5)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            })),
            ("batch_norm_train", vec![2, 2, 3], Box::new(|t, x| {
                let g = t.leaf(Tensor::new(vec![2], vec![1.2, 0.8]).unwrap());
                let b = t.leaf(Tensor::new(vec![2], vec![-0.1, 0.2]).unwrap());
                let mut rm = Tensor::zeros(&[2]);
                let mut rv = Tensor::full(&[2], 1.0);
                let y = t.batch_norm(x, g, b, &mut rm, &mut rv, 0.1, 1e-5, true)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            })),
            ("batch_norm_eval", vec![2, 2, 3], Box::new(|t, x| {
                let g = t.leaf(Tensor::new(vec![2], vec![1.2, 0.8]).unwrap());
                let b = t.leaf(Tensor::new(vec![2], vec![-0.1, 0.2]).unwrap());
                let mut rm = Tensor::new(vec![2], vec![0.3, -0.4]).unwrap();
                let mut rv = Tensor::new(vec![2], vec![1.5, 0.7]).unwrap();
                let y = t.batch_norm(x, g, b, &mut rm, &mut rv, 0.1, 1e-5, false)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            })),
            ("dropout", vec![4, 3], Box::new(|t, x| {
                // fresh rng per call keeps the mask identical across evals
                let mut r = ChaCha8Rng::seed_from_u64(77);
                let y = t.dropout(x, 0.5, &mut r)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            })),
            ("cross_entropy", vec![3, 2], Box::new(|t, x| {
                t.weighted_cross_entropy(x, &[0, 1, 0], &[1.0, 2.0])
            })),
            ("bspline_basis", vec![4], Box::new(|t, x| {
                let grid = BsplineGrid::uniform(-1.0, 1.0, 5, 3).unwrap();
                let y = t.bspline_basis(x, &grid)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            })),
        ];
        for (name, shape, f) in &cases {
            // keep well inside (-1,1) for the spline case
            let x = if *name == "bspline_basis" {
                Tensor::from_fn(shape, |_| r.random_range(-0.9..0.9))
            } else {
                rand_tensor(shape, &mut r)
            };
            let err = finite_diff_check(f, &x, 1e-5).unwrap();
            assert!(err <= 1e-6, "{name}: max rel err {err}");
        }
    }

    #[test]
    fn conv1d_gradients_match_finite_differences() {
        let mut r = rng(12);
        let mut store = ParamStore::new();
        let x = store.add("x", rand_tensor(&[1, 2, 6], &mut r)).unwrap();
        let w = store.add("w", rand_tensor(&[4, 2, 3], &mut r)).unwrap();
        let b = store.add("b", rand_tensor(&[4], &mut r)).unwrap();
        let f = |tape: &mut Tape, store: &mut ParamStore| {
            let xid = tape.param(store, x);
            let wid = tape.param(store, w);
            let bid = tape.param(store, b);
            let y = tape.conv1d(xid, wid, Some(bid), 1, Padding::Same)?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum(sq))
        };
        let err = finite_diff_check_params(&f, &mut store, &[x, w, b], 1e-5).unwrap();
        assert!(err <= 1e-6, "max rel err {err}");

        // depthwise (groups == channels)
        let mut store = ParamStore::new();
        let x = store.add("x", rand_tensor(&[2, 3, 5], &mut r)).unwrap();
        let w = store.add("w", rand_tensor(&[3, 1, 3], &mut r)).unwrap();
        let f = |tape: &mut Tape, store: &mut ParamStore| {
            let xid = tape.param(store, x);
            let wid = tape.param(store, w);
            let y = tape.conv1d(xid, wid, None, 3, Padding::Same)?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum(sq))
        };
        let err = finite_diff_check_params(&f, &mut store, &[x, w], 1e-5).unwrap();
        assert!(err <= 1e-6, "depthwise: max rel err {err}");
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut tape = Tape::new();
        let mut r = rng(13);
        let x = tape.leaf(Tensor::full(&[3], 2.0));
        let y = tape.dropout(x, 0.0, &mut r).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_scales_surviving_entries() {
        let mut tape = Tape::new();
        let mut r = rng(14);
        let x = tape.leaf(Tensor::full(&[1000], 1.0));
        let y = tape.dropout(x, 0.25, &mut r).unwrap();
        let data = tape.value(y).data();
        let kept = data.iter().filter(|&&v| v != 0.0).count();
        assert!(data.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
        // ~75% kept
        assert!((650..850).contains(&kept), "kept {kept}");
    }

    #[test]
    fn cross_entropy_matches_manual_log_softmax() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap());
        let loss = tape
            .weighted_cross_entropy(logits, &[0, 1], &[1.0, 1.0])
            .unwrap();
        let manual = {
            let l1 = -(1.0f64.exp() / (1.0f64.exp() + (-1.0f64).exp())).ln();
            let l2 = -(2.0f64.exp() / (0.5f64.exp() + 2.0f64.exp())).ln();
            (l1 + l2) / 2.0
        };
        assert!((tape.value(loss).item().unwrap() - manual).abs() <= 1e-12);
    }
}
