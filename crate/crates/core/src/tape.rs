//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in execution order, so the tape is already a
//! topological order and [`Tape::backward`] walks it back to front. Every
//! operation checks its output for NaN/Inf and fails immediately.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, GroupStats};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<E> {
    Leaf,
    MatMul { a: usize, b: usize },
    MatMulNt { a: usize, b: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRowBias { x: usize, bias: usize },
    AddChannelBias { x: usize, bias: usize },
    Scale { x: usize, s: E },
    Silu { x: usize },
    Conv2d { x: usize, w: usize, bias: Option<usize>, geom: ConvGeom, cols: Vec<Vec<E>> },
    GroupNorm { x: usize, gamma: usize, beta: usize, groups: usize, stats: GroupStats<E> },
    Softmax { x: usize },
    ConcatChannels { parts: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    ToTokens { x: usize },
    FromTokens { x: usize },
    Upsample2x { x: usize },
    SpaceToDepth { x: usize, p: usize },
    DepthToSpace { x: usize, p: usize },
    Gather { table: usize, ids: Vec<usize> },
    Mse { a: usize, b: usize },
    Sum { x: usize },
    Reshape { x: usize },
}

struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
}

/// Operation record plus gradient buffers.
pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
    params: BTreeMap<(u32, ParamId), Var>,
    grad_enabled: bool,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn finite<E: Scalar>(op: &'static str, t: &[E]) -> Result<()> {
    if kernels::all_finite(t) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid<E: Scalar>(x: E) -> E {
    E::ONE / (E::ONE + (-x).exp())
}

fn add_into<E: Scalar>(dst: &mut [E], src: &[E]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: BTreeMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape on which nothing requires a gradient; used for sampling.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.params.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push_node(value, op, requires_grad)
    }

    fn push_node(
        &mut self,
        value: Tensor<E>,
        op: Op<E>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Result<Var> {
        finite("leaf", value.data())?;
        let rg = requires_grad && self.grad_enabled;
        Ok(self.push_node(value, Op::Leaf, rg))
    }

    pub fn constant(&mut self, value: Tensor<E>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Insert a parameter as a leaf. Repeated calls for the same
    /// (store, id) return the same node so gradients accumulate once.
    pub fn param(&mut self, store: &ParamStore<E>, id: ParamId, trainable: bool) -> Var {
        let key = (store.tag(), id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let rg = trainable && self.grad_enabled;
        let v = self.push_node(store.value(id).clone(), Op::Leaf, rg);
        self.params.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![E::ZERO; m * n];
        kernels::gemm_acc(m, k, n, self.val(a).data(), self.val(b).data(), &mut out);
        finite("matmul", &out)?;
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let bt = kernels::transpose(n, k, self.val(b).data());
        let mut out = vec![E::ZERO; m * n];
        kernels::gemm_acc(m, k, n, self.val(a).data(), &bt, &mut out);
        finite("matmul_nt", &out)?;
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMulNt { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).axpy(E::ONE, self.val(b))?;
        finite("add", out.data())?;
        Ok(self.push(out, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        ta.check_same(tb, "mul")?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        finite("mul", out.data())?;
        Ok(self.push(out, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// `x[r×c] + bias[c]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let c = *sx.last().unwrap();
        if self.val(bias).numel() != c {
            return Err(shape_err("add_row_bias", sx, sb));
        }
        let bv = self.val(bias).data();
        let mut data = self.val(x).data().to_vec();
        for row in data.chunks_mut(c) {
            add_into(row, bv);
        }
        finite("add_row_bias", &data)?;
        let out = Tensor::new(self.shape(x), data)?;
        Ok(self.push(out, Op::AddRowBias { x: x.0, bias: bias.0 }, &[x.0, bias.0]))
    }

    /// `x[B,C,...] + bias` where bias holds `C` or `B·C` values, broadcast
    /// over spatial positions.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (b, c) = (sx[0], sx[1]);
        let nb = self.val(bias).numel();
        if sx.len() < 2 || (nb != c && nb != b * c) {
            return Err(shape_err("add_channel_bias", &sx, self.shape(bias)));
        }
        let hw: usize = sx[2..].iter().product();
        let bv = self.val(bias).data();
        let mut data = self.val(x).data().to_vec();
        for (i, plane) in data.chunks_mut(hw).enumerate() {
            let bval = bv[if nb == c { i % c } else { i }];
            plane.iter_mut().for_each(|v| *v += bval);
        }
        finite("add_channel_bias", &data)?;
        let out = Tensor::new(&sx, data)?;
        Ok(self.push(out, Op::AddChannelBias { x: x.0, bias: bias.0 }, &[x.0, bias.0]))
    }

    pub fn scale(&mut self, x: Var, s: E) -> Result<Var> {
        let out = self.val(x).scale(s);
        finite("scale", out.data())?;
        Ok(self.push(out, Op::Scale { x: x.0, s }, &[x.0]))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.val(x).map(|v| v * sigmoid(v));
        finite("silu", out.data())?;
        Ok(self.push(out, Op::Silu { x: x.0 }, &[x.0]))
    }

    /// Cross-correlation of `x[B,C,H,W]` with `w[O,C,kh,kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        if stride == 0 || sw[2].is_multiple_of(2) || sw[3].is_multiple_of(2) {
            return Err(Error::Invalid(alloc::format!(
                "conv2d needs odd kernels and stride >= 1, got {:?} stride {stride}",
                &sw[2..]
            )));
        }
        if let Some(bv) = bias {
            if self.val(bv).numel() != sw[0] {
                return Err(shape_err("conv2d bias", &sw, self.shape(bv)));
            }
        }
        let geom = ConvGeom {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
        };
        if sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        let (o, ho, wo) = (sw[0], geom.out_h(), geom.out_w());
        let krows = geom.col_rows();
        let keep_cols = self.nodes[w.0].requires_grad;
        let mut out = vec![E::ZERO; sx[0] * o * ho * wo];
        let mut saved = Vec::new();
        let per_in = sx[1] * sx[2] * sx[3];
        for bi in 0..sx[0] {
            let xs = &self.val(x).data()[bi * per_in..(bi + 1) * per_in];
            let dst = &mut out[bi * o * ho * wo..(bi + 1) * o * ho * wo];
            if let Some(bv) = bias {
                for (oc, plane) in dst.chunks_mut(ho * wo).enumerate() {
                    let v = self.val(bv).data()[oc];
                    plane.iter_mut().for_each(|p| *p = v);
                }
            }
            let pointwise = geom.kh == 1 && geom.kw == 1 && stride == 1 && pad == 0;
            if pointwise {
                kernels::gemm_acc(o, krows, ho * wo, self.val(w).data(), xs, dst);
                if keep_cols {
                    saved.push(Vec::new());
                }
            } else {
                let cols = kernels::im2col(&geom, xs);
                kernels::gemm_acc(o, krows, ho * wo, self.val(w).data(), &cols, dst);
                if keep_cols {
                    saved.push(cols);
                }
            }
        }
        finite("conv2d", &out)?;
        let t = Tensor::new(&[sx[0], o, ho, wo], out)?;
        let mut inputs = vec![x.0, w.0];
        inputs.extend(bias.map(|b| b.0));
        Ok(self.push(
            t,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                bias: bias.map(|b| b.0),
                geom,
                cols: saved,
            },
            &inputs,
        ))
    }

    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(shape_err("group_norm", &sx, &[]));
        }
        let c = sx[1];
        if groups == 0 || !c.is_multiple_of(groups) {
            return Err(Error::Groups { channels: c, groups });
        }
        if self.val(gamma).numel() != c || self.val(beta).numel() != c {
            return Err(shape_err("group_norm affine", &sx, self.shape(gamma)));
        }
        let mut y = vec![E::ZERO; self.val(x).numel()];
        let stats = kernels::group_norm_forward(
            &sx,
            groups,
            self.val(x).data(),
            self.val(gamma).data(),
            self.val(beta).data(),
            E::from_f64(eps),
            &mut y,
        );
        finite("group_norm", &y)?;
        let t = Tensor::new(&sx, y)?;
        Ok(self.push(
            t,
            Op::GroupNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                groups,
                stats,
            },
            &[x.0, gamma.0, beta.0],
        ))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        Ok(self.softmax_with_lse(x)?.0)
    }

    /// Softmax over the last dimension, also returning each row's logsumexp.
    pub fn softmax_with_lse(&mut self, x: Var) -> Result<(Var, Vec<E>)> {
        let n = *self.shape(x).last().unwrap();
        finite("softmax", self.val(x).data())?;
        let mut y = vec![E::ZERO; self.val(x).numel()];
        let lse = kernels::softmax_rows(n, self.val(x).data(), &mut y);
        finite("softmax", &y)?;
        let t = Tensor::new(self.shape(x), y)?;
        Ok((self.push(t, Op::Softmax { x: x.0 }, &[x.0]), lse))
    }

    /// Concatenate `[B, C_i, H, W]` tensors along channels.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut c_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(shape_err("concat_channels", &first, s));
            }
            c_total += s[1];
        }
        let b = first[0];
        let hw: usize = first[2..].iter().product();
        let mut data = Vec::with_capacity(b * c_total * hw);
        for bi in 0..b {
            for &p in parts {
                let c = self.shape(p)[1];
                data.extend_from_slice(&self.val(p).data()[bi * c * hw..(bi + 1) * c * hw]);
            }
        }
        let mut shape = first.clone();
        shape[1] = c_total;
        let t = Tensor::new(&shape, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(t, Op::ConcatChannels { parts: ids.clone() }, &ids))
    }

    /// Stack 2-D matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0])[1];
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(shape_err("concat_rows", self.shape(parts[0]), s));
            }
            rows += s[0];
            data.extend_from_slice(self.val(p).data());
        }
        let t = Tensor::new(&[rows, cols], data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(t, Op::ConcatRows { parts: ids.clone() }, &ids))
    }

    /// Join 2-D matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0])[0];
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(shape_err("concat_cols", self.shape(parts[0]), s));
            }
            total += s[1];
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.shape(p)[1];
                data.extend_from_slice(&self.val(p).data()[r * c..(r + 1) * c]);
            }
        }
        let t = Tensor::new(&[rows, total], data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(t, Op::ConcatCols { parts: ids.clone() }, &ids))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || len == 0 || start + len > s[0] {
            return Err(shape_err("slice_rows", &s, &[start, len]));
        }
        let data = self.val(x).data()[start * s[1]..(start + len) * s[1]].to_vec();
        let t = Tensor::new(&[len, s[1]], data)?;
        Ok(self.push(t, Op::SliceRows { x: x.0, start }, &[x.0]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(shape_err("slice_cols", &s, &[start, len]));
        }
        let src = self.val(x).data();
        let mut data = Vec::with_capacity(s[0] * len);
        for r in 0..s[0] {
            data.extend_from_slice(&src[r * s[1] + start..r * s[1] + start + len]);
        }
        let t = Tensor::new(&[s[0], len], data)?;
        Ok(self.push(t, Op::SliceCols { x: x.0, start }, &[x.0]))
    }

    /// `[1, C, H, W]` feature map to a `[H·W, C]` token matrix.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[0] != 1 {
            return Err(shape_err("to_tokens", &s, &[1]));
        }
        let (c, hw) = (s[1], s[2] * s[3]);
        let data = kernels::transpose(c, hw, self.val(x).data());
        let t = Tensor::new(&[hw, c], data)?;
        Ok(self.push(t, Op::ToTokens { x: x.0 }, &[x.0]))
    }

    /// Inverse of [`Tape::to_tokens`].
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != h * w {
            return Err(shape_err("from_tokens", &s, &[h, w]));
        }
        let c = s[1];
        let data = kernels::transpose(h * w, c, self.val(x).data());
        let t = Tensor::new(&[1, c, h, w], data)?;
        Ok(self.push(t, Op::FromTokens { x: x.0 }, &[x.0]))
    }

    /// Nearest-neighbour 2× upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("upsample2x", &s, &[]));
        }
        let (h, w) = (s[2], s[3]);
        let src = self.val(x).data();
        let mut data = vec![E::ZERO; src.len() * 4];
        for (pi, plane) in src.chunks(h * w).enumerate() {
            let dst = &mut data[pi * 4 * h * w..(pi + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::new(&[s[0], s[1], 2 * h, 2 * w], data)?;
        Ok(self.push(t, Op::Upsample2x { x: x.0 }, &[x.0]))
    }

    /// Rearrange `p×p` pixel blocks into channels: `[B,C,H,W] -> [B,C·p²,H/p,W/p]`.
    pub fn space_to_depth(&mut self, x: Var, p: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || p == 0 || !s[2].is_multiple_of(p) || !s[3].is_multiple_of(p) {
            return Err(shape_err("space_to_depth", &s, &[p]));
        }
        if p == 1 {
            return self.reshape(x, &s);
        }
        let data = space_to_depth_raw(&s, p, self.val(x).data(), false);
        let t = Tensor::new(&[s[0], s[1] * p * p, s[2] / p, s[3] / p], data)?;
        Ok(self.push(t, Op::SpaceToDepth { x: x.0, p }, &[x.0]))
    }

    /// Inverse of [`Tape::space_to_depth`].
    pub fn depth_to_space(&mut self, x: Var, p: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || p == 0 || !s[1].is_multiple_of(p * p) {
            return Err(shape_err("depth_to_space", &s, &[p]));
        }
        if p == 1 {
            return self.reshape(x, &s);
        }
        let out_shape = [s[0], s[1] / (p * p), s[2] * p, s[3] * p];
        let data = space_to_depth_raw(&out_shape, p, self.val(x).data(), true);
        let t = Tensor::new(&out_shape, data)?;
        Ok(self.push(t, Op::DepthToSpace { x: x.0, p }, &[x.0]))
    }

    /// Select rows of `table[V×D]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || ids.is_empty() || ids.iter().any(|&i| i >= s[0]) {
            return Err(Error::Invalid(alloc::format!(
                "gather_rows: ids {ids:?} out of range for table {s:?}"
            )));
        }
        let d = s[1];
        let src = self.val(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(&[ids.len(), d], data)?;
        Ok(self.push(
            t,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table.0],
        ))
    }

    /// Mean squared error, a scalar `[1]`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        ta.check_same(tb, "mse")?;
        let n = E::from_usize(ta.numel());
        let mut acc = E::ZERO;
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            let d = x - y;
            acc += d * d;
        }
        let loss = acc / n;
        finite("mse", &[loss])?;
        Ok(self.push(Tensor::scalar(loss), Op::Mse { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut acc = E::ZERO;
        for &v in self.val(x).data() {
            acc += v;
        }
        Ok(self.push(Tensor::scalar(acc), Op::Sum { x: x.0 }, &[x.0]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape { x: x.0 }, &[x.0]))
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.val(loss).numel() != 1 {
            return Err(shape_err("backward", self.shape(loss), &[1]));
        }
        self.backward_with(loss, Tensor::scalar(E::ONE))
    }

    /// Backpropagate an explicit upstream gradient from `out`.
    pub fn backward_with(&mut self, out: Var, seed: Tensor<E>) -> Result<()> {
        self.val(out).check_same(&seed, "backward seed")?;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[out.0] = Some(seed.into_data());
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn grad_buf(&mut self, i: usize) -> &mut Vec<E> {
        let n = self.nodes[i].value.numel();
        self.grads[i].get_or_insert_with(|| vec![E::ZERO; n])
    }

    fn acc(&mut self, i: usize, src: &[E]) {
        if self.wants(i) {
            add_into(self.grad_buf(i), src);
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[E]) {
        // Ops are moved out temporarily so saved data can be read while the
        // gradient buffers of other nodes are mutated.
        let op = core::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a].value.shape()[0], self.nodes[a].value.shape()[1]);
                let n = self.nodes[b].value.shape()[1];
                if self.wants(a) {
                    let bt = kernels::transpose(k, n, self.nodes[b].value.data());
                    let mut da = vec![E::ZERO; m * k];
                    kernels::gemm_acc(m, n, k, g, &bt, &mut da);
                    self.acc(a, &da);
                }
                if self.wants(b) {
                    let at = kernels::transpose(m, k, self.nodes[a].value.data());
                    let mut db = vec![E::ZERO; k * n];
                    kernels::gemm_acc(k, m, n, &at, g, &mut db);
                    self.acc(b, &db);
                }
            }
            Op::MatMulNt { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a].value.shape()[0], self.nodes[a].value.shape()[1]);
                let n = self.nodes[b].value.shape()[0];
                if self.wants(a) {
                    let mut da = vec![E::ZERO; m * k];
                    kernels::gemm_acc(m, n, k, g, self.nodes[b].value.data(), &mut da);
                    self.acc(a, &da);
                }
                if self.wants(b) {
                    let gt = kernels::transpose(m, n, g);
                    let mut db = vec![E::ZERO; n * k];
                    kernels::gemm_acc(n, m, k, &gt, self.nodes[a].value.data(), &mut db);
                    self.acc(b, &db);
                }
            }
            Op::Add { a, b } => {
                self.acc(*a, g);
                self.acc(*b, g);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.wants(a) {
                    let d: Vec<E> = g
                        .iter()
                        .zip(self.nodes[b].value.data())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    self.acc(a, &d);
                }
                if self.wants(b) {
                    let d: Vec<E> = g
                        .iter()
                        .zip(self.nodes[a].value.data())
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    self.acc(b, &d);
                }
            }
            Op::AddRowBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                self.acc(x, g);
                if self.wants(bias) {
                    let c = self.nodes[bias].value.numel();
                    let mut db = vec![E::ZERO; c];
                    for row in g.chunks(c) {
                        add_into(&mut db, row);
                    }
                    self.acc(bias, &db);
                }
            }
            Op::AddChannelBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                self.acc(x, g);
                if self.wants(bias) {
                    let s = self.nodes[x].value.shape();
                    let c = s[1];
                    let hw: usize = s[2..].iter().product();
                    let nb = self.nodes[bias].value.numel();
                    let mut db = vec![E::ZERO; nb];
                    for (pi, plane) in g.chunks(hw).enumerate() {
                        let mut s = E::ZERO;
                        for &v in plane {
                            s += v;
                        }
                        db[if nb == c { pi % c } else { pi }] += s;
                    }
                    self.acc(bias, &db);
                }
            }
            Op::Scale { x, s } => {
                let s = *s;
                let d: Vec<E> = g.iter().map(|&v| v * s).collect();
                self.acc(*x, &d);
            }
            Op::Silu { x } => {
                let d: Vec<E> = g
                    .iter()
                    .zip(self.nodes[*x].value.data())
                    .map(|(&gv, &xv)| {
                        let sg = sigmoid(xv);
                        gv * sg * (E::ONE + xv * (E::ONE - sg))
                    })
                    .collect();
                self.acc(*x, &d);
            }
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                cols,
            } => self.backprop_conv(*x, *w, *bias, geom, cols, g),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let shape = self.nodes[x].value.shape().to_vec();
                let mut dx = self.wants(x).then(|| vec![E::ZERO; self.nodes[x].value.numel()]);
                let mut dgam = self.wants(gamma).then(|| vec![E::ZERO; shape[1]]);
                let mut dbet = self.wants(beta).then(|| vec![E::ZERO; shape[1]]);
                kernels::group_norm_backward(
                    &shape,
                    *groups,
                    self.nodes[x].value.data(),
                    self.nodes[gamma].value.data(),
                    stats,
                    g,
                    dx.as_deref_mut(),
                    dgam.as_deref_mut(),
                    dbet.as_deref_mut(),
                );
                if let Some(d) = dx {
                    self.acc(x, &d);
                }
                if let Some(d) = dgam {
                    self.acc(gamma, &d);
                }
                if let Some(d) = dbet {
                    self.acc(beta, &d);
                }
            }
            Op::Softmax { x } => {
                let y = self.nodes[i].value.data();
                let n = *self.nodes[i].value.shape().last().unwrap();
                let mut d = vec![E::ZERO; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot = kernels::lane_dot(gr, yr);
                    for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv = yv * (gv - dot);
                    }
                }
                self.acc(*x, &d);
            }
            Op::ConcatChannels { parts } => {
                let s = self.nodes[i].value.shape().to_vec();
                let (b, c_total) = (s[0], s[1]);
                let hw: usize = s[2..].iter().product();
                let mut off = 0;
                for &p in parts {
                    let c = self.nodes[p].value.shape()[1];
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(b * c * hw);
                        for bi in 0..b {
                            let start = (bi * c_total + off) * hw;
                            d.extend_from_slice(&g[start..start + c * hw]);
                        }
                        self.acc(p, &d);
                    }
                    off += c;
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p].value.numel();
                    self.acc(p, &g[off..off + n]);
                    off += n;
                }
            }
            Op::ConcatCols { parts } => {
                let s = self.nodes[i].value.shape();
                let (rows, total) = (s[0], s[1]);
                let mut off = 0;
                for &p in parts {
                    let c = self.nodes[p].value.shape()[1];
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + off..r * total + off + c]);
                        }
                        self.acc(p, &d);
                    }
                    off += c;
                }
            }
            Op::SliceRows { x, start } => {
                let (x, start) = (*x, *start);
                if self.wants(x) {
                    let cols = self.nodes[x].value.shape()[1];
                    let buf = self.grad_buf(x);
                    add_into(&mut buf[start * cols..start * cols + g.len()], g);
                }
            }
            Op::SliceCols { x, start } => {
                let (x, start) = (*x, *start);
                if self.wants(x) {
                    let cols = self.nodes[x].value.shape()[1];
                    let len = self.nodes[i].value.shape()[1];
                    let buf = self.grad_buf(x);
                    for (r, gr) in g.chunks(len).enumerate() {
                        add_into(&mut buf[r * cols + start..r * cols + start + len], gr);
                    }
                }
            }
            Op::ToTokens { x } => {
                let s = self.nodes[i].value.shape();
                let d = kernels::transpose(s[0], s[1], g);
                self.acc(*x, &d);
            }
            Op::FromTokens { x } => {
                let s = self.nodes[*x].value.shape();
                let d = kernels::transpose(s[1], s[0], g);
                self.acc(*x, &d);
            }
            Op::Upsample2x { x } => {
                let x = *x;
                if self.wants(x) {
                    let s = self.nodes[x].value.shape();
                    let (h, w) = (s[2], s[3]);
                    let mut d = vec![E::ZERO; self.nodes[x].value.numel()];
                    for (pi, plane) in d.chunks_mut(h * w).enumerate() {
                        let src = &g[pi * 4 * h * w..(pi + 1) * 4 * h * w];
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                plane[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                            }
                        }
                    }
                    self.acc(x, &d);
                }
            }
            Op::SpaceToDepth { x, p } => {
                let s = self.nodes[*x].value.shape().to_vec();
                let d = space_to_depth_raw(&s, *p, g, true);
                self.acc(*x, &d);
            }
            Op::DepthToSpace { x, p } => {
                let s = self.nodes[i].value.shape().to_vec();
                let d = space_to_depth_raw(&s, *p, g, false);
                self.acc(*x, &d);
            }
            Op::Gather { table, ids } => {
                let table = *table;
                if self.wants(table) {
                    let d = self.nodes[table].value.shape()[1];
                    let buf = self.grad_buf(table);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut buf[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Mse { a, b } => {
                let (a, b) = (*a, *b);
                let n = E::from_usize(self.nodes[a].value.numel());
                let k = g[0] * E::from_f64(2.0) / n;
                let d: Vec<E> = self.nodes[a]
                    .value
                    .data()
                    .iter()
                    .zip(self.nodes[b].value.data())
                    .map(|(&x, &y)| k * (x - y))
                    .collect();
                self.acc(a, &d);
                if self.wants(b) {
                    let nd: Vec<E> = d.iter().map(|&v| -v).collect();
                    self.acc(b, &nd);
                }
            }
            Op::Sum { x } => {
                let n = self.nodes[*x].value.numel();
                let d = vec![g[0]; n];
                self.acc(*x, &d);
            }
            Op::Reshape { x } => self.acc(*x, g),
        }
        self.nodes[i].op = op;
    }

    fn backprop_conv(
        &mut self,
        x: usize,
        w: usize,
        bias: Option<usize>,
        geom: &ConvGeom,
        cols: &[Vec<E>],
        g: &[E],
    ) {
        let sw = self.nodes[w].value.shape().to_vec();
        let o = sw[0];
        let krows = geom.col_rows();
        let howo = geom.out_h() * geom.out_w();
        let batch = self.nodes[x].value.shape()[0];
        let per_in = geom.channels * geom.height * geom.width;
        let pointwise = geom.kh == 1 && geom.kw == 1 && geom.stride == 1 && geom.pad == 0;
        if let Some(bi) = bias {
            if self.wants(bi) {
                let mut db = vec![E::ZERO; o];
                for (pi, plane) in g.chunks(howo).enumerate() {
                    let mut s = E::ZERO;
                    for &v in plane {
                        s += v;
                    }
                    db[pi % o] += s;
                }
                self.acc(bi, &db);
            }
        }
        if self.wants(w) {
            let mut dw = vec![E::ZERO; o * krows];
            for b in 0..batch {
                let gb = &g[b * o * howo..(b + 1) * o * howo];
                let src: &[E] = if pointwise {
                    &self.nodes[x].value.data()[b * per_in..(b + 1) * per_in]
                } else {
                    &cols[b]
                };
                let ct = kernels::transpose(krows, howo, src);
                kernels::gemm_acc(o, howo, krows, gb, &ct, &mut dw);
            }
            self.acc(w, &dw);
        }
        if self.wants(x) {
            let wt = kernels::transpose(o, krows, self.nodes[w].value.data());
            let mut dx = vec![E::ZERO; batch * per_in];
            for b in 0..batch {
                let gb = &g[b * o * howo..(b + 1) * o * howo];
                let dst = &mut dx[b * per_in..(b + 1) * per_in];
                if pointwise {
                    kernels::gemm_acc(krows, o, howo, &wt, gb, dst);
                } else {
                    let mut dcols = vec![E::ZERO; krows * howo];
                    kernels::gemm_acc(krows, o, howo, &wt, gb, &mut dcols);
                    kernels::col2im_acc(geom, &dcols, dst);
                }
            }
            self.acc(x, &dx);
        }
    }

    /// Add this tape's gradients for parameters of `store` into its buffers.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<E>) {
        for (&(tag, id), &v) in &self.params {
            if tag != store.tag() {
                continue;
            }
            if let Some(g) = self.grad(v) {
                add_into(store.grad_mut(id), g);
            }
        }
    }
}

/// Shared index map for space-to-depth and its inverse. `shape` is always the
/// spatial (un-packed) shape `[B, C, H, W]`; `inverse` selects the direction.
fn space_to_depth_raw<E: Scalar>(shape: &[usize], p: usize, src: &[E], inverse: bool) -> Vec<E> {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (ho, wo) = (h / p, w / p);
    let mut out = vec![E::ZERO; src.len()];
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let spatial = ((bi * c + ci) * h + y) * w + x;
                    let oc = ci * p * p + (y % p) * p + (x % p);
                    let packed = ((bi * c * p * p + oc) * ho + y / p) * wo + x / p;
                    if inverse {
                        out[spatial] = src[packed];
                    } else {
                        out[packed] = src[spatial];
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_small_product() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
        let m = tape.constant(t(&[2, 2], &[3., 4., 5., 6.])).unwrap();
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[3., 4., 5., 6.]);
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let b = tape.constant(t(&[2, 1], &[5., 6.])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[17., 39.]);
        let z = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let zz = tape.matmul(a, z).unwrap();
        assert!(tape.value(zz).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        match tape.matmul(a, b) {
            Err(Error::Shape { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_small_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0., 0., 0.])).unwrap();
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = tape.constant(t(&[1], &[42.0])).unwrap();
        let y = tape.softmax(s).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0]);
    }

    #[test]
    fn non_finite_is_reported() {
        let mut tape = Tape::<f32>::new();
        assert!(matches!(
            tape.constant(Tensor::full(&[2], f32::NAN)),
            Err(Error::NonFinite { .. })
        ));
        let big = tape.constant(Tensor::full(&[2], 3.0e38)).unwrap();
        assert!(matches!(tape.add(big, big), Err(Error::NonFinite { op: "add" })));
    }

    #[test]
    fn conv_delta_kernel_and_zero_weights() {
        let mut tape = Tape::<f64>::new();
        let xv: Vec<f64> = (0..2 * 4 * 5).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = tape.constant(t(&[1, 2, 4, 5], &xv)).unwrap();
        let mut wv = vec![0.0; 2 * 2 * 9];
        wv[4] = 1.0; // out 0 <- in 0 center
        wv[9 * 3 + 4] = 1.0; // out 1 <- in 1 center
        let w = tape.constant(t(&[2, 2, 3, 3], &wv)).unwrap();
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(tape.value(y).data(), &xv[..]);
        let wz = tape.constant(Tensor::zeros(&[3, 2, 3, 3])).unwrap();
        let yz = tape.conv2d(x, wz, None, 1, 1).unwrap();
        assert!(tape.value(yz).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn group_norm_rejects_indivisible_channels() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 6, 2, 2])).unwrap();
        let g = tape.constant(Tensor::full(&[6], 1.0)).unwrap();
        let b = tape.constant(Tensor::zeros(&[6])).unwrap();
        assert!(matches!(
            tape.group_norm(x, g, b, 4, 1e-5),
            Err(Error::Groups { channels: 6, groups: 4 })
        ));
    }

    #[test]
    fn space_to_depth_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let xv: Vec<f64> = (0..2 * 3 * 4 * 6).map(|i| i as f64).collect();
        let x = tape.constant(t(&[2, 3, 4, 6], &xv)).unwrap();
        let d = tape.space_to_depth(x, 2).unwrap();
        assert_eq!(tape.shape(d), &[2, 12, 2, 3]);
        // channel (c=0, dy=0, dx=1) at (0,0) is pixel (0, 1) of channel 0
        assert_eq!(tape.value(d).data()[6], 1.0);
        let back = tape.depth_to_space(d, 2).unwrap();
        assert_eq!(tape.value(back).data(), &xv[..]);
    }

    #[test]
    fn param_leaves_are_shared_and_grads_accumulate() {
        let mut store = ParamStore::<f64>::new(3);
        let id = store.add("w", t(&[2], &[1.5, -2.0]));
        let mut tape = Tape::new();
        let a = tape.param(&store, id, true);
        let b = tape.param(&store, id, true);
        assert_eq!(a, b);
        let prod = tape.mul(a, b).unwrap();
        let s = tape.sum(prod).unwrap();
        tape.backward(s).unwrap();
        tape.accumulate_param_grads(&mut store);
        assert_eq!(store.grad(id), &[3.0, -4.0]);
        tape.accumulate_param_grads(&mut store);
        assert_eq!(store.grad(id), &[6.0, -8.0]);
    }
}
