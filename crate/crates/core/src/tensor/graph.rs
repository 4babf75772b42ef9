//! Op tape and reverse-mode differentiation.
//!
//! A [`Graph`] in recording mode pushes one node per op, in creation order,
//! which is therefore already topologically sorted. [`Graph::backward`]
//! walks the tape once in reverse, accumulating gradients into per-node
//! buffers and finally into the trainable leaf tensors, then drops the
//! tape. In inference mode the same op methods run the kernels without
//! keeping any history, so sampling does not pay for bookkeeping.
//!
//! Broadcasting in binary elementwise ops is deliberately narrow: operands
//! must have equal shapes, or one side must be a scalar or a trailing
//! suffix of the other's shape. Everything else (per-channel biases, per
//! sample-and-channel biases) has an explicit op.

use super::kernels as k;
use super::{ensure_finite, numel_of, Tensor};
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::sync::Arc;

pub(crate) type NodeId = usize;

enum Op {
    Leaf,
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f32 },
    AddScalar { a: NodeId },
    Matmul { a: NodeId, b: NodeId },
    Bmm { a: NodeId, b: NodeId },
    Permute { a: NodeId, axes: Vec<usize> },
    Reshape { a: NodeId },
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice { a: NodeId, axis: usize, start: usize, len: usize },
    GatherRows { a: NodeId, idx: Arc<Vec<usize>> },
    ScatterRows { rows: NodeId, idx: Arc<Vec<usize>> },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, dims: k::ConvDims },
    Upsample2x { a: NodeId },
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    Silu { a: NodeId },
    Gelu { a: NodeId },
    SoftmaxLast { a: NodeId },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    AddBiasC { x: NodeId, b: NodeId },
    AddBiasNC { x: NodeId, b: NodeId },
}

struct Node {
    op: Op,
    value: Tensor,
    needs: bool,
}

/// Recorded compute tape (or a pass-through context in inference mode).
pub struct Graph {
    nodes: Vec<Node>,
    by_tensor: HashMap<u64, NodeId>,
    recording: bool,
}

enum EwKind {
    Equal,
    /// b's flat index repeats with period `nb`.
    BRepeats(usize),
    /// a's flat index repeats with period `na`.
    ARepeats(usize),
}

fn ew_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, EwKind)> {
    if a == b {
        return Ok((a.to_vec(), EwKind::Equal));
    }
    let (na, nb) = (numel_of(a), numel_of(b));
    if nb == 1 {
        return Ok((a.to_vec(), EwKind::BRepeats(1)));
    }
    if na == 1 {
        return Ok((b.to_vec(), EwKind::ARepeats(1)));
    }
    if a.len() > b.len() && a.ends_with(b) {
        return Ok((a.to_vec(), EwKind::BRepeats(nb)));
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok((b.to_vec(), EwKind::ARepeats(na)));
    }
    Err(Error::shape(
        op,
        format!("shapes {a:?} and {b:?} are not equal, scalar, or suffix-broadcastable"),
    ))
}

/// Sums `g` onto a buffer of `period` elements by flat-index wraparound
/// (the adjoint of suffix broadcasting).
fn reduce_periodic(g: &[f32], period: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; period];
    for (i, &v) in g.iter().enumerate() {
        out[i % period] += v;
    }
    out
}

fn add_assign_opt(slot: &mut Option<Vec<f32>>, src: Vec<f32>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(src) {
                *a += b;
            }
        }
        None => *slot = Some(src),
    }
}

impl Graph {
    pub fn recording() -> Graph {
        Graph {
            nodes: Vec::new(),
            by_tensor: HashMap::new(),
            recording: true,
        }
    }

    pub fn inference() -> Graph {
        Graph {
            nodes: Vec::new(),
            by_tensor: HashMap::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn adopt(&mut self, t: &Tensor) -> NodeId {
        if let Some(&id) = self.by_tensor.get(&t.id()) {
            return id;
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t.clone(),
            needs: t.requires_grad(),
        });
        self.by_tensor.insert(t.id(), id);
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs
    }

    fn push(&mut self, op: Op, value: Tensor, needs: bool) -> Tensor {
        let id = self.nodes.len();
        self.by_tensor.insert(value.id(), id);
        self.nodes.push(Node {
            op,
            value: value.clone(),
            needs,
        });
        value
    }

    fn out(&mut self, op_name: &'static str, data: Vec<f32>, shape: Vec<usize>) -> Result<Tensor> {
        ensure_finite(op_name, &data)?;
        Ok(Tensor::from_parts(data, shape, false))
    }

    // ---- elementwise binary ----

    fn ew(
        &mut self,
        name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f32, f32) -> f32,
        make: impl FnOnce(NodeId, NodeId) -> Op,
    ) -> Result<Tensor> {
        let (shape, kind) = ew_kind(name, a.shape(), b.shape())?;
        let (ad, bd) = (a.data(), b.data());
        let data: Vec<f32> = match kind {
            EwKind::Equal => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            EwKind::BRepeats(nb) => (0..ad.len()).map(|i| f(ad[i], bd[i % nb])).collect(),
            EwKind::ARepeats(na) => (0..bd.len()).map(|i| f(ad[i % na], bd[i])).collect(),
        };
        let out = self.out(name, data, shape)?;
        if self.recording {
            let an = self.adopt(a);
            let bn = self.adopt(b);
            let needs = self.needs(an) || self.needs(bn);
            Ok(self.push(make(an, bn), out, needs))
        } else {
            Ok(out)
        }
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.ew("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.ew("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.ew("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: &Tensor, c: f32) -> Result<Tensor> {
        let data = a.data().iter().map(|&x| x * c).collect();
        let out = self.out("scale", data, a.shape().to_vec())?;
        if self.recording {
            let an = self.adopt(a);
            let needs = self.needs(an);
            Ok(self.push(Op::Scale { a: an, c }, out, needs))
        } else {
            Ok(out)
        }
    }

    pub fn add_scalar(&mut self, a: &Tensor, c: f32) -> Result<Tensor> {
        let data = a.data().iter().map(|&x| x + c).collect();
        let out = self.out("add_scalar", data, a.shape().to_vec())?;
        if self.recording {
            let an = self.adopt(a);
            let needs = self.needs(an);
            Ok(self.push(Op::AddScalar { a: an }, out, needs))
        } else {
            Ok(out)
        }
    }

    // ---- matrix products ----

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::shape(
                "matmul",
                format!("incompatible shapes {ash:?} x {bsh:?}"),
            ));
        }
        let (m, kk, n) = (ash[0], ash[1], bsh[1]);
        let mut data = vec![0.0f32; m * n];
        k::gemm(m, kk, n, a.data(), false, b.data(), false, 0.0, &mut data);
        let out = self.out("matmul", data, vec![m, n])?;
        if self.recording {
            let an = self.adopt(a);
            let bn = self.adopt(b);
            let needs = self.needs(an) || self.needs(bn);
            Ok(self.push(Op::Matmul { a: an, b: bn }, out, needs))
        } else {
            Ok(out)
        }
    }

    /// Batched matmul over matching leading batch dims: [B,m,k] x [B,k,n].
    pub fn bmm(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[1] {
            return Err(Error::shape(
                "bmm",
                format!("incompatible shapes {ash:?} x {bsh:?}"),
            ));
        }
        let (bt, m, kk, n) = (ash[0], ash[1], ash[2], bsh[2]);
        let mut data = vec![0.0f32; bt * m * n];
        for i in 0..bt {
            k::gemm(
                m,
                kk,
                n,
                &a.data()[i * m * kk..(i + 1) * m * kk],
                false,
                &b.data()[i * kk * n..(i + 1) * kk * n],
                false,
                0.0,
                &mut data[i * m * n..(i + 1) * m * n],
            );
        }
        let out = self.out("bmm", data, vec![bt, m, n])?;
        if self.recording {
            let an = self.adopt(a);
            let bn = self.adopt(b);
            let needs = self.needs(an) || self.needs(bn);
            Ok(self.push(Op::Bmm { a: an, b: bn }, out, needs))
        } else {
            Ok(out)
        }
    }

    // ---- movement ----

    pub fn permute(&mut self, a: &Tensor, axes: &[usize]) -> Result<Tensor> {
        let rank = a.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&x| x >= rank || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::shape(
                "permute",
                format!("axes {axes:?} are not a permutation of 0..{rank}"),
            ));
        }
        let (data, shape) = k::permute_copy(a.data(), a.shape(), axes);
        let out = self.out("permute", data, shape)?;
        if self.recording {
            let an = self.adopt(a);
            let needs = self.needs(an);
            Ok(self.push(
                Op::Permute {
                    a: an,
                    axes: axes.to_vec(),
                },
                out,
                needs,
            ))
        } else {
            Ok(out)
        }
    }

    /// 2-d transpose.
    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 {
            return Err(Error::shape(
                "transpose",
                format!("expected rank 2, got {:?}", a.shape()),
            ));
        }
        self.permute(a, &[1, 0])
    }

    /// Swap the last two axes of a rank >= 2 tensor.
    pub fn transpose_last2(&mut self, a: &Tensor) -> Result<Tensor> {
        let r = a.rank();
        if r < 2 {
            return Err(Error::shape("transpose_last2", "rank must be >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != a.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", a.shape(), shape),
            ));
        }
        let out = Tensor::from_parts(a.data().to_vec(), shape.to_vec(), false);
        if self.recording {
            let an = self.adopt(a);
            let needs = self.needs(an);
            Ok(self.push(Op::Reshape { a: an }, out, needs))
        } else {
            Ok(out)
        }
    }

    pub fn concat(&mut self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no parts"));
        }
        let rank = parts[0].rank();
        if axis >= rank {
            return Err(Error::shape("concat", format!("axis {axis} out of range")));
        }
        let mut shape = parts[0].shape().to_vec();
        let mut axis_total = 0;
        for p in parts {
            if p.rank() != rank {
                return Err(Error::shape("concat", "rank mismatch"));
            }
            for d in 0..rank {
                if d != axis && p.shape()[d] != shape[d] {
                    return Err(Error::shape(
                        "concat",
                        format!("shape mismatch at dim {d}: {:?} vs {:?}", p.shape(), shape),
                    ));
                }
            }
            axis_total += p.shape()[axis];
        }
        shape[axis] = axis_total;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0f32; numel_of(&shape)];
        let row = axis_total * inner;
        let mut offset = 0;
        for p in parts {
            let pa = p.shape()[axis];
            for o in 0..outer {
                let src = &p.data()[o * pa * inner..(o + 1) * pa * inner];
                data[o * row + offset..o * row + offset + pa * inner].copy_from_slice(src);
            }
            offset += pa * inner;
        }
        let out = self.out("concat", data, shape)?;
        if self.recording {
            let ids: Vec<NodeId> = parts.iter().map(|p| self.adopt(p)).collect();
            let needs = ids.iter().any(|&i| self.needs(i));
            Ok(self.push(Op::Concat { parts: ids, axis }, out, needs))
        } else {
            Ok(out)
        }
    }

    /// Contiguous slice along `axis`.
    pub fn slice(&mut self, a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let rank = a.rank();
        if axis >= rank || start + len > a.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!(
                    "slice [{start}, {}) on axis {axis} of {:?}",
                    start + len,
                    a.shape()
                ),
            ));
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        let outer: usize = a.shape()[..axis].iter().product();
        let inner: usize = a.shape()[axis + 1..].iter().product();
        let src_row = a.shape()[axis] * inner;
        let mut data = vec![0.0f32; numel_of(&shape)];
        for o in 0..outer {
            let src = &a.data()[o * src_row + start * inner..o * src_row + (start + len) * inner];
            data[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let out = Tensor::from_parts(data, shape, false);
        if self.recording {
            let an = self.adopt(a);
            let needs = self.needs(an);
            Ok(self.push(
                Op::Slice {
                    a: an,
                    axis,
                    start,
                    len,
                },
                out,
                needs,
            ))
        } else {
            Ok(out)
        }
    }

    /// Split into parts of the given sizes along `axis`.
    pub fn split(&mut self, a: &Tensor, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
        if sizes.iter().sum::<usize>() != a.shape().get(axis).copied().unwrap_or(0) {
            return Err(Error::shape(
                "split",
                format!("sizes {sizes:?} do not cover axis {axis} of {:?}", a.shape()),
            ));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &len in sizes {
            parts.push(self.slice(a, axis, start, len)?);
            start += len;
        }
        Ok(parts)
    }

    /// Select rows of a rank >= 1 tensor: out[r] = a[idx[r]]. Indices may
    /// repeat; gradients scatter-add back.
    pub fn gather_rows(&mut self, a: &Tensor, idx: &[usize]) -> Result<Tensor> {
        let m = a.shape().first().copied().unwrap_or(0);
        if a.rank() == 0 {
            return Err(Error::shape("gather_rows", "rank must be >= 1"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::shape(
                "gather_rows",
                format!("index {bad} out of range for {m} rows"),
            ));
        }
        let inner: usize = a.shape()[1..].iter().product();
        let mut shape = a.shape().to_vec();
        shape[0] = idx.len();
        let mut data = vec![0.0f32; idx.len() * inner];
        for (r, &i) in idx.iter().enumerate() {
            data[r * inner..(r + 1) * inner].copy_from_slice(&a.data()[i * inner..(i + 1) * inner]);
        }
        let out = Tensor::from_parts(data, shape, false);
        if self.recording {
            let an = self.adopt(a);
            let needs = self.needs(an);
            Ok(self.push(
                Op::GatherRows {
                    a: an,
                    idx: Arc::new(idx.to_vec()),
                },
                out,
                needs,
            ))
        } else {
            Ok(out)
        }
    }

    /// Embedding lookup: rows of `table` selected by token id.
    pub fn embedding(&mut self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        self.gather_rows(table, ids)
    }

    /// Scatter rows into a zero tensor of `m` rows: out[idx[r]] += rows[r].
    pub fn scatter_rows(&mut self, rows: &Tensor, idx: &[usize], m: usize) -> Result<Tensor> {
        if rows.rank() == 0 || rows.shape()[0] != idx.len() {
            return Err(Error::shape(
                "scatter_rows",
                format!("{} rows vs {} indices", rows.shape().first().unwrap_or(&0), idx.len()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::shape(
                "scatter_rows",
                format!("index {bad} out of range for {m} rows"),
            ));
        }
        let inner: usize = rows.shape()[1..].iter().product();
        let mut shape = rows.shape().to_vec();
        shape[0] = m;
        let mut data = vec![0.0f32; m * inner];
        for (r, &i) in idx.iter().enumerate() {
            for j in 0..inner {
                data[i * inner + j] += rows.data()[r * inner + j];
            }
        }
        let out = Tensor::from_parts(data, shape, false);
        if self.recording {
            let rn = self.adopt(rows);
            let needs = self.needs(rn);
            Ok(self.push(
                Op::ScatterRows {
                    rows: rn,
                    idx: Arc::new(idx.to_vec()),
                },
                out,
                needs,
            ))
        } else {
            Ok(out)
        }
    }

    // ---- structured layers ----

    /// 2-d convolution, NCHW, square 1x1 or 3x3 kernel, same padding,
    /// stride 1 or 2.
    pub fn conv2d(&mut self, x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor> {
        let dims = k::conv_dims(x.shape(), w.shape(), stride)?;
        if b.shape() != [dims.co] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?} does not match {} output channels", b.shape(), dims.co),
            ));
        }
        let data = k::conv2d_fwd(x.data(), w.data(), b.data(), &dims);
        let out = self.out("conv2d", data, vec![dims.n, dims.co, dims.oh, dims.ow])?;
        if self.recording {
            let xn = self.adopt(x);
            let wn = self.adopt(w);
            let bn = self.adopt(b);
            let needs = self.needs(xn) || self.needs(wn) || self.needs(bn);
            Ok(self.push(
                Op::Conv2d {
                    x: xn,
                    w: wn,
                    b: bn,
                    dims,
                },
                out,
                needs,
            ))
        } else {
            Ok(out)
        }
    }

    pub fn upsample2x(&mut self, a: &Tensor) -> Result<Tensor> {
        let sh = a.shape();
        if sh.len() != 4 {
            return Err(Error::shape("upsample2x", format!("expected NCHW, got {sh:?}")));
        }
        let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let data = k::upsample2x_fwd(a.data(), n, c, h, w);
        let out = self.out("upsample2x", data, vec![n, c, 2 * h, 2 * w])?;
        if self.recording {
            let an = self.adopt(a);
            let needs = self.needs(an);
            Ok(self.push(Op::Upsample2x { a: an }, out, needs))
        } else {
            Ok(out)
        }
    }

    /// Group normalization over `[N, C, ...]` with per-channel affine.
    pub fn group_norm(
        &mut self,
        x: &Tensor,
        groups: usize,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f32,
    ) -> Result<Tensor> {
        let sh = x.shape();
        if sh.len() < 2 {
            return Err(Error::shape("group_norm", format!("expected [N, C, ...], got {sh:?}")));
        }
        let (n, c) = (sh[0], sh[1]);
        let s: usize = sh[2..].iter().product();
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(
                "group_norm",
                format!("{groups} groups do not divide {c} channels"),
            ));
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape(
                "group_norm",
                format!("affine params must be [{c}], got {:?} and {:?}", gamma.shape(), beta.shape()),
            ));
        }
        let (data, mean, rstd) =
            k::group_norm_fwd(x.data(), n, c, s, groups, gamma.data(), beta.data(), eps);
        let out = self.out("group_norm", data, sh.to_vec())?;
        if self.recording {
            let xn = self.adopt(x);
            let gn = self.adopt(gamma);
            let bn = self.adopt(beta);
            let needs = self.needs(xn) || self.needs(gn) || self.needs(bn);
            Ok(self.push(
                Op::GroupNorm {
                    x: xn,
                    gamma: gn,
                    beta: bn,
                    groups,
                    mean,
                    rstd,
                },
                out,
                needs,
            ))
        } else {
            Ok(out)
        }
    }

    pub fn silu(&mut self, a: &Tensor) -> Result<Tensor> {
        let data = k::silu_fwd(a.data());
        let out = self.out("silu", data, a.shape().to_vec())?;
        if self.recording {
            let an = self.adopt(a);
            let needs = self.needs(an);
            Ok(self.push(Op::Silu { a: an }, out, needs))
        } else {
            Ok(out)
        }
    }

    pub fn gelu(&mut self, a: &Tensor) -> Result<Tensor> {
        let data = k::gelu_fwd(a.data());
        let out = self.out("gelu", data, a.shape().to_vec())?;
        if self.recording {
            let an = self.adopt(a);
            let needs = self.needs(an);
            Ok(self.push(Op::Gelu { a: an }, out, needs))
        } else {
            Ok(out)
        }
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: &Tensor) -> Result<Tensor> {
        let row = *a.shape().last().ok_or_else(|| {
            Error::shape("softmax", "rank must be >= 1")
        })?;
        if row == 0 {
            return Err(Error::shape("softmax", "empty rows"));
        }
        let data = k::softmax_last_fwd(a.data(), row);
        let out = self.out("softmax", data, a.shape().to_vec())?;
        if self.recording {
            let an = self.adopt(a);
            let needs = self.needs(an);
            Ok(self.push(Op::SoftmaxLast { a: an }, out, needs))
        } else {
            Ok(out)
        }
    }

    pub fn sum_all(&mut self, a: &Tensor) -> Result<Tensor> {
        let s: f64 = a.data().iter().map(|&v| v as f64).sum();
        let out = self.out("sum", vec![s as f32], vec![])?;
        if self.recording {
            let an = self.adopt(a);
            let needs = self.needs(an);
            Ok(self.push(Op::SumAll { a: an }, out, needs))
        } else {
            Ok(out)
        }
    }

    pub fn mean_all(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s: f64 = a.data().iter().map(|&v| v as f64).sum();
        let out = self.out("mean", vec![(s / a.numel() as f64) as f32], vec![])?;
        if self.recording {
            let an = self.adopt(a);
            let needs = self.needs(an);
            Ok(self.push(Op::MeanAll { a: an }, out, needs))
        } else {
            Ok(out)
        }
    }

    /// x[N, C, ...] + b[C], bias per channel.
    pub fn add_bias_c(&mut self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        let sh = x.shape();
        if sh.len() < 2 || b.shape() != [sh[1]] {
            return Err(Error::shape(
                "add_bias_c",
                format!("x {:?} with bias {:?}", sh, b.shape()),
            ));
        }
        let (n, c) = (sh[0], sh[1]);
        let s: usize = sh[2..].iter().product();
        let mut data = x.data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let bv = b.data()[ci];
                for v in &mut data[(ni * c + ci) * s..(ni * c + ci + 1) * s] {
                    *v += bv;
                }
            }
        }
        let out = self.out("add_bias_c", data, sh.to_vec())?;
        if self.recording {
            let xn = self.adopt(x);
            let bn = self.adopt(b);
            let needs = self.needs(xn) || self.needs(bn);
            Ok(self.push(Op::AddBiasC { x: xn, b: bn }, out, needs))
        } else {
            Ok(out)
        }
    }

    /// x[N, C, ...] + b[N, C], bias per sample and channel.
    pub fn add_bias_nc(&mut self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        let sh = x.shape();
        if sh.len() < 2 || b.shape() != [sh[0], sh[1]] {
            return Err(Error::shape(
                "add_bias_nc",
                format!("x {:?} with bias {:?}", sh, b.shape()),
            ));
        }
        let (n, c) = (sh[0], sh[1]);
        let s: usize = sh[2..].iter().product();
        let mut data = x.data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let bv = b.data()[ni * c + ci];
                for v in &mut data[(ni * c + ci) * s..(ni * c + ci + 1) * s] {
                    *v += bv;
                }
            }
        }
        let out = self.out("add_bias_nc", data, sh.to_vec())?;
        if self.recording {
            let xn = self.adopt(x);
            let bn = self.adopt(b);
            let needs = self.needs(xn) || self.needs(bn);
            Ok(self.push(Op::AddBiasNC { x: xn, b: bn }, out, needs))
        } else {
            Ok(out)
        }
    }

    /// Mean squared error over masked cells only: mean of
    /// `((pred - target) * mask)^2` restricted to nonzero mask entries,
    /// counting every channel of a masked cell. The mask broadcasts over
    /// leading axes of `pred`. Returns the loss and the masked element
    /// count; a count of zero yields a constant zero loss.
    pub fn masked_mse(
        &mut self,
        pred: &Tensor,
        target: &Tensor,
        mask: &Tensor,
    ) -> Result<(Tensor, usize)> {
        if pred.shape() != target.shape() {
            return Err(Error::shape(
                "masked_mse",
                format!("pred {:?} vs target {:?}", pred.shape(), target.shape()),
            ));
        }
        let nnz = mask.data().iter().filter(|&&v| v != 0.0).count();
        if pred.numel() % mask.numel().max(1) != 0 {
            return Err(Error::shape(
                "masked_mse",
                format!("mask {:?} does not broadcast over {:?}", mask.shape(), pred.shape()),
            ));
        }
        let count = nnz * (pred.numel() / mask.numel());
        if count == 0 {
            return Ok((Tensor::scalar(0.0), 0));
        }
        let diff = self.sub(pred, target)?;
        let masked = self.mul(&diff, mask)?;
        let sq = self.mul(&masked, &masked)?;
        let total = self.sum_all(&sq)?;
        let loss = self.scale(&total, 1.0 / count as f32)?;
        Ok((loss, count))
    }

    /// x[m, in] . w[in, out] + b[out].
    pub fn linear(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let y = self.matmul(x, w)?;
        self.add(&y, b)
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss. Gradients accumulate onto every
    /// trainable leaf tensor that the loss depends on; the tape is
    /// consumed.
    pub fn backward(self, loss: &Tensor) -> Result<()> {
        if !self.recording {
            return Err(Error::Contract(
                "backward requires a recording graph".into(),
            ));
        }
        let lid = *self.by_tensor.get(&loss.id()).ok_or_else(|| {
            Error::Contract("loss tensor is not a node of this graph".into())
        })?;
        if loss.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", loss.shape()),
            ));
        }
        if !self.nodes[lid].needs {
            return Ok(()); // nothing trainable upstream
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[lid] = Some(vec![1.0]);
        for i in (0..=lid).rev() {
            if !self.nodes[i].needs {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.step_backward(i, &g, &mut grads)?;
            if matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].value.requires_grad() {
                ensure_finite("backward", &g)?;
                self.nodes[i].value.accum_grad(&g);
            }
        }
        Ok(())
    }

    fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn step_backward(
        &self,
        id: NodeId,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    add_assign_opt(&mut grads[*a], reduce_periodic(g, av.numel()));
                }
                if self.needs(*b) {
                    add_assign_opt(&mut grads[*b], reduce_periodic(g, bv.numel()));
                }
            }
            Op::Sub { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    add_assign_opt(&mut grads[*a], reduce_periodic(g, av.numel()));
                }
                if self.needs(*b) {
                    let mut r = reduce_periodic(g, bv.numel());
                    r.iter_mut().for_each(|v| *v = -*v);
                    add_assign_opt(&mut grads[*b], r);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (na, nb) = (av.numel(), bv.numel());
                if self.needs(*a) {
                    let mut da = vec![0.0f32; na];
                    for (i, &gv) in g.iter().enumerate() {
                        da[i % na] += gv * bv.data()[i % nb];
                    }
                    add_assign_opt(&mut grads[*a], da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0f32; nb];
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % nb] += gv * av.data()[i % na];
                    }
                    add_assign_opt(&mut grads[*b], db);
                }
            }
            Op::Scale { a, c } => {
                if self.needs(*a) {
                    add_assign_opt(&mut grads[*a], g.iter().map(|&v| v * c).collect());
                }
            }
            Op::AddScalar { a } => {
                if self.needs(*a) {
                    add_assign_opt(&mut grads[*a], g.to_vec());
                }
            }
            Op::Matmul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, kk) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.needs(*a) {
                    // dA = G . B^T
                    let mut da = vec![0.0f32; m * kk];
                    k::gemm(m, n, kk, g, false, bv.data(), true, 0.0, &mut da);
                    add_assign_opt(&mut grads[*a], da);
                }
                if self.needs(*b) {
                    // dB = A^T . G
                    let mut db = vec![0.0f32; kk * n];
                    k::gemm(kk, m, n, av.data(), true, g, false, 0.0, &mut db);
                    add_assign_opt(&mut grads[*b], db);
                }
            }
            Op::Bmm { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bt, m, kk) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = bv.shape()[2];
                if self.needs(*a) {
                    let mut da = vec![0.0f32; bt * m * kk];
                    for i in 0..bt {
                        k::gemm(
                            m,
                            n,
                            kk,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &bv.data()[i * kk * n..(i + 1) * kk * n],
                            true,
                            0.0,
                            &mut da[i * m * kk..(i + 1) * m * kk],
                        );
                    }
                    add_assign_opt(&mut grads[*a], da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0f32; bt * kk * n];
                    for i in 0..bt {
                        k::gemm(
                            kk,
                            m,
                            n,
                            &av.data()[i * m * kk..(i + 1) * m * kk],
                            true,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            0.0,
                            &mut db[i * kk * n..(i + 1) * kk * n],
                        );
                    }
                    add_assign_opt(&mut grads[*b], db);
                }
            }
            Op::Permute { a, axes } => {
                if self.needs(*a) {
                    let mut inverse = vec![0usize; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    let out_shape = self.nodes[id].value.shape();
                    let (da, _) = k::permute_copy(g, out_shape, &inverse);
                    add_assign_opt(&mut grads[*a], da);
                }
            }
            Op::Reshape { a } => {
                if self.needs(*a) {
                    add_assign_opt(&mut grads[*a], g.to_vec());
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[id].value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let row = out_shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let pa = self.value(p).shape()[*axis];
                    if self.needs(p) {
                        let mut dp = vec![0.0f32; self.value(p).numel()];
                        for o in 0..outer {
                            dp[o * pa * inner..(o + 1) * pa * inner].copy_from_slice(
                                &g[o * row + offset..o * row + offset + pa * inner],
                            );
                        }
                        add_assign_opt(&mut grads[p], dp);
                    }
                    offset += pa * inner;
                }
            }
            Op::Slice {
                a,
                axis,
                start,
                len,
            } => {
                if self.needs(*a) {
                    let src_shape = self.value(*a).shape();
                    let outer: usize = src_shape[..*axis].iter().product();
                    let inner: usize = src_shape[*axis + 1..].iter().product();
                    let src_row = src_shape[*axis] * inner;
                    let mut da = vec![0.0f32; self.value(*a).numel()];
                    for o in 0..outer {
                        da[o * src_row + start * inner..o * src_row + (start + len) * inner]
                            .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    add_assign_opt(&mut grads[*a], da);
                }
            }
            Op::GatherRows { a, idx } => {
                if self.needs(*a) {
                    let inner: usize = self.value(*a).shape()[1..].iter().product();
                    let mut da = vec![0.0f32; self.value(*a).numel()];
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..inner {
                            da[i * inner + j] += g[r * inner + j];
                        }
                    }
                    add_assign_opt(&mut grads[*a], da);
                }
            }
            Op::ScatterRows { rows, idx } => {
                if self.needs(*rows) {
                    let inner: usize = self.value(*rows).shape()[1..].iter().product();
                    let mut dr = vec![0.0f32; self.value(*rows).numel()];
                    for (r, &i) in idx.iter().enumerate() {
                        dr[r * inner..(r + 1) * inner]
                            .copy_from_slice(&g[i * inner..(i + 1) * inner]);
                    }
                    add_assign_opt(&mut grads[*rows], dr);
                }
            }
            Op::Conv2d { x, w, b, dims } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (need_x, need_w, need_b) = (self.needs(*x), self.needs(*w), self.needs(*b));
                if need_x || need_w {
                    let (dx, dw, db) = k::conv2d_bwd(xv.data(), wv.data(), g, dims);
                    if need_x {
                        add_assign_opt(&mut grads[*x], dx);
                    }
                    if need_w {
                        add_assign_opt(&mut grads[*w], dw);
                    }
                    if need_b {
                        add_assign_opt(&mut grads[*b], db);
                    }
                } else if need_b {
                    let spatial = dims.oh * dims.ow;
                    let mut db = vec![0.0f32; dims.co];
                    for s in 0..dims.n {
                        for c in 0..dims.co {
                            db[c] += g[(s * dims.co + c) * spatial..(s * dims.co + c + 1) * spatial]
                                .iter()
                                .sum::<f32>();
                        }
                    }
                    add_assign_opt(&mut grads[*b], db);
                }
            }
            Op::Upsample2x { a } => {
                if self.needs(*a) {
                    let sh = self.value(*a).shape();
                    add_assign_opt(
                        &mut grads[*a],
                        k::upsample2x_bwd(g, sh[0], sh[1], sh[2], sh[3]),
                    );
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let sh = xv.shape();
                let (n, c) = (sh[0], sh[1]);
                let s: usize = sh[2..].iter().product();
                let (dx, dgamma, dbeta) = k::group_norm_bwd(
                    xv.data(),
                    g,
                    n,
                    c,
                    s,
                    *groups,
                    self.value(*gamma).data(),
                    mean,
                    rstd,
                );
                if self.needs(*x) {
                    add_assign_opt(&mut grads[*x], dx);
                }
                if self.needs(*gamma) {
                    add_assign_opt(&mut grads[*gamma], dgamma);
                }
                if self.needs(*beta) {
                    add_assign_opt(&mut grads[*beta], dbeta);
                }
            }
            Op::Silu { a } => {
                if self.needs(*a) {
                    add_assign_opt(&mut grads[*a], k::silu_bwd(self.value(*a).data(), g));
                }
            }
            Op::Gelu { a } => {
                if self.needs(*a) {
                    add_assign_opt(&mut grads[*a], k::gelu_bwd(self.value(*a).data(), g));
                }
            }
            Op::SoftmaxLast { a } => {
                if self.needs(*a) {
                    let y = self.nodes[id].value.data();
                    let row = *self.nodes[id].value.shape().last().unwrap();
                    add_assign_opt(&mut grads[*a], k::softmax_last_bwd(y, g, row));
                }
            }
            Op::SumAll { a } => {
                if self.needs(*a) {
                    let gv = g[0];
                    add_assign_opt(&mut grads[*a], vec![gv; self.value(*a).numel()]);
                }
            }
            Op::MeanAll { a } => {
                if self.needs(*a) {
                    let n = self.value(*a).numel();
                    let gv = g[0] / n as f32;
                    add_assign_opt(&mut grads[*a], vec![gv; n]);
                }
            }
            Op::AddBiasC { x, b } => {
                let sh = self.value(*x).shape();
                let (n, c) = (sh[0], sh[1]);
                let s: usize = sh[2..].iter().product();
                if self.needs(*x) {
                    add_assign_opt(&mut grads[*x], g.to_vec());
                }
                if self.needs(*b) {
                    let mut db = vec![0.0f32; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            db[ci] += g[(ni * c + ci) * s..(ni * c + ci + 1) * s]
                                .iter()
                                .sum::<f32>();
                        }
                    }
                    add_assign_opt(&mut grads[*b], db);
                }
            }
            Op::AddBiasNC { x, b } => {
                let sh = self.value(*x).shape();
                let (n, c) = (sh[0], sh[1]);
                let s: usize = sh[2..].iter().product();
                if self.needs(*x) {
                    add_assign_opt(&mut grads[*x], g.to_vec());
                }
                if self.needs(*b) {
                    let mut db = vec![0.0f32; n * c];
                    for nc in 0..n * c {
                        db[nc] += g[nc * s..(nc + 1) * s].iter().sum::<f32>();
                    }
                    add_assign_opt(&mut grads[*b], db);
                }
            }
        }
        Ok(())
    }
}
