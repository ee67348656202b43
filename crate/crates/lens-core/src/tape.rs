//! Reverse-mode differentiation over a linear operation tape.
//!
//! A forward pass records every operation into the tape; `backward` replays
//! the records in reverse and accumulates gradients additively across fan-out.
//! A fresh tape starts empty and is rebuilt for every forward pass; parameters
//! live outside the tape (see `params`) and are registered as leaves.
//!
//! All ops produce finite values by contract: any NaN/Inf output is reported
//! as an error rather than propagated.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Bmm { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Permute { a: Var, perm: Vec<usize> },
    Reshape { a: Var },
    Sigmoid { a: Var },
    Relu { a: Var },
    LayerNorm { a: Var, gamma: Var, beta: Var, eps: f64 },
    SoftmaxMasked { a: Var, mask: Vec<bool>, cols: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    SliceAxis { a: Var, axis: usize, start: usize, end: usize },
    SumAxis { a: Var, axis: usize },
    MeanAll { a: Var },
    GatherRows { table: Var, ids: Vec<usize> },
    RightAlignShift { a: Var, valid: Vec<usize> },
    BceWithLogits { logits: Var, labels: Vec<f64> },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

// ── Raw kernels ──────────────────────────────────────────────────────

/// C[m,n] = A[m,k] @ B[k,n], row-major, ikj order.
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

/// C[m,k] = A[m,n] @ B[k,n]^T.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut dot = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                dot += av * bv;
            }
            out[i * k + p] = dot;
        }
    }
    out
}

/// C[k,n] = A[m,k]^T @ B[m,n].
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let orow = &mut out[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

// ── Broadcasting helpers ─────────────────────────────────────────────

fn broadcast_shapes(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for d in 0..ndim {
        let da = if d < ndim - a.len() { 1 } else { a[d - (ndim - a.len())] };
        let db = if d < ndim - b.len() { 1 } else { b[d - (ndim - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(CoreError::ShapeMismatch {
                expected: format!("{a:?}"),
                actual: format!("{b:?}"),
                op,
            });
        }
        out[d] = da.max(db);
    }
    Ok(out)
}

/// Broadcast layout of `small` against `big` when the broadcast dims form
/// one contiguous run: big decomposes into (outer, rep, inner) blocks with
/// the small operand indexed by (outer, inner) only. This covers every hot
/// pattern in the model (trailing bias vectors, [B,L,1] masks, per-head
/// shared bias) and falls back to the odometer walk otherwise.
fn contiguous_broadcast(small: &[usize], big: &[usize]) -> Option<(usize, usize, usize)> {
    let ndim = big.len();
    let mut padded = vec![1usize; ndim];
    padded[ndim - small.len()..].copy_from_slice(small);
    let mut lo = ndim;
    let mut hi = 0;
    for d in 0..ndim {
        if padded[d] != big[d] {
            if padded[d] != 1 {
                return None;
            }
            lo = lo.min(d);
            hi = hi.max(d + 1);
        }
    }
    if lo >= hi {
        return Some((1, 1, big.iter().product()));
    }
    // A non-broadcast dim strictly inside the run breaks contiguity.
    for d in lo..hi {
        if padded[d] != 1 {
            return None;
        }
    }
    let outer = big[..lo].iter().product();
    let rep = big[lo..hi].iter().product();
    let inner = big[hi..].iter().product();
    Some((outer, rep, inner))
}

/// Expand `data` of `shape` to `out_shape` (right-aligned broadcast).
fn expand_to(data: &[f64], shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    if shape == out_shape {
        return data.to_vec();
    }
    let numel: usize = out_shape.iter().product();
    let mut out = vec![0.0; numel];
    if let Some((outer, rep, inner)) = contiguous_broadcast(shape, out_shape) {
        for o in 0..outer {
            let src = &data[o * inner..(o + 1) * inner];
            for r in 0..rep {
                let base = (o * rep + r) * inner;
                out[base..base + inner].copy_from_slice(src);
            }
        }
        return out;
    }
    expand_to_odometer(data, shape, out_shape, &mut out);
    out
}

fn expand_to_odometer(data: &[f64], shape: &[usize], out_shape: &[usize], out: &mut [f64]) {
    let ndim = out_shape.len();
    let mut padded = vec![1usize; ndim];
    padded[ndim - shape.len()..].copy_from_slice(shape);
    // Strides into the source, 0 on broadcast dims.
    let mut strides = vec![0usize; ndim];
    let mut acc = 1;
    for d in (0..ndim).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    let mut coords = vec![0usize; ndim];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = data[src];
        // odometer increment
        for d in (0..ndim).rev() {
            coords[d] += 1;
            src += strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * out_shape[d];
            coords[d] = 0;
        }
    }
}

/// Sum `grad` of `grad_shape` down to `target_shape` (transpose of broadcast).
fn reduce_to(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let target_numel: usize = target_shape.iter().product();
    let mut out = vec![0.0; target_numel];
    if let Some((outer, rep, inner)) = contiguous_broadcast(target_shape, grad_shape) {
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for r in 0..rep {
                let base = (o * rep + r) * inner;
                for (d, &g) in dst.iter_mut().zip(&grad[base..base + inner]) {
                    *d += g;
                }
            }
        }
        return out;
    }
    let ndim = grad_shape.len();
    let mut padded = vec![1usize; ndim];
    padded[ndim - target_shape.len()..].copy_from_slice(target_shape);
    let mut strides = vec![0usize; ndim];
    let mut acc = 1;
    for d in (0..ndim).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    let mut coords = vec![0usize; ndim];
    let mut dst = 0usize;
    for &g in grad {
        out[dst] += g;
        for d in (0..ndim).rev() {
            coords[d] += 1;
            dst += strides[d];
            if coords[d] < grad_shape[d] {
                break;
            }
            dst -= strides[d] * grad_shape[d];
            coords[d] = 0;
        }
    }
    out
}

/// Fused elementwise op against a broadcast operand, avoiding the expanded
/// temporary on the contiguous fast path.
fn zip_broadcast(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    if a_shape == out_shape && b_shape == out_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    if a_shape == out_shape {
        if let Some((outer, rep, inner)) = contiguous_broadcast(b_shape, out_shape) {
            let mut out = vec![0.0; a.len()];
            for o in 0..outer {
                let bs = &b[o * inner..(o + 1) * inner];
                for r in 0..rep {
                    let base = (o * rep + r) * inner;
                    for i in 0..inner {
                        out[base + i] = f(a[base + i], bs[i]);
                    }
                }
            }
            return out;
        }
    }
    let ea = expand_to(a, a_shape, out_shape);
    let eb = expand_to(b, b_shape, out_shape);
    ea.iter().zip(&eb).map(|(&x, &y)| f(x, y)).collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor { shape: self.nodes[v.0].shape.clone(), data: self.nodes[v.0].data.clone() }
    }

    /// Gradient of the last `backward` with respect to `v`; zeros if the node
    /// was not reached.
    pub fn grad(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor { shape: self.nodes[v.0].shape.clone(), data: g.clone() },
            None => Tensor::zeros(&self.nodes[v.0].shape),
        }
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_unchecked(t.data.clone(), t.shape.clone(), Op::Leaf)
    }

    /// Leaf for non-learnable inputs. Identical to `leaf`; the name marks intent.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push_unchecked(vec![v], vec![], Op::Leaf)
    }

    fn push_unchecked(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { data, shape, op });
        self.grads.push(None);
        Var(id)
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, name: &'static str) -> Result<Var> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite { op: name });
        }
        Ok(self.push_unchecked(data, shape, op))
    }

    // ── Elementwise / broadcast ──────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out_shape = broadcast_shapes(&self.nodes[a.0].shape, &self.nodes[b.0].shape, "add")?;
        let data = zip_broadcast(
            &self.nodes[a.0].data,
            &self.nodes[a.0].shape,
            &self.nodes[b.0].data,
            &self.nodes[b.0].shape,
            &out_shape,
            |x, y| x + y,
        );
        self.push(data, out_shape, Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out_shape = broadcast_shapes(&self.nodes[a.0].shape, &self.nodes[b.0].shape, "sub")?;
        let data = zip_broadcast(
            &self.nodes[a.0].data,
            &self.nodes[a.0].shape,
            &self.nodes[b.0].data,
            &self.nodes[b.0].shape,
            &out_shape,
            |x, y| x - y,
        );
        self.push(data, out_shape, Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out_shape = broadcast_shapes(&self.nodes[a.0].shape, &self.nodes[b.0].shape, "mul")?;
        let data = zip_broadcast(
            &self.nodes[a.0].data,
            &self.nodes[a.0].shape,
            &self.nodes[b.0].data,
            &self.nodes[b.0].shape,
            &out_shape,
            |x, y| x * y,
        );
        self.push(data, out_shape, Op::Mul { a, b }, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(data, shape, Op::Scale { a, c }, "scale")
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CoreError::ShapeMismatch {
                expected: format!("{sa:?} x [k,n] with k={}", sa.last().copied().unwrap_or(0)),
                actual: format!("{sb:?}"),
                op: "matmul",
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_nn(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        self.push(data, vec![m, n], Op::Matmul { a, b, m, k, n }, "matmul")
    }

    /// Batched matmul: [B,m,k] x [B,k,n] -> [B,m,n].
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(CoreError::ShapeMismatch {
                expected: format!("{sa:?} x [B,k,n] batched"),
                actual: format!("{sb:?}"),
                op: "bmm",
            });
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = Vec::with_capacity(batch * m * n);
        for bi in 0..batch {
            let ab = &self.nodes[a.0].data[bi * m * k..(bi + 1) * m * k];
            let bb = &self.nodes[b.0].data[bi * k * n..(bi + 1) * k * n];
            data.extend_from_slice(&matmul_nn(ab, bb, m, k, n));
        }
        self.push(data, vec![batch, m, n], Op::Bmm { a, b, batch, m, k, n }, "bmm")
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = &self.nodes[a.0].shape;
        if perm.len() != shape.len() {
            return Err(CoreError::ShapeMismatch {
                expected: format!("permutation of {} axes", shape.len()),
                actual: format!("{perm:?}"),
                op: "permute",
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&d| shape[d]).collect();
        let data = permute_data(&self.nodes[a.0].data, shape, perm);
        self.push(data, out_shape, Op::Permute { a, perm: perm.to_vec() }, "permute")
    }

    pub fn reshape(&mut self, a: Var, new_shape: &[usize]) -> Result<Var> {
        let numel: usize = new_shape.iter().product();
        if numel != self.nodes[a.0].data.len() {
            return Err(CoreError::ShapeMismatch {
                expected: format!("{:?} ({} elements)", self.nodes[a.0].shape, self.nodes[a.0].data.len()),
                actual: format!("{new_shape:?} ({numel} elements)"),
                op: "reshape",
            });
        }
        let data = self.nodes[a.0].data.clone();
        self.push(data, new_shape.to_vec(), Op::Reshape { a }, "reshape")
    }

    // ── Nonlinearities ───────────────────────────────────────────────

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let data = self.nodes[a.0].data.iter().map(|&x| sigmoid(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(data, shape, Op::Sigmoid { a }, "sigmoid")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.nodes[a.0].data.iter().map(|&x| x.max(0.0)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(data, shape, Op::Relu { a }, "relu")
    }

    /// Normalises the last axis with learnable scale/shift.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let cols = *shape.last().ok_or(CoreError::ShapeMismatch {
            expected: "rank >= 1".into(),
            actual: "rank 0".into(),
            op: "layer_norm",
        })?;
        if self.nodes[gamma.0].shape != [cols] || self.nodes[beta.0].shape != [cols] {
            return Err(CoreError::ShapeMismatch {
                expected: format!("gamma/beta [{cols}]"),
                actual: format!("{:?} / {:?}", self.nodes[gamma.0].shape, self.nodes[beta.0].shape),
                op: "layer_norm",
            });
        }
        let x = &self.nodes[a.0].data;
        let g = &self.nodes[gamma.0].data;
        let b = &self.nodes[beta.0].data;
        let rows = x.len() / cols;
        let mut data = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..cols {
                data[r * cols + c] = (row[c] - mean) * inv * g[c] + b[c];
            }
        }
        self.push(data, shape, Op::LayerNorm { a, gamma, beta, eps }, "layer_norm")
    }

    /// Row softmax over the last axis; masked entries come out exactly 0.
    /// Numerically stabilised by row-max subtraction over valid entries.
    pub fn softmax_masked(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let x = &self.nodes[a.0].data;
        if mask.len() != x.len() {
            return Err(CoreError::ShapeMismatch {
                expected: format!("mask of {} entries", x.len()),
                actual: format!("{} entries", mask.len()),
                op: "softmax_masked",
            });
        }
        let cols = *shape.last().unwrap_or(&1);
        let rows = x.len() / cols;
        let mut data = vec![0.0; x.len()];
        for r in 0..rows {
            let xs = &x[r * cols..(r + 1) * cols];
            let ms = &mask[r * cols..(r + 1) * cols];
            let mut max = f64::NEG_INFINITY;
            for c in 0..cols {
                if ms[c] && xs[c] > max {
                    max = xs[c];
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(CoreError::EmptyAttentionRow { row: r });
            }
            let mut z = 0.0;
            for c in 0..cols {
                if ms[c] {
                    let e = (xs[c] - max).exp();
                    data[r * cols + c] = e;
                    z += e;
                }
            }
            for c in 0..cols {
                data[r * cols + c] /= z;
            }
        }
        self.push(data, shape, Op::SoftmaxMasked { a, mask: mask.to_vec(), cols }, "softmax_masked")
    }

    // ── Shape manipulation ───────────────────────────────────────────

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(CoreError::ShapeMismatch {
                expected: ">= 1 input".into(),
                actual: "0 inputs".into(),
                op: "concat",
            });
        }
        let first = self.nodes[inputs[0].0].shape.clone();
        let ndim = first.len();
        let mut axis_total = 0usize;
        for &v in inputs {
            let s = &self.nodes[v.0].shape;
            let compatible = s.len() == ndim
                && s.iter().enumerate().all(|(d, &x)| d == axis || x == first[d]);
            if !compatible {
                return Err(CoreError::ShapeMismatch {
                    expected: format!("{first:?} except axis {axis}"),
                    actual: format!("{s:?}"),
                    op: "concat",
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let numel: usize = out_shape.iter().product();
        let mut data = vec![0.0; numel];
        let mut offset = 0usize;
        for &v in inputs {
            let s = &self.nodes[v.0].shape;
            let block = s[axis] * inner;
            let src = &self.nodes[v.0].data;
            for o in 0..outer {
                let dst_start = o * axis_total * inner + offset * inner;
                data[dst_start..dst_start + block].copy_from_slice(&src[o * block..(o + 1) * block]);
            }
            offset += s[axis];
        }
        self.push(data, out_shape, Op::Concat { inputs: inputs.to_vec(), axis }, "concat")
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(CoreError::ShapeMismatch {
                expected: format!("slice within axis {axis} of {shape:?}"),
                actual: format!("{start}..{end}"),
                op: "slice_axis",
            });
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = end - start;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let block_in = shape[axis] * inner;
        let block_out = (end - start) * inner;
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; outer * block_out];
        for o in 0..outer {
            let s = o * block_in + start * inner;
            data[o * block_out..(o + 1) * block_out].copy_from_slice(&src[s..s + block_out]);
        }
        self.push(data, out_shape, Op::SliceAxis { a, axis, start, end }, "slice_axis")
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(CoreError::ShapeMismatch {
                expected: format!("axis < {}", shape.len()),
                actual: format!("axis {axis}"),
                op: "sum_axis",
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = o * len * inner + l * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        self.push(data, out_shape, Op::SumAxis { a, axis }, "sum_axis")
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = self.nodes[a.0].shape.get(axis).copied().unwrap_or(0).max(1) as f64;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / len)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].data.len().max(1) as f64;
        let data = vec![self.nodes[a.0].data.iter().sum::<f64>() / n];
        self.push(data, vec![], Op::MeanAll { a }, "mean_all")
    }

    // ── Lookup / indexing ────────────────────────────────────────────

    /// out[i,:] = table[ids[i],:]. Gradient scatter-adds back into the table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.nodes[table.0].shape.clone();
        if shape.len() != 2 {
            return Err(CoreError::ShapeMismatch {
                expected: "2-d table".into(),
                actual: format!("{shape:?}"),
                op: "gather_rows",
            });
        }
        let (vocab, dim) = (shape[0], shape[1]);
        let src = &self.nodes[table.0].data;
        let mut data = vec![0.0; ids.len() * dim];
        for (i, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(CoreError::IdOutOfRange { table: "gather_rows".into(), id, vocab });
            }
            data[i * dim..(i + 1) * dim].copy_from_slice(&src[id * dim..(id + 1) * dim]);
        }
        self.push(data, vec![ids.len(), dim], Op::GatherRows { table, ids: ids.to_vec() }, "gather_rows")
    }

    /// Maps right-aligned bias columns onto left-aligned storage positions.
    ///
    /// Input is [B,q,L] in bias coordinates (column L-1 = most recent);
    /// output is [B,q,L] in storage coordinates where sample b occupies
    /// positions 0..valid[b]: out[b,i,p] = in[b,i,p + L - valid[b]].
    /// Positions at or past valid[b] are zero.
    pub fn right_align_shift(&mut self, a: Var, valid: &[usize]) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() != 3 || shape[0] != valid.len() {
            return Err(CoreError::ShapeMismatch {
                expected: format!("[B={},q,L]", valid.len()),
                actual: format!("{shape:?}"),
                op: "right_align_shift",
            });
        }
        let (b, q, l) = (shape[0], shape[1], shape[2]);
        for &v in valid {
            if v > l {
                return Err(CoreError::ValidLenOutOfRange { valid_len: v, l_max: l });
            }
        }
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; b * q * l];
        for bi in 0..b {
            let v = valid[bi];
            let off = l - v;
            for qi in 0..q {
                let base = (bi * q + qi) * l;
                for p in 0..v {
                    data[base + p] = src[base + p + off];
                }
            }
        }
        self.push(data, shape, Op::RightAlignShift { a, valid: valid.to_vec() }, "right_align_shift")
    }

    // ── Loss ─────────────────────────────────────────────────────────

    /// Mean binary cross-entropy computed from logits (never from clamped
    /// probabilities): loss_i = max(z,0) - z*y + ln(1 + exp(-|z|)).
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let z = &self.nodes[logits.0].data;
        if z.len() != labels.len() {
            return Err(CoreError::ShapeMismatch {
                expected: format!("{} labels", z.len()),
                actual: format!("{} labels", labels.len()),
                op: "bce_with_logits",
            });
        }
        let n = z.len().max(1) as f64;
        let total: f64 = z
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        self.push(
            vec![total / n],
            vec![],
            Op::BceWithLogits { logits, labels: labels.to_vec() },
            "bce_with_logits",
        )
    }

    // ── Composite helpers (no new backward rules) ────────────────────

    /// x[B,F] @ w[F,O] + b[O].
    pub fn affine2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// x[B,T,D] @ w[D,O] + b[O] -> [B,T,O].
    pub fn affine3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let (bs, t, d) = (shape[0], shape[1], shape[2]);
        let o = self.nodes[w.0].shape[1];
        let flat = self.reshape(x, &[bs * t, d])?;
        let y = self.affine2(flat, w, b)?;
        self.reshape(y, &[bs, t, o])
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate additively
    /// across fan-out; nodes not reachable from the loss keep `None`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(CoreError::ShapeMismatch {
                expected: "scalar loss".into(),
                actual: format!("{:?}", self.nodes[loss.0].shape),
                op: "backward",
            });
        }
        if !self.nodes[loss.0].data[0].is_finite() {
            return Err(CoreError::NonFinite { op: "backward (loss)" });
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = self.grads[id].take() else { continue };
            self.apply_backward(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: &[f64]) {
        let slot = &mut self.grads[v.0];
        match slot {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    fn apply_backward(&mut self, id: usize, g: &[f64]) {
        // Ops only reference earlier nodes, so taking the op apart here is safe.
        let out_shape = self.nodes[id].shape.clone();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                let ga = reduce_to(g, &out_shape, &self.nodes[a.0].shape.clone());
                let gb = reduce_to(g, &out_shape, &self.nodes[b.0].shape.clone());
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                let ga = reduce_to(g, &out_shape, &self.nodes[a.0].shape.clone());
                let mut gb = reduce_to(g, &out_shape, &self.nodes[b.0].shape.clone());
                for v in gb.iter_mut() {
                    *v = -*v;
                }
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let prod_a = zip_broadcast(
                    g,
                    &out_shape,
                    &self.nodes[b.0].data,
                    &self.nodes[b.0].shape.clone(),
                    &out_shape,
                    |gi, bi| gi * bi,
                );
                let prod_b = zip_broadcast(
                    g,
                    &out_shape,
                    &self.nodes[a.0].data,
                    &self.nodes[a.0].shape.clone(),
                    &out_shape,
                    |gi, ai| gi * ai,
                );
                let ga = reduce_to(&prod_a, &out_shape, &self.nodes[a.0].shape.clone());
                let gb = reduce_to(&prod_b, &out_shape, &self.nodes[b.0].shape.clone());
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                let ga: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                self.accumulate(a, &ga);
            }
            Op::Matmul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                let ga = matmul_nt(g, &self.nodes[b.0].data, m, n, k);
                let gb = matmul_tn(&self.nodes[a.0].data, g, m, k, n);
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
            }
            Op::Bmm { a, b, batch, m, k, n } => {
                let (a, b, batch, m, k, n) = (*a, *b, *batch, *m, *k, *n);
                let mut ga = Vec::with_capacity(batch * m * k);
                let mut gb = Vec::with_capacity(batch * k * n);
                for bi in 0..batch {
                    let gblock = &g[bi * m * n..(bi + 1) * m * n];
                    let ab = &self.nodes[a.0].data[bi * m * k..(bi + 1) * m * k];
                    let bb = &self.nodes[b.0].data[bi * k * n..(bi + 1) * k * n];
                    ga.extend_from_slice(&matmul_nt(gblock, bb, m, n, k));
                    gb.extend_from_slice(&matmul_tn(ab, gblock, m, k, n));
                }
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
            }
            Op::Permute { a, perm } => {
                let (a, perm) = (*a, perm.clone());
                let mut inv = vec![0usize; perm.len()];
                for (d, &p) in perm.iter().enumerate() {
                    inv[p] = d;
                }
                let ga = permute_data(g, &out_shape, &inv);
                self.accumulate(a, &ga);
            }
            Op::Reshape { a } => {
                let a = *a;
                self.accumulate(a, g);
            }
            Op::Sigmoid { a } => {
                let a = *a;
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[id].data)
                    .map(|(gi, &y)| gi * y * (1.0 - y))
                    .collect();
                self.accumulate(a, &ga);
            }
            Op::Relu { a } => {
                let a = *a;
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accumulate(a, &ga);
            }
            Op::LayerNorm { a, gamma, beta, eps } => {
                let (a, gamma, beta, eps) = (*a, *gamma, *beta, *eps);
                let cols = *out_shape.last().unwrap();
                let rows = g.len() / cols;
                let x = &self.nodes[a.0].data;
                let gm = &self.nodes[gamma.0].data;
                let mut ga = vec![0.0; x.len()];
                let mut ggamma = vec![0.0; cols];
                let mut gbeta = vec![0.0; cols];
                for r in 0..rows {
                    let row = &x[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = grow.iter().zip(gm).map(|(gi, &gam)| gi * gam).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / cols as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        ggamma[c] += grow[c] * xhat[c];
                        gbeta[c] += grow[c];
                        ga[r * cols + c] = (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat) * inv;
                    }
                }
                self.accumulate(a, &ga);
                self.accumulate(gamma, &ggamma);
                self.accumulate(beta, &gbeta);
            }
            Op::SoftmaxMasked { a, mask, cols } => {
                let (a, cols) = (*a, *cols);
                let mask = mask.clone();
                let y = &self.nodes[id].data;
                let rows = y.len() / cols;
                let mut ga = vec![0.0; y.len()];
                for r in 0..rows {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let ms = &mask[r * cols..(r + 1) * cols];
                    let dot: f64 = (0..cols).filter(|&c| ms[c]).map(|c| gs[c] * ys[c]).sum();
                    for c in 0..cols {
                        if ms[c] {
                            ga[r * cols + c] = ys[c] * (gs[c] - dot);
                        }
                    }
                }
                self.accumulate(a, &ga);
            }
            Op::Concat { inputs, axis } => {
                let inputs = inputs.clone();
                let axis = *axis;
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let axis_total = out_shape[axis];
                let mut offset = 0usize;
                for v in inputs {
                    let s = self.nodes[v.0].shape.clone();
                    let block = s[axis] * inner;
                    let mut gv = vec![0.0; s.iter().product()];
                    for o in 0..outer {
                        let src_start = o * axis_total * inner + offset * inner;
                        gv[o * block..(o + 1) * block]
                            .copy_from_slice(&g[src_start..src_start + block]);
                    }
                    self.accumulate(v, &gv);
                    offset += s[axis];
                }
            }
            Op::SliceAxis { a, axis, start, end } => {
                let (a, axis, start, end) = (*a, *axis, *start, *end);
                let in_shape = self.nodes[a.0].shape.clone();
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let block_in = in_shape[axis] * inner;
                let block_out = (end - start) * inner;
                let mut ga = vec![0.0; in_shape.iter().product()];
                for o in 0..outer {
                    let d = o * block_in + start * inner;
                    ga[d..d + block_out].copy_from_slice(&g[o * block_out..(o + 1) * block_out]);
                }
                self.accumulate(a, &ga);
            }
            Op::SumAxis { a, axis } => {
                let (a, axis) = (*a, *axis);
                let in_shape = self.nodes[a.0].shape.clone();
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let len = in_shape[axis];
                let mut ga = vec![0.0; in_shape.iter().product()];
                for o in 0..outer {
                    for l in 0..len {
                        let base = o * len * inner + l * inner;
                        for i in 0..inner {
                            ga[base + i] = g[o * inner + i];
                        }
                    }
                }
                self.accumulate(a, &ga);
            }
            Op::MeanAll { a } => {
                let a = *a;
                let n = self.nodes[a.0].data.len().max(1) as f64;
                let ga = vec![g[0] / n; self.nodes[a.0].data.len()];
                self.accumulate(a, &ga);
            }
            Op::GatherRows { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let dim = self.nodes[table.0].shape[1];
                let mut gt = vec![0.0; self.nodes[table.0].data.len()];
                for (i, &id_) in ids.iter().enumerate() {
                    for d in 0..dim {
                        gt[id_ * dim + d] += g[i * dim + d];
                    }
                }
                self.accumulate(table, &gt);
            }
            Op::RightAlignShift { a, valid } => {
                let a = *a;
                let valid = valid.clone();
                let (b, q, l) = (out_shape[0], out_shape[1], out_shape[2]);
                let mut ga = vec![0.0; b * q * l];
                for bi in 0..b {
                    let v = valid[bi];
                    let off = l - v;
                    for qi in 0..q {
                        let base = (bi * q + qi) * l;
                        for p in 0..v {
                            ga[base + p + off] += g[base + p];
                        }
                    }
                }
                self.accumulate(a, &ga);
            }
            Op::BceWithLogits { logits, labels } => {
                let logits = *logits;
                let labels = labels.clone();
                let z = &self.nodes[logits.0].data;
                let n = z.len().max(1) as f64;
                let gl: Vec<f64> = z
                    .iter()
                    .zip(&labels)
                    .map(|(&z, &y)| g[0] * (sigmoid(z) - y) / n)
                    .collect();
                self.accumulate(logits, &gl);
            }
        }
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    // Dedicated copies for the layouts attention uses on every step.
    match (shape.len(), perm) {
        (2, [1, 0]) => {
            let (r, c) = (shape[0], shape[1]);
            let mut out = vec![0.0; data.len()];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = data[i * c + j];
                }
            }
            return out;
        }
        (3, [0, 2, 1]) => {
            let (b, r, c) = (shape[0], shape[1], shape[2]);
            let mut out = vec![0.0; data.len()];
            for bi in 0..b {
                let src = &data[bi * r * c..(bi + 1) * r * c];
                let dst = &mut out[bi * r * c..(bi + 1) * r * c];
                for i in 0..r {
                    for j in 0..c {
                        dst[j * r + i] = src[i * c + j];
                    }
                }
            }
            return out;
        }
        (4, [0, 2, 1, 3]) => {
            let (b, d1, d2, inner) = (shape[0], shape[1], shape[2], shape[3]);
            let mut out = vec![0.0; data.len()];
            for bi in 0..b {
                for i in 0..d1 {
                    for j in 0..d2 {
                        let src = (bi * d1 * d2 + i * d2 + j) * inner;
                        let dst = (bi * d1 * d2 + j * d1 + i) * inner;
                        out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
                    }
                }
            }
            return out;
        }
        _ => {}
    }
    let ndim = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&d| shape[d]).collect();
    // in strides
    let mut in_strides = vec![1usize; ndim];
    for d in (0..ndim.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    // stride of out dim d in the input = in_strides[perm[d]]
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![0.0; data.len()];
    let mut coords = vec![0usize; ndim];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = data[src];
        for d in (0..ndim).rev() {
            coords[d] += 1;
            src += strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * out_shape[d];
            coords[d] = 0;
        }
    }
    out
}
