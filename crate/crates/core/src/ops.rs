//! Forward kernels and their hand-written adjoints.
//!
//! Every function here is pure: it reads its inputs and allocates a fresh
//! output. The tape in [`crate::tape`] composes them for reverse-mode
//! differentiation; the functions are also usable directly for inference.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{numel, strides, Tensor};

/// Additive mask value standing in for negative infinity.
pub const MASK_NEG: f64 = -1e9;

/// Epsilon used by every layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Broadcasting

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// `small` (after dropping leading unit axes) equals the trailing axes of `out`.
fn is_suffix(small: &[usize], out: &[usize]) -> bool {
    let trimmed: &[usize] = {
        let lead = small.iter().take_while(|&&d| d == 1).count();
        &small[lead..]
    };
    trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == *trimmed
}

/// For every flat index of `out`, the flat index into a tensor of shape `src`
/// broadcast to `out`.
fn broadcast_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let pad = rank - src.len();
    let src_strides = strides(src);
    let mut eff = vec![0usize; rank];
    for i in 0..src.len() {
        eff[pad + i] = if src[i] == 1 { 0 } else { src_strides[i] };
    }
    let total = numel(out);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

pub fn broadcast_to(t: &Tensor, out: &[usize]) -> Tensor {
    if t.shape() == out {
        return t.clone();
    }
    let data = if is_suffix(t.shape(), out) {
        let n = t.len();
        (0..numel(out)).map(|i| t.data()[i % n]).collect()
    } else {
        broadcast_map(t.shape(), out)
            .into_iter()
            .map(|i| t.data()[i])
            .collect()
    };
    Tensor::from_parts(out.to_vec(), data)
}

/// Sums `g` down to `shape`, inverting a broadcast.
pub fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let n = numel(shape);
    let mut out = vec![0.0; n];
    if is_suffix(shape, g.shape()) {
        for chunk in g.data().chunks_exact(n) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
    } else {
        for (v, i) in g.data().iter().zip(broadcast_map(shape, g.shape())) {
            out[i] += v;
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

fn binary(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let out = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(out, data));
    }
    if a.shape() == out.as_slice() && is_suffix(b.shape(), &out) {
        let nb = b.len();
        let data = a
            .data()
            .chunks_exact(nb)
            .flat_map(|chunk| chunk.iter().zip(b.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        return Ok(Tensor::from_parts(out, data));
    }
    let ma = broadcast_map(a.shape(), &out);
    let mb = broadcast_map(b.shape(), &out);
    let data = ma
        .into_iter()
        .zip(mb)
        .map(|(i, j)| f(a.data()[i], b.data()[j]))
        .collect();
    Ok(Tensor::from_parts(out, data))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(a, b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(a, b, "sub", |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(a, b, "mul", |x, y| x * y)
}

pub fn add_backward(g: &Tensor, a: &[usize], b: &[usize]) -> (Tensor, Tensor) {
    (reduce_to(g, a), reduce_to(g, b))
}

pub fn sub_backward(g: &Tensor, a: &[usize], b: &[usize]) -> (Tensor, Tensor) {
    (reduce_to(g, a), reduce_to(&g.map(|v| -v), b))
}

pub fn mul_backward(g: &Tensor, a: &Tensor, b: &Tensor) -> (Tensor, Tensor) {
    let gb_full = mul(g, a).expect("broadcast checked in forward");
    let ga_full = mul(g, b).expect("broadcast checked in forward");
    (reduce_to(&ga_full, a.shape()), reduce_to(&gb_full, b.shape()))
}

/// `scale * x + shift`, elementwise.
pub fn affine(x: &Tensor, scale: f64, shift: f64) -> Tensor {
    x.map(|v| scale * v + shift)
}

// ---------------------------------------------------------------------------
// Matrix multiplication

#[inline]
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T
#[inline]
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// c[m,n] += a[k,m]^T * b[k,n]
#[inline]
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Shape bookkeeping for a (possibly batched, broadcast) matrix product.
#[derive(Debug, Clone)]
pub struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    a_batch: Vec<usize>,
    b_batch: Vec<usize>,
}

impl MatmulPlan {
    /// Plans `a · b` (or `a · bᵀ` when `trans_b`).
    pub fn new(a: &[usize], b: &[usize], trans_b: bool) -> Result<Self> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        if a.len() < 2 || b.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (kb, n) = if trans_b {
            (b[b.len() - 1], b[b.len() - 2])
        } else {
            (b[b.len() - 2], b[b.len() - 1])
        };
        if k != kb {
            return Err(mismatch());
        }
        let ab = &a[..a.len() - 2];
        let bb = &b[..b.len() - 2];
        let batch = if ab.is_empty() && bb.is_empty() {
            Vec::new()
        } else if ab.is_empty() {
            bb.to_vec()
        } else if bb.is_empty() {
            ab.to_vec()
        } else {
            broadcast_shape(ab, bb).ok_or_else(mismatch)?
        };
        let nbatch = numel(&batch);
        let (a_batch, b_batch) = if batch.is_empty() {
            (vec![0], vec![0])
        } else {
            let map_a = if ab.is_empty() {
                vec![0; nbatch]
            } else {
                broadcast_map(ab, &batch)
            };
            let map_b = if bb.is_empty() {
                vec![0; nbatch]
            } else {
                broadcast_map(bb, &batch)
            };
            (map_a, map_b)
        };
        let mut out_shape = batch;
        out_shape.push(m);
        out_shape.push(n);
        Ok(Self {
            m,
            k,
            n,
            out_shape,
            a_batch,
            b_batch,
        })
    }

    pub fn batches(&self) -> usize {
        self.a_batch.len()
    }

    /// Multiply-accumulate count of the product.
    pub fn macs(&self) -> u64 {
        (self.batches() * self.m * self.k * self.n) as u64
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_ex(a, b, false)
}

/// `a · bᵀ` over the last two axes.
pub fn matmul_t(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_ex(a, b, true)
}

pub fn matmul_ex(a: &Tensor, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let plan = MatmulPlan::new(a.shape(), b.shape(), trans_b)?;
    Ok(matmul_planned(a, b, trans_b, &plan))
}

pub fn matmul_planned(a: &Tensor, b: &Tensor, trans_b: bool, plan: &MatmulPlan) -> Tensor {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut out = vec![0.0; numel(&plan.out_shape)];
    // Fold a broadcast right operand into one tall product.
    if a.rank() > 2 && b.rank() == 2 && !trans_b {
        gemm_nn(a.data(), b.data(), &mut out, a.len() / k, k, n);
        return Tensor::from_parts(plan.out_shape.clone(), out);
    }
    for (bi, (&ia, &ib)) in plan.a_batch.iter().zip(&plan.b_batch).enumerate() {
        let asl = &a.data()[ia * m * k..(ia + 1) * m * k];
        let bsl = &b.data()[ib * k * n..(ib + 1) * k * n];
        let csl = &mut out[bi * m * n..(bi + 1) * m * n];
        if trans_b {
            gemm_nt(asl, bsl, csl, m, k, n);
        } else {
            gemm_nn(asl, bsl, csl, m, k, n);
        }
    }
    Tensor::from_parts(plan.out_shape.clone(), out)
}

/// Adjoint of [`matmul_ex`]. Returns `(grad_a, grad_b)`, each reduced over
/// broadcast batch axes.
pub fn matmul_backward(
    g: &Tensor,
    a: &Tensor,
    b: &Tensor,
    trans_b: bool,
    plan: &MatmulPlan,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut ga = need_a.then(|| vec![0.0; a.len()]);
    let mut gb = need_b.then(|| vec![0.0; b.len()]);
    if a.rank() > 2 && b.rank() == 2 && !trans_b {
        let rows = a.len() / k;
        if let Some(ga) = ga.as_mut() {
            gemm_nt(g.data(), b.data(), ga, rows, n, k);
        }
        if let Some(gb) = gb.as_mut() {
            gemm_tn(a.data(), g.data(), gb, k, rows, n);
        }
    } else {
        for (bi, (&ia, &ib)) in plan.a_batch.iter().zip(&plan.b_batch).enumerate() {
            let gsl = &g.data()[bi * m * n..(bi + 1) * m * n];
            let asl = &a.data()[ia * m * k..(ia + 1) * m * k];
            let bsl = &b.data()[ib * k * n..(ib + 1) * k * n];
            if let Some(ga) = ga.as_mut() {
                let gasl = &mut ga[ia * m * k..(ia + 1) * m * k];
                if trans_b {
                    // c = a bᵀ, b is [n,k]: ga = g b
                    gemm_nn(gsl, bsl, gasl, m, n, k);
                } else {
                    // b is [k,n]: ga = g bᵀ
                    gemm_nt(gsl, bsl, gasl, m, n, k);
                }
            }
            if let Some(gb) = gb.as_mut() {
                let gbsl = &mut gb[ib * k * n..(ib + 1) * k * n];
                if trans_b {
                    // gb[n,k] = gᵀ a
                    gemm_tn(gsl, asl, gbsl, n, m, k);
                } else {
                    // gb[k,n] = aᵀ g
                    gemm_tn(asl, gsl, gbsl, k, m, n);
                }
            }
        }
    }
    (
        ga.map(|d| Tensor::from_parts(a.shape().to_vec(), d)),
        gb.map(|d| Tensor::from_parts(b.shape().to_vec(), d)),
    )
}

// ---------------------------------------------------------------------------
// Normalisation and activations

fn axis_geometry(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let len = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, len, inner)
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(Error::Axis {
            op,
            axis,
            rank: t.rank(),
        });
    }
    Ok(())
}

/// Numerically stabilised softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("softmax", x, axis)?;
    let (outer, len, inner) = axis_geometry(x.shape(), axis);
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..len {
                mx = mx.max(d[base + j * inner]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = libm::exp(d[base + j * inner] - mx);
                d[base + j * inner] = e;
                sum += e;
            }
            for j in 0..len {
                d[base + j * inner] /= sum;
            }
        }
    }
    Ok(out)
}

pub fn softmax_backward(g: &Tensor, y: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_geometry(y.shape(), axis);
    let mut out = vec![0.0; y.len()];
    let (gd, yd) = (g.data(), y.data());
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = 0.0;
            for j in 0..len {
                dot += gd[base + j * inner] * yd[base + j * inner];
            }
            for j in 0..len {
                let p = base + j * inner;
                out[p] = yd[p] * (gd[p] - dot);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

/// Layer norm over the last axis with biased variance.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.last_dim();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let mut out = Vec::with_capacity(x.len());
    for row in x.rows() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / libm::sqrt(var + eps);
        for ((v, gm), bt) in row.iter().zip(gamma.data()).zip(beta.data()) {
            out.push((v - mean) * rstd * gm + bt);
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn layer_norm_backward(
    g: &Tensor,
    x: &Tensor,
    gamma: &Tensor,
    eps: f64,
) -> (Tensor, Tensor, Tensor) {
    let d = x.last_dim();
    let mut gx = Vec::with_capacity(x.len());
    let mut ggamma = vec![0.0; d];
    let mut gbeta = vec![0.0; d];
    let mut xhat = vec![0.0; d];
    let mut gxhat = vec![0.0; d];
    for (row, grow) in x.rows().zip(g.rows()) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / libm::sqrt(var + eps);
        let mut mean_gx = 0.0;
        let mut mean_gx_x = 0.0;
        for j in 0..d {
            xhat[j] = (row[j] - mean) * rstd;
            gxhat[j] = grow[j] * gamma.data()[j];
            ggamma[j] += grow[j] * xhat[j];
            gbeta[j] += grow[j];
            mean_gx += gxhat[j];
            mean_gx_x += gxhat[j] * xhat[j];
        }
        mean_gx /= d as f64;
        mean_gx_x /= d as f64;
        for j in 0..d {
            gx.push(rstd * (gxhat[j] - mean_gx - xhat[j] * mean_gx_x));
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(gamma.shape().to_vec(), ggamma),
        Tensor::from_parts(gamma.shape().to_vec(), gbeta),
    )
}

const INV_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| 0.5 * v * (1.0 + libm::erf(v * INV_SQRT_2)))
}

pub fn gelu_backward(g: &Tensor, x: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&v, &gv)| {
            let cdf = 0.5 * (1.0 + libm::erf(v * INV_SQRT_2));
            let pdf = INV_SQRT_2PI * libm::exp(-0.5 * v * v);
            gv * (cdf + v * pdf)
        })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

// ---------------------------------------------------------------------------
// Structural ops

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::Invalid("concat of nothing".into()))?;
    check_axis("concat", first, axis)?;
    for p in parts {
        let ok = p.rank() == first.rank()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let outer = numel(&first.shape()[..axis]);
    let inner = numel(&first.shape()[axis + 1..]);
    let total: usize = parts.iter().map(|p| p.dim(axis)).sum();
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let mut out = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for p in parts {
            let block = p.dim(axis) * inner;
            out.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Rows `start..end` of `axis`.
pub fn slice(x: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    check_axis("slice", x, axis)?;
    if start >= end || end > x.dim(axis) {
        return Err(Error::Invalid(alloc::format!(
            "slice {start}..{end} of axis {axis} with extent {}",
            x.dim(axis)
        )));
    }
    let (outer, len, inner) = axis_geometry(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = end - start;
    let mut out = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        let base = o * len * inner;
        out.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
    }
    Ok(Tensor::from_parts(shape, out))
}

pub fn slice_backward(g: &Tensor, in_shape: &[usize], axis: usize, start: usize) -> Tensor {
    let (outer, len, inner) = axis_geometry(in_shape, axis);
    let glen = g.dim(axis);
    let mut out = vec![0.0; numel(in_shape)];
    for o in 0..outer {
        let dst = o * len * inner + start * inner;
        let src = o * glen * inner;
        out[dst..dst + glen * inner].copy_from_slice(&g.data()[src..src + glen * inner]);
    }
    Tensor::from_parts(in_shape.to_vec(), out)
}

/// Gathers `indices` along `axis`.
pub fn index_select(x: &Tensor, axis: usize, indices: &[usize]) -> Result<Tensor> {
    check_axis("index_select", x, axis)?;
    if indices.is_empty() {
        return Err(Error::Invalid("index_select with no indices".into()));
    }
    let (outer, len, inner) = axis_geometry(x.shape(), axis);
    if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
        return Err(Error::Invalid(alloc::format!(
            "index {bad} out of range for extent {len}"
        )));
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = indices.len();
    let mut out = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for &i in indices {
            let s = o * len * inner + i * inner;
            out.extend_from_slice(&x.data()[s..s + inner]);
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

pub fn index_select_backward(g: &Tensor, in_shape: &[usize], axis: usize, indices: &[usize]) -> Tensor {
    let (outer, len, inner) = axis_geometry(in_shape, axis);
    let mut out = vec![0.0; numel(in_shape)];
    let n = indices.len();
    for o in 0..outer {
        for (r, &i) in indices.iter().enumerate() {
            let dst = o * len * inner + i * inner;
            let src = (o * n + r) * inner;
            for (d, s) in out[dst..dst + inner].iter_mut().zip(&g.data()[src..src + inner]) {
                *d += s;
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), out)
}

pub fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || core::mem::replace(&mut seen[p], true)) {
        return Err(Error::Invalid(alloc::format!(
            "permutation {perm:?} for rank {rank}"
        )));
    }
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.dim(p)).collect();
    let src_stride: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = x.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(x.data()[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_stride[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_stride[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

// ---------------------------------------------------------------------------
// Reductions

/// Sum along `axis`, keeping it with extent one.
pub fn sum_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("sum_axis", x, axis)?;
    let (outer, len, inner) = axis_geometry(x.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..len {
            let src = &x.data()[(o * len + j) * inner..(o * len + j + 1) * inner];
            for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    Ok(Tensor::from_parts(shape, out))
}

pub fn sum_axis_backward(g: &Tensor, in_shape: &[usize], axis: usize) -> Tensor {
    let (outer, len, inner) = axis_geometry(in_shape, axis);
    let mut out = Vec::with_capacity(numel(in_shape));
    for o in 0..outer {
        let src = &g.data()[o * inner..(o + 1) * inner];
        for _ in 0..len {
            out.extend_from_slice(src);
        }
    }
    Tensor::from_parts(in_shape.to_vec(), out)
}

/// Mean along `axis` computed as `sum / len`, keeping the axis.
pub fn mean_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    let len = x.shape().get(axis).copied().unwrap_or(1) as f64;
    Ok(sum_axis(x, axis)?.map(|v| v / len))
}

/// Maximum along `axis`, keeping the axis. Returns the values and the
/// winning position (first on ties) for every output element.
pub fn max_axis(x: &Tensor, axis: usize) -> Result<(Tensor, Vec<usize>)> {
    check_axis("max_axis", x, axis)?;
    let (outer, len, inner) = axis_geometry(x.shape(), axis);
    let mut vals = vec![f64::NEG_INFINITY; outer * inner];
    let mut arg = vec![0usize; outer * inner];
    for o in 0..outer {
        for j in 0..len {
            for i in 0..inner {
                let v = x.data()[(o * len + j) * inner + i];
                let slot = o * inner + i;
                if v > vals[slot] {
                    vals[slot] = v;
                    arg[slot] = j;
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    Ok((Tensor::from_parts(shape, vals), arg))
}

pub fn max_axis_backward(g: &Tensor, in_shape: &[usize], axis: usize, arg: &[usize]) -> Tensor {
    let (outer, len, inner) = axis_geometry(in_shape, axis);
    let mut out = vec![0.0; numel(in_shape)];
    for o in 0..outer {
        for i in 0..inner {
            let slot = o * inner + i;
            out[(o * len + arg[slot]) * inner + i] += g.data()[slot];
        }
    }
    Tensor::from_parts(in_shape.to_vec(), out)
}

// ---------------------------------------------------------------------------
// Losses

/// Mean cross-entropy of `logits` `[n, classes]` against integer targets.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 || logits.dim(0) != targets.len() {
        return Err(Error::Invalid(alloc::format!(
            "cross_entropy: logits {:?} vs {} targets",
            logits.shape(),
            targets.len()
        )));
    }
    let classes = logits.dim(1);
    if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::Invalid(alloc::format!(
            "target {bad} out of range for {classes} classes"
        )));
    }
    let probs = softmax(logits, 1)?;
    let n = targets.len() as f64;
    let loss = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let row = &logits.data()[i * classes..(i + 1) * classes];
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = mx + libm::log(row.iter().map(|&v| libm::exp(v - mx)).sum::<f64>());
            lse - row[t]
        })
        .sum::<f64>()
        / n;
    Ok((loss, probs))
}

pub fn cross_entropy_backward(g: f64, probs: &Tensor, targets: &[usize]) -> Tensor {
    let classes = probs.dim(1);
    let n = targets.len() as f64;
    let mut out = probs.clone();
    for (i, &t) in targets.iter().enumerate() {
        out.data_mut()[i * classes + t] -= 1.0;
    }
    out.map(|v| v * g / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn matmul_hand_contraction() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[&[5.0], &[6.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_identity_and_zeros() {
        let mut rng = RngState::new(7);
        let b = Tensor::randn(&[3, 3], 1.0, &mut rng);
        assert!(matmul(&Tensor::identity(3), &b).unwrap().bit_eq(&b));
        let z = matmul(&Tensor::zeros(&[2, 3]), &Tensor::randn(&[3, 4], 1.0, &mut rng)).unwrap();
        assert_eq!(z, Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn batched_matmul_broadcasts_leading_axes() {
        let mut rng = RngState::new(2);
        let a = Tensor::randn(&[2, 3, 4, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 5, 2], 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 4, 2]);
        for x in 0..2 {
            for y in 0..3 {
                for i in 0..4 {
                    for j in 0..2 {
                        let want: f64 = (0..5).map(|p| a.at(&[x, y, i, p]) * b.at(&[y, p, j])).sum();
                        assert!((c.at(&[x, y, i, j]) - want).abs() < 1e-12);
                    }
                }
            }
        }
        let bt = permute(&b, &[0, 2, 1]).unwrap();
        assert!(matmul_t(&a, &bt).unwrap().max_abs_diff(&c) < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::zeros(&[3]), 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = softmax(&Tensor::new([2], vec![1000.0, 1000.0]).unwrap(), 0).unwrap();
        assert_eq!(big.data(), &[0.5, 0.5]);
        let x = [1.0f64, 2.0, 3.0];
        let y = softmax(&Tensor::new([3], x.to_vec()).unwrap(), 0).unwrap();
        let z: f64 = x.iter().map(|v| libm::exp(*v)).sum();
        for (yi, xi) in y.data().iter().zip(x) {
            assert!((yi - libm::exp(xi) / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_along_inner_axis() {
        let mut rng = RngState::new(5);
        let x = Tensor::randn(&[2, 3, 4], 3.0, &mut rng);
        let y = softmax(&x, 1).unwrap();
        for a in 0..2 {
            for c in 0..4 {
                let s: f64 = (0..3).map(|b| y.at(&[a, b, c])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::ones(&[2]);
        let zero = Tensor::zeros(&[2]);
        let c = layer_norm(&Tensor::full(&[1, 2], 4.0), &one, &zero, LAYER_NORM_EPS).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0]);
        let y = layer_norm(&Tensor::new([1, 2], vec![1.0, 3.0]).unwrap(), &one, &zero, LAYER_NORM_EPS).unwrap();
        // mean 2, var 1: (x - 2) / sqrt(1 + eps)
        assert!((y.data()[0] + 1.0).abs() < 1e-4 && (y.data()[1] - 1.0).abs() < 1e-4);
        let fives = layer_norm(
            &Tensor::new([1, 2], vec![1.0, 3.0]).unwrap(),
            &zero,
            &Tensor::full(&[2], 5.0),
            LAYER_NORM_EPS,
        )
        .unwrap();
        assert_eq!(fives.data(), &[5.0, 5.0]);
    }

    #[test]
    fn gelu_at_zero() {
        assert_eq!(gelu(&Tensor::zeros(&[1])).item(), 0.0);
    }

    #[test]
    fn concat_keeps_column_order() {
        let a = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap();
        let b = Tensor::from_rows(&[&[7.0], &[8.0]]).unwrap();
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 4]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 7.0, 4.0, 5.0, 6.0, 8.0]);
        assert!(concat(&[&a, &Tensor::zeros(&[3, 1])], 1).is_err());
    }

    #[test]
    fn permute_round_trip() {
        let mut rng = RngState::new(11);
        let x = Tensor::randn(&[2, 3, 4, 5], 1.0, &mut rng);
        let perm = [2, 0, 3, 1];
        let y = permute(&x, &perm).unwrap();
        assert_eq!(y.shape(), &[4, 2, 5, 3]);
        assert_eq!(y.at(&[1, 0, 4, 2]), x.at(&[0, 2, 1, 4]));
        let back = permute(&y, &inverse_permutation(&perm)).unwrap();
        assert!(back.bit_eq(&x));
    }

    #[test]
    fn reshape_rejects_count_change() {
        assert!(Tensor::zeros(&[2, 3]).reshape(&[4, 2]).is_err());
    }

    #[test]
    fn broadcast_add_and_reduce() {
        let a = Tensor::zeros(&[2, 3, 4]);
        let b = Tensor::new([3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let c = add(&a, &b).unwrap();
        assert_eq!(c.at(&[1, 2, 3]), 3.0);
        let r = reduce_to(&Tensor::ones(&[2, 3, 4]), &[3, 1]);
        assert_eq!(r.data(), &[8.0, 8.0, 8.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let (loss, _) = cross_entropy(&Tensor::zeros(&[3, 8]), &[0, 3, 7]).unwrap();
        assert!((loss - libm::log(8.0)).abs() < 1e-12);
    }
}
