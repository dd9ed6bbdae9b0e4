//! Spatial rearrangements of `[B, W, H, C]` feature maps.
//!
//! Windows and pooled cells are numbered row-major over the `(W/s, H/s)`
//! grid, and positions inside a window row-major over the `s × s` block, so
//! window `w` always holds exactly the pixels that pool into token `w`.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// `(B, W, H, C)` of a rank-4 map, checking divisibility by `s`.
pub fn grid_dims(shape: &[usize], s: usize) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::Invalid(alloc::format!(
            "expected a [B, W, H, C] map, got {shape:?}"
        )));
    }
    if s == 0 {
        return Err(Error::Config("downsample ratio must be positive".into()));
    }
    for &extent in &shape[1..3] {
        if extent % s != 0 {
            return Err(Error::NotDivisible { extent, ratio: s });
        }
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

const BLOCK_PERM: [usize; 6] = [0, 1, 3, 2, 4, 5];

/// `[B, W, H, C]` → `[B·n², s², C]`.
pub fn window_partition(g: &mut Graph<'_>, x: Var, s: usize) -> Result<Var> {
    let (b, w, h, c) = grid_dims(g.shape(x), s)?;
    let y = g.reshape(x, &[b, w / s, s, h / s, s, c])?;
    let y = g.permute(y, &BLOCK_PERM)?;
    g.reshape(y, &[b * (w / s) * (h / s), s * s, c])
}

/// Inverse of [`window_partition`] for a map of batch `b` and extents `w × h`.
pub fn window_unpartition(g: &mut Graph<'_>, x: Var, b: usize, w: usize, h: usize, s: usize) -> Result<Var> {
    let c = *g.shape(x).last().expect("rank");
    let y = g.reshape(x, &[b, w / s, h / s, s, s, c])?;
    let y = g.permute(y, &BLOCK_PERM)?;
    g.reshape(y, &[b, w, h, c])
}

/// Space-to-depth: `[B, W, H, C]` → `[B, W/s, H/s, s²·C]`, channel order
/// `(row in block, column in block, channel)`.
pub fn pixel_unshuffle(g: &mut Graph<'_>, x: Var, s: usize) -> Result<Var> {
    let (b, w, h, c) = grid_dims(g.shape(x), s)?;
    let y = g.reshape(x, &[b, w / s, s, h / s, s, c])?;
    let y = g.permute(y, &BLOCK_PERM)?;
    g.reshape(y, &[b, w / s, h / s, s * s * c])
}

/// Depth-to-space, the inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(g: &mut Graph<'_>, x: Var, s: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (b, wn, hn, cs) = (shape[0], shape[1], shape[2], shape[3]);
    if cs % (s * s) != 0 {
        return Err(Error::NotDivisible { extent: cs, ratio: s * s });
    }
    let c = cs / (s * s);
    let y = g.reshape(x, &[b, wn, hn, s, s, c])?;
    let y = g.permute(y, &BLOCK_PERM)?;
    g.reshape(y, &[b, wn * s, hn * s, c])
}

/// Block mean over `s × s` cells: `[B, W, H, C]` → `[B, W/s, H/s, C]`.
pub fn avg_pool(g: &mut Graph<'_>, x: Var, s: usize) -> Result<Var> {
    let (b, w, h, c) = grid_dims(g.shape(x), s)?;
    let win = window_partition(g, x, s)?;
    let m = g.mean_axis(win, 1)?;
    g.reshape(m, &[b, w / s, h / s, c])
}

fn on_tensor(x: &Tensor, f: impl FnOnce(&mut Graph<'_>, Var) -> Result<Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = f(&mut g, v)?;
    Ok(g.value(out).clone())
}

pub fn window_partition_tensor(x: &Tensor, s: usize) -> Result<Tensor> {
    on_tensor(x, |g, v| window_partition(g, v, s))
}

pub fn window_unpartition_tensor(x: &Tensor, b: usize, w: usize, h: usize, s: usize) -> Result<Tensor> {
    on_tensor(x, |g, v| window_unpartition(g, v, b, w, h, s))
}

pub fn pixel_unshuffle_tensor(x: &Tensor, s: usize) -> Result<Tensor> {
    on_tensor(x, |g, v| pixel_unshuffle(g, v, s))
}

pub fn pixel_shuffle_tensor(x: &Tensor, s: usize) -> Result<Tensor> {
    on_tensor(x, |g, v| pixel_shuffle(g, v, s))
}

pub fn avg_pool_tensor(x: &Tensor, s: usize) -> Result<Tensor> {
    on_tensor(x, |g, v| avg_pool(g, v, s))
}

/// Additive mask `[n², W·H]` letting token `w` see only the pixels of window `w`.
pub fn block_diagonal_mask(w: usize, h: usize, s: usize) -> Result<Tensor> {
    grid_dims(&[1, w, h, 1], s)?;
    let (wn, hn) = (w / s, h / s);
    let mut m = Tensor::full(&[wn * hn, w * h], ops::MASK_NEG);
    for x in 0..w {
        for y in 0..h {
            let token = (x / s) * hn + y / s;
            m.data_mut()[token * w * h + x * h + y] = 0.0;
        }
    }
    Ok(m)
}

/// Flat pixel indices `x·H + y` belonging to window `token`, in window order.
pub fn window_pixels(token: usize, h: usize, s: usize) -> Vec<usize> {
    let hn = h / s;
    let (wi, hj) = (token / hn, token % hn);
    let mut out = Vec::with_capacity(s * s);
    for di in 0..s {
        for dj in 0..s {
            out.push((wi * s + di) * h + hj * s + dj);
        }
    }
    out
}
