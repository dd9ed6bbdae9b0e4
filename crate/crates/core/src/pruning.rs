//! Training-free vision-token pruning comparators.
//!
//! `fastv` and `pyramid_drop` drop vision tokens between decoder layers by
//! the attention they receive from text positions; `encoder_prune` drops
//! encoder tokens by feature norm before projection. Selection never
//! changes surviving values and always keeps the original token order.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::decoder::SequenceLayout;
use crate::error::{Error, Result};
use crate::ops;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PruneSchedule {
    /// Keep `keep` vision tokens after layer `layer`.
    Fastv { layer: usize, keep: usize },
    /// After the last layer of each stage keep `ceil(n · Π ratios)` tokens.
    PyramidDrop { stage_ends: Vec<usize>, ratios: Vec<f64> },
    /// Keep the `keep` largest-norm encoder tokens before projection.
    EncoderPrune { keep: usize },
}

impl Default for PruneSchedule {
    fn default() -> Self {
        PruneSchedule::Fastv { layer: 2, keep: 64 }
    }
}

/// Vision-token budget to enforce after given decoder layers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeepPlan {
    pub after_layer: BTreeMap<usize, usize>,
}

impl PruneSchedule {
    pub fn label(&self) -> &'static str {
        match self {
            PruneSchedule::Fastv { .. } => "fastv",
            PruneSchedule::PyramidDrop { .. } => "pyramid_drop",
            PruneSchedule::EncoderPrune { .. } => "encoder_prune (VisPruner-style)",
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        match self {
            PruneSchedule::Fastv { layer, keep } => {
                if *layer == 0 || *layer > num_layers {
                    return Err(Error::Config(format!("fastv layer {layer} outside 1..={num_layers}")));
                }
                if *keep == 0 {
                    return Err(Error::Config("fastv keep must be positive".into()));
                }
            }
            PruneSchedule::PyramidDrop { stage_ends, ratios } => {
                if stage_ends.is_empty() || stage_ends.len() != ratios.len() {
                    return Err(Error::Config("pyramid_drop needs one ratio per stage".into()));
                }
                if stage_ends.windows(2).any(|w| w[0] >= w[1])
                    || stage_ends.iter().any(|&l| l == 0 || l > num_layers)
                {
                    return Err(Error::Config(format!(
                        "pyramid_drop stage ends must increase within 1..={num_layers}"
                    )));
                }
                if ratios.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
                    return Err(Error::Config("pyramid_drop ratios must lie in (0, 1]".into()));
                }
            }
            PruneSchedule::EncoderPrune { keep } => {
                if *keep == 0 {
                    return Err(Error::Config("encoder_prune keep must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// In-decoder budgets for `n_vision` tokens (empty for encoder pruning).
    pub fn plan(&self, n_vision: usize, num_layers: usize) -> Result<KeepPlan> {
        self.validate(num_layers)?;
        let mut after_layer = BTreeMap::new();
        match self {
            PruneSchedule::Fastv { layer, keep } => {
                if *keep > n_vision {
                    return Err(Error::Config(format!("fastv keeps {keep} of {n_vision} vision tokens")));
                }
                after_layer.insert(*layer, *keep);
            }
            PruneSchedule::PyramidDrop { stage_ends, ratios } => {
                for (&l, k) in stage_ends.iter().zip(pyramid_keep_counts(n_vision, ratios)?) {
                    after_layer.insert(l, k);
                }
            }
            PruneSchedule::EncoderPrune { .. } => {}
        }
        Ok(KeepPlan { after_layer })
    }
}

/// Cumulative keep counts `ceil(n · r₁ ⋯ r_t)` per stage.
pub fn pyramid_keep_counts(n: usize, ratios: &[f64]) -> Result<Vec<usize>> {
    let mut frac = 1.0;
    let mut out = Vec::with_capacity(ratios.len());
    for &r in ratios {
        frac *= r;
        // guard against 64·0.5·0.5 landing a hair above 16
        let k = libm::ceil(n as f64 * frac - 1e-9) as usize;
        if k == 0 {
            return Err(Error::Invalid("pyramid stage keeps no tokens".into()));
        }
        out.push(k.min(n));
    }
    Ok(out)
}

/// Indices of the `keep` highest scores, returned in ascending index order.
fn top_k_in_order(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(keep);
    order.sort_unstable();
    order
}

/// Per batch item, the `keep` vision tokens receiving the most attention
/// (averaged over heads and non-vision query rows) in weights `[B, h, S, S]`.
pub fn select_by_attention(weights: &Tensor, layout: &SequenceLayout, keep: usize) -> Result<Vec<Vec<usize>>> {
    let nv = layout.vision.len();
    if keep == 0 || keep > nv {
        return Err(Error::Invalid(format!("cannot keep {keep} of {nv} vision tokens")));
    }
    let s = layout.len();
    if weights.rank() != 4 || weights.dim(2) != s || weights.dim(3) != s {
        return Err(Error::ShapeMismatch {
            op: "select_by_attention",
            lhs: weights.shape().to_vec(),
            rhs: alloc::vec![s, s],
        });
    }
    let (batch, heads) = (weights.dim(0), weights.dim(1));
    let queries = layout.vision.end..s;
    let denom = (heads * queries.len()).max(1) as f64;
    let data = weights.data();
    let mut out = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut scores = alloc::vec![0.0; nv];
        for h in 0..heads {
            for q in queries.clone() {
                let row = ((b * heads + h) * s + q) * s;
                for (j, sc) in scores.iter_mut().enumerate() {
                    *sc += data[row + layout.vision.start + j];
                }
            }
        }
        scores.iter_mut().for_each(|v| *v /= denom);
        out.push(top_k_in_order(&scores, keep));
    }
    Ok(out)
}

/// Keeps vision rows `picks[b]` of each item in `[B, S, D]`, and every
/// non-vision row.
pub fn gather_vision(g: &mut Graph<'_>, hidden: Var, layout: &SequenceLayout, picks: &[Vec<usize>]) -> Result<Var> {
    let s = layout.len();
    let rows: Vec<Var> = picks
        .iter()
        .enumerate()
        .map(|(b, p)| {
            let mut idx: Vec<usize> = p.iter().map(|&i| layout.vision.start + i).collect();
            idx.extend(layout.vision.end..s);
            let item = g.slice(hidden, 0, b, b + 1)?;
            g.index_select(item, 1, &idx)
        })
        .collect::<Result<_>>()?;
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        g.concat(&rows, 0)
    }
}

/// Tensor-level FastV selection at one layer.
pub fn fastv_prune(
    hidden: &Tensor,
    layout: &SequenceLayout,
    weights: &Tensor,
    keep: usize,
) -> Result<(Tensor, SequenceLayout, Vec<Vec<usize>>)> {
    let picks = select_by_attention(weights, layout, keep)?;
    let mut g = Graph::new();
    let h = g.constant(hidden.clone());
    let out = gather_vision(&mut g, h, layout, &picks)?;
    Ok((g.value(out).clone(), layout.with_vision_len(keep), picks))
}

/// Keeps the `keep` encoder tokens of largest L2 norm from `[B, N, D]`
/// (or `[B, W, H, D]`, flattened), returning `[B, keep, D]` and the indices.
pub fn encoder_prune(features: &Tensor, keep: usize) -> Result<(Tensor, Vec<Vec<usize>>)> {
    let r = features.rank();
    if r < 3 {
        return Err(Error::Invalid(format!("encoder_prune on rank {r}")));
    }
    let (b, d) = (features.dim(0), features.last_dim());
    let n = features.len() / (b * d);
    if keep == 0 || keep > n {
        return Err(Error::Invalid(format!("cannot keep {keep} of {n} encoder tokens")));
    }
    let flat = features.reshape(&[b, n, d])?;
    let mut parts = Vec::with_capacity(b);
    let mut picks = Vec::with_capacity(b);
    for i in 0..b {
        let item = ops::slice(&flat, 0, i, i + 1)?;
        let norms: Vec<f64> = item.rows().map(|row| libm::sqrt(row.iter().map(|v| v * v).sum())).collect();
        let p = top_k_in_order(&norms, keep);
        parts.push(ops::index_select(&item, 1, &p)?);
        picks.push(p);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok((ops::concat(&refs, 0)?, picks))
}
