//! Re-injection of multi-level encoder features into compressed vision
//! tokens between decoder layers.
//!
//! Each block runs two pre-norm residual sublayers on the vision span:
//! full self-attention over the vision rows plus one text-guided row, and
//! token-to-feature cross-attention where every token queries the fused
//! features (its own `s × s` window in local mode, the whole map in global
//! mode). Both output projections start at zero, so a fresh block is the
//! identity.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::decoder::SequenceLayout;
use crate::error::{Error, Result};
use crate::nn::{self, MultiHeadAttention};
use crate::params::{Init, ParamStore};
use crate::projectors::VisionFeatureMap;
use crate::rng::RngState;
use crate::spatial;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// FLOP-accounting scope used by the block.
pub const SCOPE: &str = "vision_remember";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interaction {
    Local,
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockOrder {
    SelfThenCross,
    CrossThenSelf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisionRememberConfig {
    /// 1-based decoder layers after which a block runs.
    pub insertion_layers: Vec<usize>,
    /// Encoder layers whose outputs are fused, in channel order.
    pub feature_levels: Vec<usize>,
    pub interaction: Interaction,
    pub order: BlockOrder,
    pub downsample: usize,
    pub d_model: usize,
    pub d_vision: usize,
    pub heads: usize,
}

impl Default for VisionRememberConfig {
    fn default() -> Self {
        Self {
            insertion_layers: vec![1, 4],
            feature_levels: vec![7, 15, 23],
            interaction: Interaction::Local,
            order: BlockOrder::SelfThenCross,
            downsample: 3,
            d_model: 64,
            d_vision: 16,
            heads: 4,
        }
    }
}

impl VisionRememberConfig {
    pub fn num_levels(&self) -> usize {
        self.feature_levels.len()
    }

    /// Fused channel width `L·Dv`.
    pub fn channels(&self) -> usize {
        self.num_levels() * self.d_vision
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.feature_levels.is_empty() {
            return Err(Error::Config("feature_levels must name at least one level".into()));
        }
        if self.downsample == 0 {
            return Err(Error::Config("downsample must be positive".into()));
        }
        for &layer in &self.insertion_layers {
            if layer == 0 || layer > num_layers {
                return Err(Error::InsertionLayer { layer, num_layers });
            }
        }
        if self.insertion_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("insertion_layers must be strictly increasing".into()));
        }
        for (what, width) in [("d_model", self.d_model), ("fused channels", self.channels())] {
            if self.heads == 0 || width % self.heads != 0 {
                return Err(Error::Config(format!(
                    "{what} {width} not divisible by {} heads",
                    self.heads
                )));
            }
        }
        Ok(())
    }
}

/// Channel concatenation of the selected encoder levels, `[B, W, H, L·Dv]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiLevelFeatures {
    pub fused: Tensor,
    pub num_levels: usize,
}

impl MultiLevelFeatures {
    pub fn d_vision(&self) -> usize {
        self.fused.last_dim() / self.num_levels
    }

    /// Recovers level `i` from the fused channels.
    pub fn level(&self, i: usize) -> Result<Tensor> {
        let dv = self.d_vision();
        crate::ops::slice(&self.fused, 3, i * dv, (i + 1) * dv)
    }

    /// Selects images by batch index.
    pub fn select(&self, batch: &[usize]) -> Result<Self> {
        Ok(Self {
            fused: crate::ops::index_select(&self.fused, 0, batch)?,
            num_levels: self.num_levels,
        })
    }
}

pub fn fuse_multilevel(levels: &[VisionFeatureMap]) -> Result<MultiLevelFeatures> {
    let first = levels
        .first()
        .ok_or_else(|| Error::Invalid("no feature levels to fuse".into()))?;
    for l in levels {
        if l.data.rank() != 4 || l.data.shape() != first.data.shape() {
            return Err(Error::ShapeMismatch {
                op: "fuse_multilevel",
                lhs: first.data.shape().to_vec(),
                rhs: l.data.shape().to_vec(),
            });
        }
    }
    let parts: Vec<&Tensor> = levels.iter().map(|l| &l.data).collect();
    Ok(MultiLevelFeatures {
        fused: crate::ops::concat(&parts, 3)?,
        num_levels: levels.len(),
    })
}

/// Elementwise max over the sequence axis: `[B, Nt, Dt]` → `[B, 1, Dt]`.
pub fn text_guided_token(g: &mut Graph<'_>, text: Var) -> Result<Var> {
    let shape = g.shape(text);
    if shape.len() != 3 {
        return Err(Error::Invalid(format!("text span must be [B, Nt, Dt], got {shape:?}")));
    }
    g.max_axis(text, 1)
}

/// One block, owning parameters under `vr.{layer}`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionRememberBlock {
    pub cfg: VisionRememberConfig,
    pub layer: usize,
    pub prefix: String,
}

impl VisionRememberBlock {
    pub fn new(cfg: VisionRememberConfig, layer: usize) -> Self {
        Self {
            prefix: format!("vr.{layer}"),
            cfg,
            layer,
        }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    fn self_attn(&self) -> MultiHeadAttention {
        let d = self.cfg.d_model;
        MultiHeadAttention::new(self.name("sa"), d, d, d, self.cfg.heads)
            .expect("validated")
            .with_output(d, true)
    }

    fn cross_attn(&self) -> MultiHeadAttention {
        let c = self.cfg.channels();
        MultiHeadAttention::new(self.name("xa"), c, c, c, self.cfg.heads).expect("validated")
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) {
        let (dt, c) = (self.cfg.d_model, self.cfg.channels());
        nn::init_layer_norm(store, &self.name("sa_ln"), dt, rng);
        self.self_attn().init(store, rng);
        nn::init_layer_norm(store, &self.name("q_ln"), dt, rng);
        nn::init_mlp(store, &self.name("expand"), dt, c, c, rng);
        nn::init_layer_norm(store, &self.name("kv_ln"), c, rng);
        self.cross_attn().init(store, rng);
        nn::init_linear(store, &self.name("proj"), c, dt, Init::Zeros, rng);
    }

    /// Two-layer MLP `Dt → L·Dv` applied per token.
    pub fn expand_query(&self, g: &mut Graph<'_>, tokens: Var) -> Result<Var> {
        nn::mlp(g, &self.name("expand"), tokens)
    }

    /// Cross-attention output before the projection back to `Dt`:
    /// `[B, n², Dt]` tokens × `[B, W, H, L·Dv]` features → `[B, n², L·Dv]`.
    ///
    /// `mask` applies only to the global form and must be `[n², W·H]`.
    pub fn cross_attention_core(
        &self,
        g: &mut Graph<'_>,
        tokens: Var,
        feats: Var,
        interaction: Interaction,
        mask: Option<&Tensor>,
    ) -> Result<Var> {
        let s = self.cfg.downsample;
        let c = self.cfg.channels();
        let (b, w, h, fc) = spatial::grid_dims(g.shape(feats), s)?;
        let n2 = (w / s) * (h / s);
        let tshape = g.shape(tokens).to_vec();
        if fc != c || tshape.len() != 3 || tshape[0] != b || tshape[1] != n2 {
            return Err(Error::ShapeMismatch {
                op: "cross_attention",
                lhs: tshape,
                rhs: g.shape(feats).to_vec(),
            });
        }
        let normed = nn::layer_norm(g, &self.name("q_ln"), tokens)?;
        let q = self.expand_query(g, normed)?;
        let kv = nn::layer_norm(g, &self.name("kv_ln"), feats)?;
        let attn = self.cross_attn();
        match interaction {
            Interaction::Local => {
                let q = g.reshape(q, &[b * n2, 1, c])?;
                let win = spatial::window_partition(g, kv, s)?;
                let out = attn.forward(g, q, win, None)?.out;
                g.reshape(out, &[b, n2, c])
            }
            Interaction::Global => {
                let flat = g.reshape(kv, &[b, w * h, c])?;
                let m = mask.map(|m| g.constant(m.clone()));
                Ok(attn.forward(g, q, flat, m)?.out)
            }
        }
    }

    /// Residual cross-attention sublayer on `[B, n², Dt]` tokens.
    pub fn cross_attention(&self, g: &mut Graph<'_>, tokens: Var, feats: Var) -> Result<Var> {
        let core = self.cross_attention_core(g, tokens, feats, self.cfg.interaction, None)?;
        let back = nn::linear(g, &self.name("proj"), core)?;
        g.add(tokens, back)
    }

    /// Residual full self-attention over `[vision; guide]`; the guide row's
    /// output is dropped.
    pub fn bidirectional_self_attention(&self, g: &mut Graph<'_>, vision: Var, guide: Var) -> Result<Var> {
        let n2 = g.shape(vision)[1];
        let x = g.concat(&[vision, guide], 1)?;
        let normed = nn::layer_norm(g, &self.name("sa_ln"), x)?;
        let mixed = self.self_attn().forward(g, normed, normed, None)?.out;
        let y = g.add(x, mixed)?;
        g.slice(y, 1, 0, n2)
    }

    /// Rewrites the vision span of `hidden` `[B, S, Dt]`; every other
    /// position is copied through unchanged.
    pub fn forward(&self, g: &mut Graph<'_>, hidden: Var, layout: &SequenceLayout, feats: Var) -> Result<Var> {
        let seq = g.shape(hidden)[1];
        let (vision, text) = (layout.vision, layout.text);
        if vision.is_empty() || vision.start != 0 {
            return Err(Error::Invalid("vision span must be a nonempty prefix".into()));
        }
        if text.is_empty() {
            return Err(Error::Invalid("text span is empty".into()));
        }
        let prev = g.set_scope(SCOPE);
        let v0 = g.slice(hidden, 1, vision.start, vision.end)?;
        let t = g.slice(hidden, 1, text.start, text.end)?;
        let guide = text_guided_token(g, t)?;
        let v = match self.cfg.order {
            BlockOrder::SelfThenCross => {
                let v1 = self.bidirectional_self_attention(g, v0, guide)?;
                self.cross_attention(g, v1, feats)?
            }
            BlockOrder::CrossThenSelf => {
                let v1 = self.cross_attention(g, v0, feats)?;
                self.bidirectional_self_attention(g, v1, guide)?
            }
        };
        let out = if vision.end < seq {
            let rest = g.slice(hidden, 1, vision.end, seq)?;
            g.concat(&[v, rest], 1)?
        } else {
            v
        };
        g.set_scope(&prev);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::Span;
    use crate::gradcheck::{check_gradient_with_params, GradCheckOptions};

    fn cfg(s: usize, dv: usize, levels: usize, dt: usize) -> VisionRememberConfig {
        VisionRememberConfig {
            insertion_layers: vec![1],
            feature_levels: (1..=levels).collect(),
            downsample: s,
            d_model: dt,
            d_vision: dv,
            ..VisionRememberConfig::default()
        }
    }

    /// Block with every parameter random, including the zero-initialised projections.
    fn random_block(c: VisionRememberConfig, seed: u64) -> (VisionRememberBlock, ParamStore) {
        let block = VisionRememberBlock::new(c, 1);
        let mut store = ParamStore::new();
        let mut rng = RngState::new(seed);
        block.init(&mut store, &mut rng);
        let names: Vec<String> = store.names().cloned().collect();
        for n in names {
            let shape = store.get(&n).unwrap().shape().to_vec();
            store.insert(n, Tensor::randn(&shape, 0.5, &mut rng));
        }
        (block, store)
    }

    fn run<F>(store: &ParamStore, inputs: &[Tensor], f: F) -> Tensor
    where
        F: FnOnce(&mut Graph<'_>, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::inference(store);
        let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn fuse_concatenates_in_level_order() {
        let mut rng = RngState::new(1);
        let a = Tensor::randn(&[1, 2, 2, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[1, 2, 2, 3], 1.0, &mut rng);
        let maps = [
            VisionFeatureMap { data: a.clone(), level: 1 },
            VisionFeatureMap { data: b.clone(), level: 2 },
        ];
        let f = fuse_multilevel(&maps).unwrap();
        assert_eq!(f.fused.shape(), &[1, 2, 2, 6]);
        assert!(f.level(0).unwrap().bit_eq(&a));
        assert!(f.level(1).unwrap().bit_eq(&b));
        let single = fuse_multilevel(&maps[..1]).unwrap();
        assert!(single.fused.bit_eq(&a));
        let three: Vec<VisionFeatureMap> = (0..3)
            .map(|l| VisionFeatureMap { data: Tensor::zeros(&[1, 2, 2, 16]), level: l })
            .collect();
        assert_eq!(fuse_multilevel(&three).unwrap().fused.last_dim(), 48);
        let bad = VisionFeatureMap { data: Tensor::zeros(&[1, 3, 2, 3]), level: 3 };
        assert!(fuse_multilevel(&[maps[0].clone(), bad]).is_err());
    }

    #[test]
    fn expand_query_with_zero_weights_returns_bias() {
        let c = cfg(2, 16, 3, 32);
        let block = VisionRememberBlock::new(c, 1);
        let mut store = ParamStore::new();
        block.init(&mut store, &mut RngState::new(0));
        store.insert("vr.1.expand.fc2.w", Tensor::zeros(&[48, 48]));
        let bias = Tensor::randn(&[48], 1.0, &mut RngState::new(2));
        store.insert("vr.1.expand.fc2.b", bias.clone());
        let x = Tensor::randn(&[2, 4, 32], 1.0, &mut RngState::new(3));
        let y = run(&store, &[x], |g, v| block.expand_query(g, v[0]));
        assert_eq!(y.shape(), &[2, 4, 48]);
        for row in y.rows() {
            assert_eq!(row, bias.data());
        }
    }

    #[test]
    fn text_guide_is_elementwise_max() {
        let x = Tensor::new([1, 2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        let y = run(&ParamStore::new(), &[x.clone()], |g, v| text_guided_token(g, v[0]));
        assert_eq!(y.data(), &[3.0, 5.0]);
        let one = Tensor::new([1, 1, 2], vec![4.0, -1.0]).unwrap();
        let y = run(&ParamStore::new(), &[one.clone()], |g, v| text_guided_token(g, v[0]));
        assert!(y.bit_eq(&one));
    }

    #[test]
    fn local_equals_block_masked_global() {
        let c = cfg(3, 4, 3, 16);
        let (block, store) = random_block(c, 4);
        let mut rng = RngState::new(5);
        let tokens = Tensor::randn(&[2, 4, 16], 1.0, &mut rng);
        let feats = Tensor::randn(&[2, 6, 6, 12], 1.0, &mut rng);
        let mask = spatial::block_diagonal_mask(6, 6, 3).unwrap();
        let local = run(&store, &[tokens.clone(), feats.clone()], |g, v| {
            block.cross_attention_core(g, v[0], v[1], Interaction::Local, None)
        });
        let masked = run(&store, &[tokens.clone(), feats.clone()], |g, v| {
            block.cross_attention_core(g, v[0], v[1], Interaction::Global, Some(&mask))
        });
        let global = run(&store, &[tokens, feats], |g, v| {
            block.cross_attention_core(g, v[0], v[1], Interaction::Global, None)
        });
        assert!(local.max_abs_diff(&masked) <= 1e-10);
        assert!(local.max_abs_diff(&global) > 1e-6);
    }

    #[test]
    fn constant_features_give_identical_rows() {
        let (block, store) = random_block(cfg(2, 4, 1, 8), 6);
        let tokens = Tensor::randn(&[1, 4, 8], 1.0, &mut RngState::new(7));
        let mut feats = Tensor::zeros(&[1, 4, 4, 4]);
        for (i, v) in feats.data_mut().iter_mut().enumerate() {
            *v = [0.3, -1.0, 2.0, 0.5][i % 4];
        }
        let out = run(&store, &[tokens, feats], |g, v| {
            block.cross_attention_core(g, v[0], v[1], Interaction::Local, None)
        });
        let first = out.rows().next().unwrap().to_vec();
        for row in out.rows() {
            for (a, b) in row.iter().zip(&first) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn local_output_ignores_other_windows() {
        let (block, store) = random_block(cfg(2, 4, 1, 8), 8);
        let mut rng = RngState::new(9);
        let tokens = Tensor::randn(&[1, 4, 8], 1.0, &mut rng);
        let feats = Tensor::randn(&[1, 4, 4, 4], 1.0, &mut rng);
        let mut moved = feats.clone();
        moved.set(&[0, 0, 1, 2], 7.0);
        let core = |f: &Tensor| {
            run(&store, &[tokens.clone(), f.clone()], |g, v| {
                block.cross_attention_core(g, v[0], v[1], Interaction::Local, None)
            })
        };
        let (a, b) = (core(&feats), core(&moved));
        for t in 1..4 {
            for c in 0..4 {
                assert_eq!(a.at(&[0, t, c]), b.at(&[0, t, c]));
            }
        }
        assert!((0..4).any(|c| a.at(&[0, 0, c]) != b.at(&[0, 0, c])));
    }

    #[test]
    fn single_pixel_map_local_equals_global() {
        let (block, store) = random_block(cfg(1, 4, 1, 8), 10);
        let mut rng = RngState::new(11);
        let tokens = Tensor::randn(&[1, 1, 8], 1.0, &mut rng);
        let feats = Tensor::randn(&[1, 1, 1, 4], 1.0, &mut rng);
        let run_mode = |mode| {
            run(&store, &[tokens.clone(), feats.clone()], |g, v| {
                block.cross_attention_core(g, v[0], v[1], mode, None)
            })
        };
        assert!(run_mode(Interaction::Local).max_abs_diff(&run_mode(Interaction::Global)) < 1e-14);
    }

    /// Per-head loop reference for the self-attention sublayer.
    fn naive_self_attention(store: &ParamStore, x: &Tensor, heads: usize) -> Tensor {
        let p = |n: &str| store.get(&format!("vr.1.{n}")).unwrap();
        let (rows, d) = (x.dim(1), x.dim(2));
        let hd = d / heads;
        let ln = |r: &[f64]| -> Vec<f64> {
            let mean = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / libm::sqrt(var + crate::ops::LAYER_NORM_EPS);
            (0..d)
                .map(|i| (r[i] - mean) * inv * p("sa_ln.gamma").data()[i] + p("sa_ln.beta").data()[i])
                .collect()
        };
        let lin = |r: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
            let (din, dout) = (w.dim(0), w.dim(1));
            (0..dout)
                .map(|j| b.data()[j] + (0..din).map(|i| r[i] * w.data()[i * dout + j]).sum::<f64>())
                .collect()
        };
        let normed: Vec<Vec<f64>> = x.rows().map(ln).collect();
        let q: Vec<Vec<f64>> = normed.iter().map(|r| lin(r, p("sa.q.w"), p("sa.q.b"))).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|r| lin(r, p("sa.k.w"), p("sa.k.b"))).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|r| lin(r, p("sa.v.w"), p("sa.v.b"))).collect();
        let mut out = Tensor::zeros(x.shape());
        for i in 0..rows {
            let mut merged = vec![0.0; d];
            for h in 0..heads {
                let span = h * hd..(h + 1) * hd;
                let scores: Vec<f64> = (0..rows)
                    .map(|j| span.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / libm::sqrt(hd as f64))
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| libm::exp(s - mx)).collect();
                let z: f64 = e.iter().sum();
                for c in span {
                    merged[c] = (0..rows).map(|j| e[j] / z * v[j][c]).sum();
                }
            }
            let o = lin(&merged, p("sa.o.w"), p("sa.o.b"));
            for c in 0..d {
                out.set(&[0, i, c], x.at(&[0, i, c]) + o[c]);
            }
        }
        out
    }

    #[test]
    fn self_attention_matches_loop_oracle() {
        let (block, store) = random_block(cfg(2, 4, 1, 8), 12);
        let mut rng = RngState::new(13);
        let vision = Tensor::randn(&[1, 4, 8], 1.0, &mut rng);
        let guide = Tensor::randn(&[1, 1, 8], 1.0, &mut rng);
        let got = run(&store, &[vision.clone(), guide.clone()], |g, v| {
            block.bidirectional_self_attention(g, v[0], v[1])
        });
        let full = crate::ops::concat(&[&vision, &guide], 1).unwrap();
        let want = crate::ops::slice(&naive_self_attention(&store, &full, 4), 1, 0, 4).unwrap();
        assert!(got.max_abs_diff(&want) <= 1e-12);
    }

    fn layout(n2: usize, nt: usize, nr: usize) -> SequenceLayout {
        SequenceLayout {
            vision: Span::new(0, n2),
            text: Span::new(n2, n2 + nt),
            response: Span::new(n2 + nt, n2 + nt + nr),
        }
    }

    #[test]
    fn block_is_identity_at_init_and_passes_other_spans() {
        let c = cfg(2, 4, 2, 8);
        let block = VisionRememberBlock::new(c.clone(), 1);
        let mut store = ParamStore::new();
        block.init(&mut store, &mut RngState::new(14));
        let mut rng = RngState::new(15);
        let hidden = Tensor::randn(&[2, 7, 8], 1.0, &mut rng);
        let feats = Tensor::randn(&[2, 4, 4, 8], 1.0, &mut rng);
        let lay = layout(4, 2, 1);
        let out = run(&store, &[hidden.clone(), feats.clone()], |g, v| block.forward(g, v[0], &lay, v[1]));
        assert!(out.bit_eq(&hidden));

        let (block, store) = random_block(c, 16);
        let out = run(&store, &[hidden.clone(), feats], |g, v| block.forward(g, v[0], &lay, v[1]));
        let tail = |t: &Tensor| crate::ops::slice(t, 1, 4, 7).unwrap();
        assert!(tail(&out).bit_eq(&tail(&hidden)));
        assert!(out.max_abs_diff(&hidden) > 1e-3);
    }

    #[test]
    fn text_row_order_does_not_matter() {
        let (block, store) = random_block(cfg(2, 4, 1, 8), 17);
        let mut rng = RngState::new(18);
        let hidden = Tensor::randn(&[1, 7, 8], 1.0, &mut rng);
        let feats = Tensor::randn(&[1, 4, 4, 4], 1.0, &mut rng);
        let lay = layout(4, 3, 0);
        let swapped = crate::ops::index_select(&hidden, 1, &[0, 1, 2, 3, 6, 4, 5]).unwrap();
        let vis = |h: &Tensor| {
            let out = run(&store, &[h.clone(), feats.clone()], |g, v| block.forward(g, v[0], &lay, v[1]));
            crate::ops::slice(&out, 1, 0, 4).unwrap()
        };
        assert!(vis(&hidden).bit_eq(&vis(&swapped)));
    }

    #[test]
    fn rejects_bad_insertion_layers() {
        let mut c = VisionRememberConfig::default();
        assert!(c.validate(6).is_ok());
        c.insertion_layers = vec![0];
        assert!(c.validate(6).is_err());
        c.insertion_layers = vec![7];
        assert_eq!(c.validate(6).unwrap_err(), Error::InsertionLayer { layer: 7, num_layers: 6 });
    }

    #[test]
    fn full_block_gradient() {
        for order in [BlockOrder::SelfThenCross, BlockOrder::CrossThenSelf] {
            for interaction in [Interaction::Local, Interaction::Global] {
                let mut c = cfg(2, 4, 1, 8);
                c.order = order;
                c.interaction = interaction;
                let (block, store) = random_block(c, 19);
                let mut rng = RngState::new(20);
                let hidden = Tensor::randn(&[1, 6, 8], 1.0, &mut rng);
                let feats = Tensor::randn(&[1, 4, 4, 4], 1.0, &mut rng);
                let lay = layout(4, 2, 0);
                let rep = check_gradient_with_params(
                    &store,
                    |g, v| block.forward(g, v[0], &lay, v[1]),
                    &[hidden, feats],
                    &GradCheckOptions {
                        max_coords_per_tensor: Some(8),
                        ..GradCheckOptions::default()
                    },
                )
                .unwrap();
                assert!(rep.max_rel_error <= 1e-4, "{order:?} {interaction:?} {rep:?}");
            }
        }
    }
}
