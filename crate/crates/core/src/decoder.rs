//! Causal multimodal decoder: vision tokens are prepended to text, run
//! through pre-norm causal layers with optional Vision Remember blocks and
//! token pruning between layers, and read out as next-token logits.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attention;
use crate::error::{Error, Result};
use crate::nn::{self, MultiHeadAttention};
use crate::params::{Init, ParamStore};
use crate::pruning::{self, KeepPlan};
use crate::rng::RngState;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;
use crate::vision_remember::{VisionRememberBlock, VisionRememberConfig};

/// FLOP scopes.
pub const SCOPE_LAYERS: &str = "decoder";
pub const SCOPE_HEAD: &str = "lm_head";

const EMBED_STD: f64 = 0.5;

/// Half-open index range `[start, end)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.start..self.end).contains(&i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub vision: Span,
    pub text: Span,
    pub response: Span,
}

impl SequenceLayout {
    pub fn new(n_vision: usize, n_text: usize, n_response: usize) -> Self {
        let t = n_vision + n_text;
        Self {
            vision: Span::new(0, n_vision),
            text: Span::new(n_vision, t),
            response: Span::new(t, t + n_response),
        }
    }

    pub fn len(&self) -> usize {
        self.response.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The same text and response lengths behind `n_vision` vision tokens.
    pub fn with_vision_len(&self, n_vision: usize) -> Self {
        Self::new(n_vision, self.text.len(), self.response.len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub vr: Option<VisionRememberConfig>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 6,
            d_model: 64,
            heads: 4,
            d_ff: 128,
            vocab_size: 64,
            max_seq_len: 128,
            vr: None,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("decoder extents must be positive".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if let Some(vr) = &self.vr {
            vr.validate(self.num_layers)?;
            if vr.d_model != self.d_model {
                return Err(Error::Config(format!(
                    "vision remember width {} differs from decoder width {}",
                    vr.d_model, self.d_model
                )));
            }
        }
        Ok(())
    }

    pub fn insertion_layers(&self) -> &[usize] {
        self.vr.as_ref().map_or(&[], |v| &v.insertion_layers)
    }
}

/// Keys and values of one layer, `[B, heads, len, head_dim]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache {
    pub k: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KVCache {
    pub layers: Vec<LayerCache>,
    /// Absolute position of the next token (pruning may shorten the
    /// per-layer caches below this).
    pub next_pos: usize,
}

impl KVCache {
    pub fn len(&self, layer: usize) -> usize {
        self.layers.get(layer).map_or(0, |c| c.k.dim(2))
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Cached key/value elements over all layers.
    pub fn elements(&self) -> usize {
        self.layers.iter().map(|c| c.k.len() + c.v.len()).sum()
    }
}

/// Everything a prefill pass produces.
pub struct Forward {
    /// `[B, S', V]` over the surviving positions.
    pub logits: Var,
    pub hidden: Var,
    /// Layout after any pruning.
    pub layout: SequenceLayout,
    /// Sequence length entering each layer.
    pub tokens_per_layer: Vec<usize>,
    /// Surviving vision indices per batch item after the final prune.
    pub kept: Option<Vec<Vec<usize>>>,
    /// Self-attention weights `[B, heads, S, S]` per layer when requested.
    pub attention: Vec<Tensor>,
    /// Hidden state after each layer (and its block, if any) when requested.
    pub layer_hidden: Vec<Tensor>,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions<'a> {
    pub prune: Option<&'a KeepPlan>,
    pub keep_attention: bool,
    pub keep_hidden: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    blocks: Vec<VisionRememberBlock>,
}

impl Decoder {
    pub fn new(cfg: DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = match &cfg.vr {
            Some(vr) => vr
                .insertion_layers
                .iter()
                .map(|&l| VisionRememberBlock::new(vr.clone(), l))
                .collect(),
            None => Vec::new(),
        };
        Ok(Self { cfg, blocks })
    }

    pub fn blocks(&self) -> &[VisionRememberBlock] {
        &self.blocks
    }

    fn attn(&self, layer: usize) -> MultiHeadAttention {
        let d = self.cfg.d_model;
        MultiHeadAttention::new(format!("layer.{layer}.attn"), d, d, d, self.cfg.heads)
            .expect("validated")
            .with_output(d, false)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) {
        let c = &self.cfg;
        store.init("tok_emb", &[c.vocab_size, c.d_model], Init::Normal(EMBED_STD), rng);
        store.init("pos_emb", &[c.max_seq_len, c.d_model], Init::Normal(EMBED_STD), rng);
        for l in 1..=c.num_layers {
            nn::init_layer_norm(store, &format!("layer.{l}.ln1"), c.d_model, rng);
            self.attn(l).init(store, rng);
            nn::init_layer_norm(store, &format!("layer.{l}.ln2"), c.d_model, rng);
            nn::init_mlp(store, &format!("layer.{l}.mlp"), c.d_model, c.d_ff, c.d_model, rng);
        }
        nn::init_layer_norm(store, "ln_f", c.d_model, rng);
        nn::init_linear(store, "head", c.d_model, c.vocab_size, Init::Normal(0.02), rng);
        for b in &self.blocks {
            b.init(store, rng);
        }
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&t| t >= self.cfg.vocab_size) {
            Some(&id) => Err(Error::TokenOutOfVocab {
                id,
                vocab: self.cfg.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Looks up `[B, N]` ids (given row-major) as `[B, N, Dt]`.
    fn lookup(&self, g: &mut Graph<'_>, ids: &[usize], batch: usize) -> Result<Var> {
        self.check_ids(ids)?;
        let table = g.param("tok_emb")?;
        let rows = g.index_select(table, 0, ids)?;
        g.reshape(rows, &[batch, ids.len() / batch, self.cfg.d_model])
    }

    /// `[vision; text]` plus positions. `text` rows hold the prompt followed
    /// by `n_response` response ids.
    pub fn embed(
        &self,
        g: &mut Graph<'_>,
        vision: Option<Var>,
        text: &[Vec<usize>],
        n_response: usize,
    ) -> Result<(Var, SequenceLayout)> {
        let batch = text.len();
        let nt = text.first().map_or(0, Vec::len);
        if batch == 0 || nt <= n_response || text.iter().any(|r| r.len() != nt) {
            return Err(Error::Invalid("text must be a nonempty rectangular batch with a prompt".into()));
        }
        let flat: Vec<usize> = text.iter().flatten().copied().collect();
        let t = self.lookup(g, &flat, batch)?;
        let (x, nv) = match vision {
            Some(v) => {
                let shape = g.shape(v).to_vec();
                if shape.len() != 3 || shape[0] != batch || shape[2] != self.cfg.d_model {
                    return Err(Error::ShapeMismatch {
                        op: "embed",
                        lhs: shape,
                        rhs: vec![batch, 0, self.cfg.d_model],
                    });
                }
                (g.concat(&[v, t], 1)?, shape[1])
            }
            None => (t, 0),
        };
        let layout = SequenceLayout::new(nv, nt - n_response, n_response);
        let s = layout.len();
        if s > self.cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: s,
                max: self.cfg.max_seq_len,
            });
        }
        let pos = g.param("pos_emb")?;
        let pos = g.slice(pos, 0, 0, s)?;
        Ok((g.add(x, pos)?, layout))
    }

    /// One pre-norm causal layer over `[B, S, Dt]`; returns the new hidden
    /// state, attention weights, and this layer's keys and values.
    pub fn layer(&self, g: &mut Graph<'_>, l: usize, x: Var, mask: Option<Var>) -> Result<(Var, Var, Var, Var)> {
        let attn = self.attn(l);
        let n = nn::layer_norm(g, &format!("layer.{l}.ln1"), x)?;
        let q = attn.project_q(g, n)?;
        let (k, v) = attn.project_kv(g, n)?;
        let a = attn.attend_heads(g, q, k, v, mask)?;
        let h = g.add(x, a.out)?;
        let n = nn::layer_norm(g, &format!("layer.{l}.ln2"), h)?;
        let m = nn::mlp(g, &format!("layer.{l}.mlp"), n)?;
        Ok((g.add(h, m)?, a.weights, k, v))
    }

    fn head(&self, g: &mut Graph<'_>, h: Var) -> Result<Var> {
        let prev = g.set_scope(SCOPE_HEAD);
        let n = nn::layer_norm(g, "ln_f", h)?;
        let out = nn::linear(g, "head", n);
        g.set_scope(&prev);
        out
    }

    /// Prefill over an embedded sequence. `feats` are the fused multi-level
    /// features `[B, W, H, L·Dv]` consumed by Vision Remember blocks.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        layout: SequenceLayout,
        feats: Option<Var>,
        opts: &ForwardOptions<'_>,
        mut cache: Option<&mut KVCache>,
    ) -> Result<Forward> {
        if !self.blocks.is_empty() && feats.is_none() {
            return Err(Error::Invalid("vision remember blocks need fused features".into()));
        }
        if !self.blocks.is_empty() && opts.prune.is_some() {
            return Err(Error::Config("token pruning and vision remember are exclusive".into()));
        }
        let batch = g.shape(x)[0];
        let full_len = layout.len();
        let prev = g.set_scope(SCOPE_LAYERS);
        let mut h = x;
        let mut layout = layout;
        let mut kept: Option<Vec<Vec<usize>>> = None;
        let mut tokens_per_layer = Vec::with_capacity(self.cfg.num_layers);
        let mut attention = Vec::new();
        let mut layer_hidden = Vec::new();
        if let Some(c) = cache.as_deref_mut() {
            c.layers.clear();
        }
        for l in 1..=self.cfg.num_layers {
            let s = layout.len();
            tokens_per_layer.push(s);
            let mask = g.constant(attention::causal_mask(s));
            let (out, weights, k, v) = self.layer(g, l, h, Some(mask))?;
            h = out;
            if opts.keep_attention {
                attention.push(g.value(weights).clone());
            }
            if let Some(c) = cache.as_deref_mut() {
                c.layers.push(LayerCache {
                    k: g.value(k).clone(),
                    v: g.value(v).clone(),
                });
            }
            if let Some(block) = self.blocks.iter().find(|b| b.layer == l) {
                h = block.forward(g, h, &layout, feats.expect("checked above"))?;
                g.set_scope(SCOPE_LAYERS);
            }
            if let Some(&keep) = opts.prune.and_then(|p| p.after_layer.get(&l)) {
                let w = g.value(weights).clone();
                let picks = pruning::select_by_attention(&w, &layout, keep)?;
                h = pruning::gather_vision(g, h, &layout, &picks)?;
                kept = Some(match kept {
                    // compose with the previous selection to keep original indices
                    Some(prev) => prev
                        .iter()
                        .zip(&picks)
                        .map(|(p, q)| q.iter().map(|&i| p[i]).collect())
                        .collect(),
                    None => picks,
                });
                layout = layout.with_vision_len(keep);
            }
            if opts.keep_hidden {
                layer_hidden.push(g.value(h).clone());
            }
        }
        g.set_scope(&prev);
        let logits = self.head(g, h)?;
        if let Some(c) = cache {
            c.next_pos = full_len;
        }
        debug_assert_eq!(g.shape(h)[0], batch);
        Ok(Forward {
            logits,
            hidden: h,
            layout,
            tokens_per_layer,
            kept,
            attention,
            layer_hidden,
        })
    }

    /// One cached decode step for `ids` (one per batch item); returns
    /// logits `[B, V]`.
    pub fn decode_step(&self, store: &ParamStore, cache: &mut KVCache, ids: &[usize]) -> Result<Tensor> {
        let mut g = Graph::inference(store);
        let out = self.decode_step_on(&mut g, cache, ids)?;
        Ok(g.value(out).clone())
    }

    /// [`Decoder::decode_step`] on a caller-supplied graph (for FLOP counts).
    pub fn decode_step_on(&self, g: &mut Graph<'_>, cache: &mut KVCache, ids: &[usize]) -> Result<Var> {
        if cache.layers.len() != self.cfg.num_layers {
            return Err(Error::CacheMismatch {
                cached: cache.layers.len(),
                expected: self.cfg.num_layers,
            });
        }
        let pos = cache.next_pos;
        if pos >= self.cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: pos + 1,
                max: self.cfg.max_seq_len,
            });
        }
        let batch = ids.len();
        let x = self.lookup(g, ids, batch)?;
        let p = g.param("pos_emb")?;
        let p = g.slice(p, 0, pos, pos + 1)?;
        let mut h = g.add(x, p)?;
        let prev = g.set_scope(SCOPE_LAYERS);
        for l in 1..=self.cfg.num_layers {
            let attn = self.attn(l);
            let n = nn::layer_norm(g, &format!("layer.{l}.ln1"), h)?;
            let q = attn.project_q(g, n)?;
            let (k, v) = attn.project_kv(g, n)?;
            let slot = &mut cache.layers[l - 1];
            let kc = g.constant(slot.k.clone());
            let vc = g.constant(slot.v.clone());
            let k = g.concat(&[kc, k], 2)?;
            let v = g.concat(&[vc, v], 2)?;
            slot.k = g.value(k).clone();
            slot.v = g.value(v).clone();
            let a = attn.attend_heads(g, q, k, v, None)?;
            let r = g.add(h, a.out)?;
            let n = nn::layer_norm(g, &format!("layer.{l}.ln2"), r)?;
            let m = nn::mlp(g, &format!("layer.{l}.mlp"), n)?;
            h = g.add(r, m)?;
        }
        g.set_scope(&prev);
        cache.next_pos += 1;
        let logits = self.head(g, h)?;
        g.reshape(logits, &[batch, self.cfg.vocab_size])
    }
}

/// Result of greedy decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub ids: Vec<Vec<usize>>,
    /// Logits `[B, V]` that chose each generated token.
    pub step_logits: Vec<Tensor>,
}

/// Argmax decoding of `max_new` tokens after `prompt` (one row per batch
/// item). Vision Remember runs during prefill only.
pub fn greedy_decode(
    dec: &Decoder,
    store: &ParamStore,
    vision: Option<&Tensor>,
    prompt: &[Vec<usize>],
    feats: Option<&Tensor>,
    max_new: usize,
    use_cache: bool,
) -> Result<Decoded> {
    let batch = prompt.len();
    let mut ids: Vec<Vec<usize>> = vec![Vec::new(); batch];
    let mut step_logits = Vec::with_capacity(max_new);
    if max_new == 0 {
        return Ok(Decoded { ids, step_logits });
    }
    let last_logits = |g: &Graph<'_>, f: &Forward| -> Result<Tensor> {
        let s = f.layout.len();
        let all = g.value(f.logits);
        let picks: Vec<Tensor> = (0..batch)
            .map(|b| {
                let row = crate::ops::slice(all, 0, b, b + 1)?;
                crate::ops::slice(&row, 1, s - 1, s)
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = picks.iter().collect();
        crate::ops::concat(&refs, 0)?.reshape(&[batch, dec.cfg.vocab_size])
    };
    let prefill = |g: &mut Graph<'_>, text: &[Vec<usize>], n_resp: usize, cache: Option<&mut KVCache>| -> Result<Forward> {
        let v = vision.map(|t| g.constant(t.clone()));
        let f = feats.map(|t| g.constant(t.clone()));
        let (x, layout) = dec.embed(g, v, text, n_resp)?;
        dec.forward(g, x, layout, f, &ForwardOptions::default(), cache)
    };
    let push = |ids: &mut Vec<Vec<usize>>, logits: &Tensor| {
        for (row, t) in ids.iter_mut().zip(logits.argmax_last()) {
            row.push(t);
        }
    };

    if use_cache {
        let mut cache = KVCache::default();
        let mut g = Graph::inference(store);
        let f = prefill(&mut g, prompt, 0, Some(&mut cache))?;
        let mut logits = last_logits(&g, &f)?;
        for step in 0..max_new {
            push(&mut ids, &logits);
            step_logits.push(logits);
            if step + 1 == max_new {
                break;
            }
            let next: Vec<usize> = ids.iter().map(|r| r[step]).collect();
            logits = dec.decode_step(store, &mut cache, &next)?;
        }
    } else {
        for step in 0..max_new {
            let text: Vec<Vec<usize>> = prompt
                .iter()
                .zip(&ids)
                .map(|(p, r)| p.iter().chain(r).copied().collect())
                .collect();
            let mut g = Graph::inference(store);
            let f = prefill(&mut g, &text, step, None)?;
            let logits = last_logits(&g, &f)?;
            push(&mut ids, &logits);
            step_logits.push(logits);
        }
    }
    Ok(Decoded { ids, step_logits })
}
