//! Parameterised building blocks: linear maps, layer norm, MLPs and
//! multi-head attention. Parameters live in a [`ParamStore`] under dotted
//! names derived from a prefix.

use alloc::format;
use alloc::string::String;

use crate::attention;
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::rng::RngState;
use crate::tape::{Graph, Var};

fn fan_in(din: usize) -> Init {
    Init::Normal(1.0 / libm::sqrt(din as f64))
}

pub fn init_linear(store: &mut ParamStore, prefix: &str, din: usize, dout: usize, w: Init, rng: &mut RngState) {
    store.init(format!("{prefix}.w"), &[din, dout], w, rng);
    store.init(format!("{prefix}.b"), &[dout], Init::Zeros, rng);
}

pub fn init_linear_default(store: &mut ParamStore, prefix: &str, din: usize, dout: usize, rng: &mut RngState) {
    init_linear(store, prefix, din, dout, fan_in(din), rng);
}

/// `x · W + b` over the last axis.
pub fn linear(g: &mut Graph<'_>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut RngState) {
    store.init(format!("{prefix}.gamma"), &[d], Init::Ones, rng);
    store.init(format!("{prefix}.beta"), &[d], Init::Zeros, rng);
}

pub fn layer_norm(g: &mut Graph<'_>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param(&format!("{prefix}.gamma"))?;
    let beta = g.param(&format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta)
}

/// Two-layer GELU MLP `din → hidden → dout`.
pub fn init_mlp(store: &mut ParamStore, prefix: &str, din: usize, hidden: usize, dout: usize, rng: &mut RngState) {
    init_linear_default(store, &format!("{prefix}.fc1"), din, hidden, rng);
    init_linear_default(store, &format!("{prefix}.fc2"), hidden, dout, rng);
}

pub fn mlp(g: &mut Graph<'_>, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, &format!("{prefix}.fc1"), x)?;
    let h = g.gelu(h);
    linear(g, &format!("{prefix}.fc2"), h)
}

/// Multi-head attention with separate query and key/value sources.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub prefix: String,
    pub q_dim: usize,
    pub kv_dim: usize,
    /// Total width of the projected queries, keys and values.
    pub inner: usize,
    pub heads: usize,
    /// Output projection `inner → out`; `None` returns the merged heads.
    pub out_dim: Option<usize>,
    pub zero_init_out: bool,
}

/// Result of an attention application.
pub struct Attended {
    pub out: Var,
    /// Softmax weights `[.., heads, Lq, Lk]`.
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new(prefix: impl Into<String>, q_dim: usize, kv_dim: usize, inner: usize, heads: usize) -> Result<Self> {
        if heads == 0 || inner % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {inner} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            prefix: prefix.into(),
            q_dim,
            kv_dim,
            inner,
            heads,
            out_dim: None,
            zero_init_out: false,
        })
    }

    pub fn with_output(mut self, out_dim: usize, zero_init: bool) -> Self {
        self.out_dim = Some(out_dim);
        self.zero_init_out = zero_init;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.inner / self.heads
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) {
        init_linear_default(store, &self.name("q"), self.q_dim, self.inner, rng);
        init_linear_default(store, &self.name("k"), self.kv_dim, self.inner, rng);
        init_linear_default(store, &self.name("v"), self.kv_dim, self.inner, rng);
        if let Some(out) = self.out_dim {
            let w = if self.zero_init_out { Init::Zeros } else { fan_in(self.inner) };
            init_linear(store, &self.name("o"), self.inner, out, w, rng);
        }
    }

    /// `[.., L, q_dim]` → `[.., heads, L, head_dim]`.
    pub fn project_q(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let q = linear(g, &self.name("q"), x)?;
        split_heads(g, q, self.heads)
    }

    /// Keys and values, each `[.., heads, L, head_dim]`.
    pub fn project_kv(&self, g: &mut Graph<'_>, x: Var) -> Result<(Var, Var)> {
        let k = linear(g, &self.name("k"), x)?;
        let v = linear(g, &self.name("v"), x)?;
        Ok((split_heads(g, k, self.heads)?, split_heads(g, v, self.heads)?))
    }

    /// Attends already-projected heads and applies the output projection.
    pub fn attend_heads(&self, g: &mut Graph<'_>, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Attended> {
        let (mixed, weights) = attention::sdpa(g, q, k, v, mask)?;
        let merged = merge_heads(g, mixed)?;
        let out = match self.out_dim {
            Some(_) => linear(g, &self.name("o"), merged)?,
            None => merged,
        };
        Ok(Attended { out, weights })
    }

    pub fn forward(&self, g: &mut Graph<'_>, q_in: Var, kv_in: Var, mask: Option<Var>) -> Result<Attended> {
        let q = self.project_q(g, q_in)?;
        let (k, v) = self.project_kv(g, kv_in)?;
        self.attend_heads(g, q, k, v, mask)
    }
}

/// `[.., L, C]` → `[.., heads, L, C / heads]`.
pub fn split_heads(g: &mut Graph<'_>, x: Var, heads: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let r = shape.len();
    if r < 2 {
        return Err(Error::Invalid(format!("split_heads on rank {r}")));
    }
    let (l, c) = (shape[r - 2], shape[r - 1]);
    if c % heads != 0 {
        return Err(Error::Invalid(format!("{c} channels over {heads} heads")));
    }
    let mut split = shape[..r - 2].to_vec();
    split.extend_from_slice(&[l, heads, c / heads]);
    let y = g.reshape(x, &split)?;
    let mut perm: alloc::vec::Vec<usize> = (0..r - 2).collect();
    perm.extend_from_slice(&[r - 1, r - 2, r]);
    g.permute(y, &perm)
}

/// Inverse of [`split_heads`].
pub fn merge_heads(g: &mut Graph<'_>, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let r = shape.len();
    let (h, l, d) = (shape[r - 3], shape[r - 2], shape[r - 1]);
    let mut perm: alloc::vec::Vec<usize> = (0..r - 3).collect();
    perm.extend_from_slice(&[r - 2, r - 3, r - 1]);
    let y = g.permute(x, &perm)?;
    let mut merged = shape[..r - 3].to_vec();
    merged.extend_from_slice(&[l, h * d]);
    g.reshape(y, &merged)
}
