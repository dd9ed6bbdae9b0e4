//! Closed-form inference cost: prefill and decode FLOPs, KV-cache bytes and
//! Vision Remember overhead.
//!
//! Only matrix products are counted, at two FLOPs per multiply-add; norms,
//! softmax and activations are ignored. These are exactly the products the
//! tape tallies, so every count here can be checked against a real forward
//! pass. The language-model head is excluded.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::pruning::KeepPlan;
use crate::vision_remember::{Interaction, VisionRememberConfig};

pub const SCHEMA_VERSION: u32 = 1;
pub const FLOPS_PER_MAC: u64 = 2;
pub const FLOP_CONVENTION: &str = "matmul multiply-adds x2; norms, softmax, activations and the LM head excluded";
pub const PREFILL_FORMULA: &str = "sum over layers of 2*(4*S*Dt^2 + 2*S^2*Dt + 2*S*Dt*d_ff)";
pub const DECODE_FORMULA: &str = "sum over layers of 2*(4*Dt^2 + 2*(c+1)*Dt + 2*Dt*d_ff), c = cached length";
pub const KV_FORMULA: &str = "sum over layers of 2*len*Dt*bytes_per_element";
pub const VR_FORMULA: &str = "per insertion 2*(n2*(Dt*C + C^2) + n2*C^2 + 2*W*H*C^2 + 2*n2*K*C + n2*C*Dt + 4*N*Dt^2 + 2*N^2*Dt), C = L*Dv, K = s^2 (local) or W*H (global), N = n2+1";

fn u(x: usize) -> u64 {
    x as u64
}

/// Multiply-adds of one causal layer over `s` positions.
pub fn layer_macs(cfg: &DecoderConfig, s: usize) -> u64 {
    let (s, d, f) = (u(s), u(cfg.d_model), u(cfg.d_ff));
    4 * s * d * d + 2 * s * s * d + 2 * s * d * f
}

/// Multiply-adds of one layer for a single new token after `cache_len`.
pub fn decode_layer_macs(cfg: &DecoderConfig, cache_len: usize) -> u64 {
    let (c, d, f) = (u(cache_len), u(cfg.d_model), u(cfg.d_ff));
    4 * d * d + 2 * (c + 1) * d + 2 * d * f
}

/// Sequence length entering each layer under an optional pruning plan.
pub fn tokens_per_layer(cfg: &DecoderConfig, n_vision: usize, n_text: usize, plan: Option<&KeepPlan>) -> Vec<usize> {
    let mut nv = n_vision;
    let mut out = Vec::with_capacity(cfg.num_layers);
    for l in 1..=cfg.num_layers {
        out.push(nv + n_text);
        if let Some(&k) = plan.and_then(|p| p.after_layer.get(&l)) {
            nv = k;
        }
    }
    out
}

/// Keys and values cached per layer: a layer caches what it processed.
pub fn cache_len_per_layer(tokens_per_layer: &[usize]) -> Vec<usize> {
    tokens_per_layer.to_vec()
}

pub fn prefill_flops(cfg: &DecoderConfig, n_vision: usize, n_text: usize) -> u64 {
    prefill_flops_layers(cfg, &tokens_per_layer(cfg, n_vision, n_text, None))
}

pub fn prefill_flops_layers(cfg: &DecoderConfig, tokens_per_layer: &[usize]) -> u64 {
    FLOPS_PER_MAC * tokens_per_layer.iter().map(|&s| layer_macs(cfg, s)).sum::<u64>()
}

/// Attention score-and-mix term of prefill, `Σ 2·2·S²·Dt`.
pub fn prefill_attention_flops(cfg: &DecoderConfig, n_vision: usize, n_text: usize) -> u64 {
    let s = u(n_vision + n_text);
    FLOPS_PER_MAC * u(cfg.num_layers) * 2 * s * s * u(cfg.d_model)
}

pub fn decode_flops_per_token(cfg: &DecoderConfig, cache_len: usize) -> u64 {
    FLOPS_PER_MAC * u(cfg.num_layers) * decode_layer_macs(cfg, cache_len)
}

pub fn decode_flops_layers(cfg: &DecoderConfig, cache_lens: &[usize]) -> u64 {
    FLOPS_PER_MAC * cache_lens.iter().map(|&c| decode_layer_macs(cfg, c)).sum::<u64>()
}

pub fn kv_cache_bytes(cfg: &DecoderConfig, seq_len: usize, bytes_per_element: usize) -> u64 {
    u(cfg.num_layers) * 2 * u(seq_len) * u(cfg.d_model) * u(bytes_per_element)
}

pub fn kv_cache_bytes_layers(cfg: &DecoderConfig, cache_lens: &[usize], bytes_per_element: usize) -> u64 {
    cache_lens
        .iter()
        .map(|&c| 2 * u(c) * u(cfg.d_model) * u(bytes_per_element))
        .sum()
}

/// Multiply-adds of one Vision Remember block, by part.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VrBlockMacs {
    pub expand: u64,
    pub query: u64,
    pub key_value: u64,
    /// Scores plus value mixing of the token-feature attention.
    pub scores: u64,
    pub projection: u64,
    pub self_attention: u64,
}

impl VrBlockMacs {
    pub fn total(&self) -> u64 {
        self.expand + self.query + self.key_value + self.scores + self.projection + self.self_attention
    }
}

/// Block cost on a `W × H` fused feature map (batch of one).
pub fn vr_block_macs(vr: &VisionRememberConfig, w: usize, h: usize) -> Result<VrBlockMacs> {
    let s = vr.downsample;
    if s == 0 || w % s != 0 || h % s != 0 {
        return Err(Error::NotDivisible {
            extent: if s != 0 && w % s != 0 { w } else { h },
            ratio: s,
        });
    }
    let n2 = u((w / s) * (h / s));
    let c = u(vr.channels());
    let dt = u(vr.d_model);
    let keys = match vr.interaction {
        Interaction::Local => u(s * s),
        Interaction::Global => u(w * h),
    };
    let n = n2 + 1;
    Ok(VrBlockMacs {
        expand: n2 * (dt * c + c * c),
        query: n2 * c * c,
        key_value: 2 * u(w * h) * c * c,
        scores: 2 * n2 * keys * c,
        projection: n2 * c * dt,
        self_attention: 4 * n * dt * dt + 2 * n * n * dt,
    })
}

pub fn vr_overhead_flops(vr: &VisionRememberConfig, w: usize, h: usize) -> Result<u64> {
    Ok(FLOPS_PER_MAC * u(vr.insertion_layers.len()) * vr_block_macs(vr, w, h)?.total())
}

/// Timing samples of a benchmark scenario.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WallClock {
    pub ttft_ms: Vec<f64>,
    pub tps: Vec<f64>,
}

impl WallClock {
    pub fn ttft_median(&self) -> f64 {
        median(&self.ttft_ms)
    }

    pub fn tps_median(&self) -> f64 {
        median(&self.tps)
    }
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Median absolute deviation from the median.
pub fn mad(xs: &[f64]) -> f64 {
    let m = median(xs);
    let dev: Vec<f64> = xs.iter().map(|x| (x - m).abs()).collect();
    median(&dev)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Formulas {
    pub convention: String,
    pub flops_per_mac: u64,
    pub prefill: String,
    pub decode: String,
    pub kv_cache: String,
    pub vision_remember: String,
}

impl Default for Formulas {
    fn default() -> Self {
        Self {
            convention: FLOP_CONVENTION.into(),
            flops_per_mac: FLOPS_PER_MAC,
            prefill: PREFILL_FORMULA.into(),
            decode: DECODE_FORMULA.into(),
            kv_cache: KV_FORMULA.into(),
            vision_remember: VR_FORMULA.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub schema_version: u32,
    pub formulas: Formulas,
    pub vision_token_count: usize,
    pub text_token_count: usize,
    pub tokens_per_layer: Vec<usize>,
    pub prefill_flops: u64,
    /// For the first decoded token after prefill.
    pub decode_flops_per_token: u64,
    pub bytes_per_element: usize,
    pub kv_cache_bytes: u64,
    pub vr_overhead_flops: u64,
    pub wall_clock: Option<WallClock>,
}

impl CostReport {
    /// Analytic report for one prompt. `feature_grid` is the fused map the
    /// Vision Remember blocks read (ignored without them).
    pub fn analytic(
        cfg: &DecoderConfig,
        n_vision: usize,
        n_text: usize,
        feature_grid: (usize, usize),
        plan: Option<&KeepPlan>,
        bytes_per_element: usize,
    ) -> Result<Self> {
        let tokens = tokens_per_layer(cfg, n_vision, n_text, plan);
        let caches = cache_len_per_layer(&tokens);
        let vr_overhead_flops = match &cfg.vr {
            Some(vr) => vr_overhead_flops(vr, feature_grid.0, feature_grid.1)?,
            None => 0,
        };
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            formulas: Formulas::default(),
            vision_token_count: n_vision,
            text_token_count: n_text,
            prefill_flops: prefill_flops_layers(cfg, &tokens),
            decode_flops_per_token: decode_flops_layers(cfg, &caches),
            bytes_per_element,
            kv_cache_bytes: kv_cache_bytes_layers(cfg, &caches, bytes_per_element),
            tokens_per_layer: tokens,
            vr_overhead_flops,
            wall_clock: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn cfg() -> DecoderConfig {
        DecoderConfig::default()
    }

    #[test]
    fn attention_term_ratio_for_576_vs_64_vision_tokens() {
        let c = cfg();
        let big = prefill_attention_flops(&c, 576, 32) as f64;
        let small = prefill_attention_flops(&c, 64, 32) as f64;
        let want = (608.0f64 / 96.0) * (608.0 / 96.0);
        assert!((big / small - want).abs() <= 1e-12 * want);
        assert!((big / small - 40.1).abs() < 0.05);
    }

    #[test]
    fn halving_sequence_quarters_attention_term() {
        let c = cfg();
        assert_eq!(prefill_attention_flops(&c, 0, 64), 4 * prefill_attention_flops(&c, 0, 32));
        assert_eq!(prefill_flops(&c, 0, 0), 0);
    }

    #[test]
    fn local_global_score_ratio() {
        let mut vr = VisionRememberConfig::default();
        let local = vr_block_macs(&vr, 24, 24).unwrap().scores;
        vr.interaction = Interaction::Global;
        let global = vr_block_macs(&vr, 24, 24).unwrap().scores;
        assert_eq!(global, 64 * local);
        let c = vr.channels() as u64;
        assert_eq!(local, 2 * 576 * c);
    }

    #[test]
    fn kv_bytes() {
        let c = cfg();
        assert_eq!(kv_cache_bytes(&c, 0, 2), 0);
        let full = kv_cache_bytes(&c, 576 + 32, 2) - kv_cache_bytes(&c, 32, 2);
        let comp = kv_cache_bytes(&c, 64 + 32, 2) - kv_cache_bytes(&c, 32, 2);
        assert_eq!(full, 9 * comp);
        let deeper = DecoderConfig { num_layers: 12, ..c.clone() };
        assert_eq!(kv_cache_bytes(&deeper, 100, 2), 2 * kv_cache_bytes(&c, 100, 2));
    }

    #[test]
    fn zero_insertions_cost_nothing() {
        let vr = VisionRememberConfig {
            insertion_layers: vec![],
            ..VisionRememberConfig::default()
        };
        assert_eq!(vr_overhead_flops(&vr, 24, 24).unwrap(), 0);
    }

    #[test]
    fn median_and_mad() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(mad(&[1.0, 2.0, 3.0, 4.0, 100.0]), 1.0);
    }
}
