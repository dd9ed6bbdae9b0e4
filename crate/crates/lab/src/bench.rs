//! Wall-clock benchmark of prefill latency and cached decode throughput.
//!
//! Three variants of the configured model are timed on the same image:
//! the configured compressing projector without blocks, the same with
//! Vision Remember blocks, and an uncompressed per-token projector.
//! TTFT covers projection, prefill and the first argmax from encoded
//! features; the frozen encoder is shared by all variants and excluded.
//! Variants are interleaved within every repeat, decode steps token by
//! token, so drift hits all of them alike.

use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use vrlab_core::cost::{mad, median, CostReport, WallClock};
use vrlab_core::decoder::{ForwardOptions, KVCache};
use vrlab_core::model::{Encoded, ModelParams, VisionLanguageModel};
use vrlab_core::projectors::ProjectorKind;
use vrlab_core::Graph;

use crate::config::ExperimentConfig;
use crate::experiments::{build, cost_report};

pub const COMPRESSED: &str = "compressed";
pub const COMPRESSED_VR: &str = "compressed_vr";
pub const UNCOMPRESSED: &str = "uncompressed";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub vision_tokens: usize,
    pub cost: CostReport,
    pub ttft_median_ms: f64,
    pub ttft_mad_ms: f64,
    pub tps_median: f64,
    pub tps_mad: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchBody {
    pub repeats: usize,
    pub warmup: usize,
    pub decode_tokens: usize,
    pub scenarios: Vec<Scenario>,
    /// Ratios below are medians over repeats of the within-repeat ratio.
    /// `1 − ttft(compressed) / ttft(uncompressed)`.
    pub compression_prefill_saving: f64,
    /// `ttft(compressed_vr) / ttft(compressed) − 1`.
    pub vr_prefill_overhead: f64,
    /// `|tps(compressed_vr) / tps(compressed) − 1|`.
    pub vr_tps_change: f64,
}

impl BenchBody {
    pub fn scenario(&self, name: &str) -> Option<&Scenario> {
        self.scenarios.iter().find(|s| s.name == name)
    }
}

fn variants(cfg: &ExperimentConfig) -> Vec<(&'static str, ExperimentConfig)> {
    let base = ExperimentConfig {
        vr: None,
        prune: None,
        ..cfg.clone()
    };
    let mut with_vr = base.clone();
    with_vr.vr = Some(cfg.vr.clone().unwrap_or_default());
    let mut full = base.clone();
    full.projector.kind = ProjectorKind::MlpIdentity;
    full.projector.downsample = 1;
    vec![(COMPRESSED, base), (COMPRESSED_VR, with_vr), (UNCOMPRESSED, full)]
}

struct Runner {
    model: VisionLanguageModel,
    params: ModelParams,
    enc: Encoded,
    prompt: Vec<Vec<usize>>,
}

impl Runner {
    /// Prefill plus the first token; returns it with the filled cache.
    fn first_token(&self) -> anyhow::Result<(usize, KVCache)> {
        let mut cache = KVCache::default();
        let mut g = Graph::inference(&self.params.trainable);
        let v = self.model.vision_tokens(&mut g, &self.enc, None)?;
        let dec = &self.model.decoder;
        let (x, layout) = dec.embed(&mut g, Some(v), &self.prompt, 0)?;
        let feats = self.enc.fused.as_ref().map(|f| g.constant(f.fused.clone()));
        let f = dec.forward(&mut g, x, layout, feats, &ForwardOptions::default(), Some(&mut cache))?;
        let s = f.layout.len();
        let last = g.slice(f.logits, 1, s - 1, s)?;
        Ok((g.value(last).argmax_last()[0], cache))
    }

    fn ttft_ms(&self) -> anyhow::Result<(f64, KVCache, usize)> {
        let t = Instant::now();
        let (tok, cache) = black_box(self.first_token()?);
        Ok((t.elapsed().as_secs_f64() * 1e3, cache, tok))
    }

    /// One timed cached decode step; returns seconds.
    fn step(&self, cache: &mut KVCache, tok: &mut usize) -> anyhow::Result<f64> {
        let t = Instant::now();
        let logits = self.model.decoder.decode_step(&self.params.trainable, cache, &[*tok])?;
        *tok = black_box(logits.argmax_last()[0]);
        Ok(t.elapsed().as_secs_f64())
    }
}

pub fn run(cfg: &ExperimentConfig) -> anyhow::Result<BenchBody> {
    let task = cfg.task();
    let data = task.generate(1, 0)?;
    let seed = cfg.seeds[0];
    let vars = variants(cfg);
    let mut runners = Vec::new();
    let mut costs = Vec::new();
    for (_, v) in &vars {
        v.validate()?;
        let model = build(v)?;
        let params = model.init(v.encoder_seed, seed);
        let enc = model.encode(&params.encoder, &data.images)?;
        costs.push(cost_report(v)?);
        runners.push(Runner {
            model,
            params,
            enc,
            prompt: vec![task.prompt(data.cells[0])],
        });
    }
    let mut clocks = vec![WallClock::default(); vars.len()];
    let n = cfg.bench.decode_tokens;
    let k = runners.len();
    for rep in 0..cfg.bench.warmup + cfg.bench.repeats {
        // rotate the order each repeat; decode steps run in lockstep
        let order: Vec<usize> = (0..k).map(|j| (j + rep) % k).collect();
        let mut state = vec![None; k];
        let mut ttft = vec![0.0; k];
        for &i in &order {
            let (ms, cache, tok) = runners[i].ttft_ms()?;
            ttft[i] = ms;
            state[i] = Some((cache, tok));
        }
        let mut secs = vec![0.0; k];
        for _ in 0..n {
            for &i in &order {
                let (cache, tok) = state[i].as_mut().expect("prefilled");
                secs[i] += runners[i].step(cache, tok)?;
            }
        }
        if rep >= cfg.bench.warmup {
            for i in 0..k {
                clocks[i].ttft_ms.push(ttft[i]);
                clocks[i].tps.push(n as f64 / secs[i]);
            }
        }
    }
    let paired = |a: &[f64], b: &[f64]| -> f64 {
        let r: Vec<f64> = a.iter().zip(b).map(|(x, y)| x / y).collect();
        median(&r)
    };
    let compression_prefill_saving = 1.0 - paired(&clocks[0].ttft_ms, &clocks[2].ttft_ms);
    let vr_prefill_overhead = paired(&clocks[1].ttft_ms, &clocks[0].ttft_ms) - 1.0;
    let vr_tps_change = (paired(&clocks[1].tps, &clocks[0].tps) - 1.0).abs();
    let scenarios: Vec<Scenario> = vars
        .iter()
        .zip(costs)
        .zip(clocks)
        .map(|(((name, _), mut cost), clock)| Scenario {
            name: name.to_string(),
            vision_tokens: cost.vision_token_count,
            ttft_median_ms: median(&clock.ttft_ms),
            ttft_mad_ms: mad(&clock.ttft_ms),
            tps_median: median(&clock.tps),
            tps_mad: mad(&clock.tps),
            cost: {
                cost.wall_clock = Some(clock);
                cost
            },
        })
        .collect();
    Ok(BenchBody {
        repeats: cfg.bench.repeats,
        warmup: cfg.bench.warmup,
        decode_tokens: n,
        scenarios,
        compression_prefill_saving,
        vr_prefill_overhead,
        vr_tps_change,
    })
}
