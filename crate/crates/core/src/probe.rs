//! Linear probing of frozen representations: a single learned query
//! attends over the representation rows and a linear layer classifies the
//! pooled vector.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::decoder::ForwardOptions;
use crate::error::{Error, Result};
use crate::model::{Encoded, ModelParams, TextBatch, VisionLanguageModel};
use crate::nn;
use crate::ops;
use crate::params::{AdamConfig, AdamState, Init, ParamStore};
use crate::rng::RngState;
use crate::tape::{Graph, Var};
use crate::task::SyntheticTask;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    EncoderFeatures,
    PostProjector,
    /// Vision span after decoder layer `i` (and its block, if any).
    DecoderLayer(usize),
}

impl Stage {
    pub fn name(&self) -> String {
        match self {
            Stage::EncoderFeatures => "encoder_features".to_string(),
            Stage::PostProjector => "post_projector".to_string(),
            Stage::DecoderLayer(i) => format!("decoder_layer_{i}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "encoder_features" => Ok(Stage::EncoderFeatures),
            "post_projector" => Ok(Stage::PostProjector),
            _ => s
                .strip_prefix("decoder_layer_")
                .and_then(|i| i.parse().ok())
                .filter(|&i| i > 0)
                .map(Stage::DecoderLayer)
                .ok_or_else(|| Error::Config(format!("unknown probe stage {s:?}"))),
        }
    }
}

impl Serialize for Stage {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for Stage {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Stage::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Representation rows `[N, R, D]` extracted at one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbePoint {
    pub stage: Stage,
    pub reps: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub max_steps: usize,
    /// Stop once the loss moved less than `plateau_tol` over this many steps.
    pub plateau_window: usize,
    pub plateau_tol: f64,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            max_steps: 2000,
            plateau_window: 50,
            plateau_tol: 1e-4,
            lr: 5e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub steps: usize,
    pub final_loss: f64,
}

/// Per-channel standardisation fitted on `train` rows.
fn standardize(train: &Tensor, test: &Tensor) -> Result<(Tensor, Tensor)> {
    let d = train.last_dim();
    let rows = train.len() / d;
    let mut mean = alloc::vec![0.0; d];
    for r in train.rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / rows as f64;
        }
    }
    let mut var = alloc::vec![0.0; d];
    for r in train.rows() {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m) / rows as f64;
        }
    }
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + 1e-8)).collect();
    let apply = |t: &Tensor| -> Result<Tensor> {
        if t.last_dim() != d {
            return Err(Error::ShapeMismatch {
                op: "probe",
                lhs: train.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        let mut out = t.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % d;
            *v = (*v - mean[c]) * inv[c];
        }
        Ok(out)
    };
    Ok((apply(train)?, apply(test)?))
}

fn probe_logits(g: &mut Graph<'_>, reps: &Tensor) -> Result<Var> {
    let (n, r, d) = (reps.dim(0), reps.dim(1), reps.dim(2));
    let x = g.constant(reps.clone());
    let u = g.param("probe.query")?;
    let scores = g.matmul(x, u)?;
    let scores = g.reshape(scores, &[n, 1, r])?;
    let scores = g.scale(scores, 1.0 / libm::sqrt(d as f64));
    let w = g.softmax(scores, 2)?;
    let pooled = g.matmul(w, x)?;
    let pooled = g.reshape(pooled, &[n, d])?;
    nn::linear(g, "probe.cls", pooled)
}

fn accuracy_of(logits: &Tensor, labels: &[usize]) -> f64 {
    let hits = logits.argmax_last().iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

/// Trains a fresh probe on `[N, R, D]` training rows and reports held-out accuracy.
pub fn train_probe(
    train: (&Tensor, &[usize]),
    test: (&Tensor, &[usize]),
    classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    let (xtr, ytr) = train;
    let (xte, yte) = test;
    if xtr.rank() != 3 || xtr.dim(0) != ytr.len() || xte.rank() != 3 || xte.dim(0) != yte.len() {
        return Err(Error::Invalid("probe inputs must be [N, R, D] with one label per row".into()));
    }
    if let Some(&bad) = ytr.iter().chain(yte).find(|&&y| y >= classes) {
        return Err(Error::TokenOutOfVocab { id: bad, vocab: classes });
    }
    let (xtr, xte) = standardize(xtr, xte)?;
    let d = xtr.dim(2);
    let mut params = ParamStore::new();
    let mut rng = RngState::new(seed).split("probe");
    params.init("probe.query", &[d, 1], Init::Zeros, &mut rng);
    nn::init_linear_default(&mut params, "probe.cls", d, classes, &mut rng);
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new();
    let mut history: Vec<f64> = Vec::new();
    let mut steps = 0;
    while steps < cfg.max_steps {
        let (loss, grads) = {
            let mut g = Graph::with_params(&params);
            let logits = probe_logits(&mut g, &xtr)?;
            let l = g.cross_entropy(logits, ytr)?;
            let v = g.value(l).item();
            if !v.is_finite() {
                return Err(Error::NonFinite);
            }
            (v, g.backward(l).params(&g))
        };
        history.push(loss);
        state.step(&adam, &mut params, &grads)?;
        steps += 1;
        let w = cfg.plateau_window;
        if history.len() > w && (history[history.len() - 1] - history[history.len() - 1 - w]).abs() < cfg.plateau_tol {
            break;
        }
    }
    let eval = |x: &Tensor| -> Result<Tensor> {
        let mut g = Graph::inference(&params);
        let l = probe_logits(&mut g, x)?;
        Ok(g.value(l).clone())
    };
    let final_loss = {
        let mut g = Graph::inference(&params);
        let l = probe_logits(&mut g, &xtr)?;
        let ce = g.cross_entropy(l, ytr)?;
        g.value(ce).item()
    };
    Ok(ProbeResult {
        train_accuracy: accuracy_of(&eval(&xtr)?, ytr),
        test_accuracy: accuracy_of(&eval(&xte)?, yte),
        steps,
        final_loss,
    })
}

/// Representations at each requested stage for `enc` with the given prompts.
/// Never writes to the model or its parameters.
pub fn extract(
    model: &VisionLanguageModel,
    params: &ParamStore,
    enc: &Encoded,
    prompts: &[Vec<usize>],
    stages: &[Stage],
) -> Result<Vec<ProbePoint>> {
    let need_decoder = stages.iter().any(|s| matches!(s, Stage::DecoderLayer(_)));
    let hidden: Vec<Tensor> = if need_decoder {
        let mut g = Graph::inference(params);
        let text = TextBatch {
            rows: prompts.to_vec(),
            n_response: 0,
        };
        let opts = ForwardOptions {
            keep_hidden: true,
            ..ForwardOptions::default()
        };
        let f = model.forward(&mut g, enc, &text, None, opts)?;
        let nv = f.layout.vision.len();
        f.layer_hidden
            .iter()
            .map(|h| ops::slice(h, 1, 0, nv))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let post = {
        let mut pg = Graph::inference(params);
        let v = model.vision_tokens(&mut pg, enc, None)?;
        pg.value(v).clone()
    };
    let b = enc.batch();
    stages
        .iter()
        .map(|&stage| {
            let reps = match stage {
                Stage::EncoderFeatures => {
                    let d = enc.top.last_dim();
                    enc.top.reshape(&[b, enc.top.len() / (b * d), d])?
                }
                Stage::PostProjector => post.clone(),
                Stage::DecoderLayer(i) => hidden
                    .get(i - 1)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("no decoder layer {i}")))?,
            };
            Ok(ProbePoint { stage, reps })
        })
        .collect()
}

/// Sample mean and standard deviation.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, libm::sqrt(var))
}

/// `sqrt((s₁² + s₂²) / 2)`.
pub fn pooled_sd(a: &[f64], b: &[f64]) -> f64 {
    let (_, sa) = mean_sd(a);
    let (_, sb) = mean_sd(b);
    libm::sqrt((sa * sa + sb * sb) / 2.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: Stage,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

impl StageRow {
    pub fn new(stage: Stage, accuracies: Vec<f64>) -> Self {
        let (mean, sd) = mean_sd(&accuracies);
        Self {
            stage,
            accuracies,
            mean,
            sd,
        }
    }
}

/// Difference of two stages' mean accuracies with its pooled spread.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub label: String,
    pub gap: f64,
    pub pooled_sd: f64,
}

impl Comparison {
    pub fn between(label: &str, hi: &StageRow, lo: &StageRow) -> Self {
        Self {
            label: label.to_string(),
            gap: hi.mean - lo.mean,
            pooled_sd: pooled_sd(&hi.accuracies, &lo.accuracies),
        }
    }

    /// Gap in units of the pooled standard deviation (infinite when both
    /// samples are constant and differ).
    pub fn z(&self) -> f64 {
        if self.pooled_sd > 0.0 {
            self.gap / self.pooled_sd
        } else if self.gap == 0.0 {
            0.0
        } else {
            self.gap.signum() * f64::INFINITY
        }
    }
}

/// Sizes of the per-seed probe datasets and the cell whose glyph is probed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub cell: (usize, usize),
    pub probe: ProbeConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            n_train: 1000,
            n_test: 500,
            cell: (1, 4),
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<StageRow>,
    /// `encoder_features − post_projector`, when both stages were probed.
    pub compression_gap: Option<Comparison>,
}

impl ProbeTable {
    pub fn row(&self, stage: Stage) -> Option<&StageRow> {
        self.rows.iter().find(|r| r.stage == stage)
    }
}

/// Probes every stage once per seed. `params_for` supplies the frozen
/// parameters for a seed; datasets and probe initialisation also vary with it.
pub fn probe_sweep<F>(
    model: &VisionLanguageModel,
    params_for: F,
    task: &SyntheticTask,
    stages: &[Stage],
    seeds: &[u64],
    cfg: &SweepConfig,
) -> Result<ProbeTable>
where
    F: Fn(u64) -> Result<ModelParams>,
{
    let (ci, cj) = cfg.cell;
    if ci >= task.grid || cj >= task.grid {
        return Err(Error::Config("probe.cell outside the task grid".into()));
    }
    let cell = ci * task.grid + cj;
    let mut acc: Vec<Vec<f64>> = alloc::vec![Vec::new(); stages.len()];
    for &seed in seeds {
        let params = params_for(seed)?;
        let train = task.generate(cfg.n_train, seed.wrapping_mul(2).wrapping_add(1))?;
        let test = task.generate(cfg.n_test, seed.wrapping_mul(2).wrapping_add(2))?;
        let prompts = |d: &crate::task::Dataset| -> Vec<Vec<usize>> { d.cells.iter().map(|&c| task.prompt(c)).collect() };
        let etr = model.encode(&params.encoder, &train.images)?;
        let ete = model.encode(&params.encoder, &test.images)?;
        let ptr = extract(model, &params.trainable, &etr, &prompts(&train), stages)?;
        let pte = extract(model, &params.trainable, &ete, &prompts(&test), stages)?;
        let ytr: Vec<usize> = train.glyphs.iter().map(|g| g[cell]).collect();
        let yte: Vec<usize> = test.glyphs.iter().map(|g| g[cell]).collect();
        for (k, (a, b)) in ptr.iter().zip(&pte).enumerate() {
            let r = train_probe((&a.reps, &ytr), (&b.reps, &yte), task.alphabet, &cfg.probe, seed)?;
            acc[k].push(r.test_accuracy);
        }
    }
    let rows: Vec<StageRow> = stages.iter().zip(acc).map(|(&s, a)| StageRow::new(s, a)).collect();
    let find = |s: Stage| rows.iter().find(|r| r.stage == s);
    let compression_gap = match (find(Stage::EncoderFeatures), find(Stage::PostProjector)) {
        (Some(hi), Some(lo)) => Some(Comparison::between("encoder_features - post_projector", hi, lo)),
        _ => None,
    };
    Ok(ProbeTable {
        seeds: seeds.to_vec(),
        rows,
        compression_gap,
    })
}

/// Per decoder stage present in both tables, `with − without`.
pub fn remember_gains(with: &ProbeTable, without: &ProbeTable) -> Vec<Comparison> {
    with.rows
        .iter()
        .filter(|r| matches!(r.stage, Stage::DecoderLayer(_)))
        .filter_map(|r| {
            without
                .row(r.stage)
                .map(|o| Comparison::between(&format!("{} with - without", r.stage.name()), r, o))
        })
        .collect()
}
