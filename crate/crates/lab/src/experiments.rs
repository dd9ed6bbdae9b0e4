//! The work behind each subcommand, independent of argument parsing.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use vrlab_core::checks::{self, Suite};
use vrlab_core::cost::CostReport;
use vrlab_core::model::{ModelParams, VisionLanguageModel};
use vrlab_core::probe::{self, mean_sd, Comparison, ProbeTable};
use vrlab_core::train::{accuracy, fit};

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, PROMPT_LEN};
use crate::report::Report;

/// Bytes per cached key/value element in cost reports (16-bit storage).
pub const BYTES_PER_ELEMENT: usize = 2;

pub fn train_data_seed(seed: u64) -> u64 {
    1000 + seed
}

pub fn test_data_seed(seed: u64) -> u64 {
    2000 + seed
}

pub fn checkpoint_path(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}.ckpt"))
}

pub fn build(cfg: &ExperimentConfig) -> anyhow::Result<VisionLanguageModel> {
    Ok(VisionLanguageModel::new(cfg.model_config())?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub test_accuracy: f64,
    pub n_test: usize,
    /// Training loss before each update; empty for evaluation reports.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyBody {
    pub runs: Vec<SeedRun>,
    pub mean_accuracy: f64,
    pub sd_accuracy: f64,
}

impl AccuracyBody {
    pub fn new(runs: Vec<SeedRun>) -> Self {
        let accs: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
        let (mean_accuracy, sd_accuracy) = mean_sd(&accs);
        Self {
            runs,
            mean_accuracy,
            sd_accuracy,
        }
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.test_accuracy).collect()
    }
}

/// Held-out accuracy of `params`, honouring any pruning schedule.
pub fn evaluate_params(cfg: &ExperimentConfig, model: &VisionLanguageModel, params: &ModelParams, seed: u64) -> anyhow::Result<SeedRun> {
    let task = cfg.task();
    let test = task.generate(cfg.train.n_test, test_data_seed(seed))?;
    let enc = model.encode(&params.encoder, &test.images)?;
    let acc = accuracy(model, &params.trainable, &task, &test, &enc, cfg.prune.as_ref())?;
    Ok(SeedRun {
        seed,
        test_accuracy: acc,
        n_test: test.len(),
        losses: Vec::new(),
    })
}

/// Trains one seed from scratch.
pub fn train_seed(cfg: &ExperimentConfig, model: &VisionLanguageModel, seed: u64) -> anyhow::Result<(Checkpoint, SeedRun)> {
    let task = cfg.task();
    let mut params = model.init(cfg.encoder_seed, seed);
    let train = task.generate(cfg.train.n_train, train_data_seed(seed))?;
    let enc = model.encode(&params.encoder, &train.images)?;
    let losses = fit(model, &mut params.trainable, &task, &train, &enc, &cfg.train_config(), seed)
        .with_context(|| format!("training seed {seed}"))?;
    let mut run = evaluate_params(cfg, model, &params, seed)?;
    run.losses = losses;
    let ckpt = Checkpoint {
        seed,
        encoder_seed: cfg.encoder_seed,
        model: cfg.model_config(),
        params,
    };
    Ok((ckpt, run))
}

/// Trains every seed, writing checkpoints and `train_report.json` to `out`.
pub fn train(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<Report<AccuracyBody>> {
    let model = build(cfg)?;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let (ckpt, run) = train_seed(cfg, &model, seed)?;
        ckpt.save(&checkpoint_path(out, seed))?;
        runs.push(run);
    }
    let report = Report::new("train", cfg, AccuracyBody::new(runs));
    report.write(&out.join("train_report.json"))?;
    Ok(report)
}

pub fn load_checkpoint(cfg: &ExperimentConfig, path: &Path) -> anyhow::Result<Checkpoint> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    ckpt.ensure_compatible(&cfg.model_config(), cfg.encoder_seed)
        .with_context(|| format!("checking {}", path.display()))?;
    Ok(ckpt)
}

/// Evaluates the given checkpoints, or every seed's checkpoint under `out`.
pub fn evaluate(cfg: &ExperimentConfig, out: &Path, checkpoints: &[PathBuf]) -> anyhow::Result<Report<AccuracyBody>> {
    let model = build(cfg)?;
    let paths: Vec<PathBuf> = if checkpoints.is_empty() {
        cfg.seeds.iter().map(|&s| checkpoint_path(out, s)).collect()
    } else {
        checkpoints.to_vec()
    };
    let mut runs = Vec::new();
    for p in &paths {
        let ckpt = load_checkpoint(cfg, p)?;
        runs.push(evaluate_params(cfg, &model, &ckpt.params, ckpt.seed)?);
    }
    let report = Report::new("eval", cfg, AccuracyBody::new(runs));
    report.write(&out.join("eval_report.json"))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeBody {
    /// Whether a trained checkpoint was probed (otherwise fresh models per seed).
    pub trained: bool,
    pub table: ProbeTable,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<ProbeTable>,
    /// Decoder stages, with blocks minus without.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub remember_gains: Vec<Comparison>,
}

fn sweep(cfg: &ExperimentConfig, ckpt: Option<&Checkpoint>) -> anyhow::Result<ProbeTable> {
    let model = build(cfg)?;
    let params_for = |seed: u64| -> vrlab_core::Result<ModelParams> {
        Ok(match ckpt {
            Some(c) => c.params.clone(),
            None => model.init(cfg.encoder_seed, seed),
        })
    };
    Ok(probe::probe_sweep(&model, params_for, &cfg.task(), &cfg.probe.stages, &cfg.seeds, &cfg.sweep_config())?)
}

/// Probes the configured stages. `baseline` is a checkpoint of the same
/// model without Vision Remember blocks; when given, both are probed and
/// the per-stage gains reported.
pub fn probe(cfg: &ExperimentConfig, out: &Path, checkpoint: Option<&Path>, baseline: Option<&Path>) -> anyhow::Result<Report<ProbeBody>> {
    let ckpt = checkpoint.map(|p| load_checkpoint(cfg, p)).transpose()?;
    let table = sweep(cfg, ckpt.as_ref())?;
    let (baseline, remember_gains) = match baseline {
        Some(path) => {
            if cfg.vr.is_none() {
                anyhow::bail!("--baseline needs a configuration with vision remember blocks");
            }
            let plain = ExperimentConfig { vr: None, ..cfg.clone() };
            let b = load_checkpoint(&plain, path)?;
            let t = sweep(&plain, Some(&b))?;
            let gains = probe::remember_gains(&table, &t);
            (Some(t), gains)
        }
        None => (None, Vec::new()),
    };
    let body = ProbeBody {
        trained: ckpt.is_some(),
        table,
        baseline,
        remember_gains,
    };
    let report = Report::new("probe", cfg, body);
    report.write(&out.join("probe_report.json"))?;
    Ok(report)
}

/// Analytic costs of one prompt for `cfg`.
pub fn cost_report(cfg: &ExperimentConfig) -> anyhow::Result<CostReport> {
    let mc = cfg.model_config();
    let nv = cfg.vision_tokens();
    let plan = cfg
        .prune
        .as_ref()
        .filter(|p| !matches!(p, vrlab_core::pruning::PruneSchedule::EncoderPrune { .. }))
        .map(|p| p.plan(nv, mc.decoder.num_layers))
        .transpose()?;
    Ok(CostReport::analytic(
        &mc.decoder,
        nv,
        PROMPT_LEN,
        mc.encoder.grid,
        plan.as_ref(),
        BYTES_PER_ELEMENT,
    )?)
}

pub fn cost(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<Report<CostReport>> {
    let report = Report::new("cost", cfg, cost_report(cfg)?);
    report.write(&out.join("cost_report.json"))?;
    Ok(report)
}

/// Runs every verification suite.
pub fn verify(inject_fault: bool) -> anyhow::Result<Vec<Suite>> {
    Ok(checks::all(inject_fault)?)
}
