//! Experiment configuration: one TOML file, optional `key=value`
//! overrides, and cross-field validation reported with field paths.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use vrlab_core::decoder::DecoderConfig;
use vrlab_core::encoder::EncoderConfig;
use vrlab_core::model::ModelConfig;
use vrlab_core::probe::{ProbeConfig, Stage, SweepConfig};
use vrlab_core::projectors::{ProjectorConfig, ProjectorKind};
use vrlab_core::pruning::PruneSchedule;
use vrlab_core::task::SyntheticTask;
use vrlab_core::train::TrainConfig;
use vrlab_core::params::AdamConfig;
use vrlab_core::vision_remember::{BlockOrder, Interaction, VisionRememberConfig};

/// A configuration problem at `path` (dotted field path, or `<file>`).
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn err(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        path: path.to_string(),
        message: message.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub grid: usize,
    pub alphabet: usize,
    pub patch: usize,
    pub noise: f64,
    pub glyph_seed: u64,
    /// Cells questions may ask about; empty means every cell.
    pub query_cells: Vec<(usize, usize)>,
}

impl Default for TaskSection {
    fn default() -> Self {
        let t = SyntheticTask::default();
        Self {
            grid: t.grid,
            alphabet: t.alphabet,
            patch: t.patch,
            noise: t.noise,
            glyph_seed: t.glyph_seed,
            query_cells: vec![(1, 1), (1, 4), (4, 1), (4, 4)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub depth: usize,
    pub d_vision: usize,
    pub heads: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self {
            depth: e.depth,
            d_vision: e.d_vision,
            heads: e.heads,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectorSection {
    pub kind: ProjectorKind,
    pub downsample: usize,
    pub heads: usize,
}

impl Default for ProjectorSection {
    fn default() -> Self {
        Self {
            kind: ProjectorKind::AvgPool,
            downsample: 3,
            heads: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSection {
    pub num_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for DecoderSection {
    fn default() -> Self {
        Self {
            num_layers: 6,
            d_model: 32,
            heads: 4,
            d_ff: 64,
            max_seq_len: 64,
        }
    }
}

/// Block settings. Width and ratio follow the decoder and projector; when
/// given explicitly they must agree with them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VrSection {
    pub insertion_layers: Vec<usize>,
    pub feature_levels: Vec<usize>,
    pub interaction: Interaction,
    pub order: BlockOrder,
    pub heads: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub downsample: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_model: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_vision: Option<usize>,
}

impl Default for VrSection {
    fn default() -> Self {
        Self {
            insertion_layers: vec![1, 4],
            feature_levels: vec![1, 2, 3],
            interaction: Interaction::Local,
            order: BlockOrder::SelfThenCross,
            heads: 4,
            downsample: None,
            d_model: None,
            d_vision: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 32,
            lr: 3e-3,
            warmup: 30,
            n_train: 2000,
            n_test: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub stages: Vec<Stage>,
    pub n_train: usize,
    pub n_test: usize,
    /// Cell whose glyph the probe predicts.
    pub cell: (usize, usize),
    pub max_steps: usize,
    pub plateau_window: usize,
    pub plateau_tol: f64,
    pub lr: f64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let s = SweepConfig::default();
        Self {
            stages: vec![Stage::EncoderFeatures, Stage::PostProjector],
            n_train: s.n_train,
            n_test: s.n_test,
            cell: s.cell,
            max_steps: s.probe.max_steps,
            plateau_window: s.probe.plateau_window,
            plateau_tol: s.probe.plateau_tol,
            lr: s.probe.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub repeats: usize,
    pub warmup: usize,
    pub decode_tokens: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            repeats: 7,
            warmup: 2,
            decode_tokens: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    /// Seed of the frozen encoder shared by every run.
    pub encoder_seed: u64,
    pub out_dir: String,
    pub task: TaskSection,
    pub encoder: EncoderSection,
    pub projector: ProjectorSection,
    pub decoder: DecoderSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vr: Option<VrSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prune: Option<PruneSchedule>,
    pub train: TrainSection,
    pub probe: ProbeSection,
    pub bench: BenchSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seeds: vec![0, 1, 2, 3, 4],
            encoder_seed: 100,
            out_dir: "runs/experiment".into(),
            task: TaskSection::default(),
            encoder: EncoderSection::default(),
            projector: ProjectorSection::default(),
            decoder: DecoderSection::default(),
            vr: None,
            prune: None,
            train: TrainSection::default(),
            probe: ProbeSection::default(),
            bench: BenchSection::default(),
        }
    }
}

/// Prompt length of every question: `[QUERY, ROW_i, COL_j]`.
pub const PROMPT_LEN: usize = 3;

impl ExperimentConfig {
    pub fn task(&self) -> SyntheticTask {
        let t = &self.task;
        SyntheticTask {
            grid: t.grid,
            alphabet: t.alphabet,
            patch: t.patch,
            noise: t.noise,
            glyph_seed: t.glyph_seed,
            query_cells: t.query_cells.clone(),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let g = self.task.grid;
        let encoder = EncoderConfig {
            patch: self.task.patch,
            in_channels: 1,
            grid: (g, g),
            d_vision: self.encoder.d_vision,
            depth: self.encoder.depth,
            heads: self.encoder.heads,
        };
        let mut projector = ProjectorConfig::new(
            self.projector.kind,
            self.projector.downsample,
            self.encoder.d_vision,
            self.decoder.d_model,
            (g, g),
        );
        projector.heads = self.projector.heads;
        let d = &self.decoder;
        let vr = self.vr.as_ref().map(|v| VisionRememberConfig {
            insertion_layers: v.insertion_layers.clone(),
            feature_levels: v.feature_levels.clone(),
            interaction: v.interaction,
            order: v.order,
            downsample: v.downsample.unwrap_or(self.projector.downsample),
            d_model: v.d_model.unwrap_or(d.d_model),
            d_vision: v.d_vision.unwrap_or(self.encoder.d_vision),
            heads: v.heads,
        });
        ModelConfig {
            encoder,
            projector,
            decoder: DecoderConfig {
                num_layers: d.num_layers,
                d_model: d.d_model,
                heads: d.heads,
                d_ff: d.d_ff,
                vocab_size: self.task().vocab_size(),
                max_seq_len: d.max_seq_len,
                vr,
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            adam: AdamConfig {
                lr: self.train.lr,
                ..AdamConfig::default()
            },
            warmup: self.train.warmup,
        }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        let p = &self.probe;
        SweepConfig {
            n_train: p.n_train,
            n_test: p.n_test,
            cell: p.cell,
            probe: ProbeConfig {
                max_steps: p.max_steps,
                plateau_window: p.plateau_window,
                plateau_tol: p.plateau_tol,
                lr: p.lr,
            },
        }
    }

    /// Vision tokens entering the decoder.
    pub fn vision_tokens(&self) -> usize {
        match &self.prune {
            Some(PruneSchedule::EncoderPrune { keep }) => *keep,
            _ => self.model_config().projector.num_tokens(),
        }
    }

    /// Every cross-field rule, checked before anything runs.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(err("seeds", "at least one seed is required"));
        }
        self.task().validate().map_err(|e| err("task", e.to_string()))?;
        let layers = self.decoder.num_layers;
        if let Some(v) = &self.vr {
            if let Some(s) = v.downsample.filter(|&s| s != self.projector.downsample) {
                return Err(err(
                    "vr.downsample",
                    format!("{s} differs from projector.downsample {}", self.projector.downsample),
                ));
            }
            if let Some(d) = v.d_model.filter(|&d| d != self.decoder.d_model) {
                return Err(err("vr.d_model", format!("{d} differs from decoder.d_model {}", self.decoder.d_model)));
            }
            if let Some(d) = v.d_vision.filter(|&d| d != self.encoder.d_vision) {
                return Err(err(
                    "vr.d_vision",
                    format!("{d} differs from encoder.d_vision {}", self.encoder.d_vision),
                ));
            }
            if let Some(&l) = v.insertion_layers.iter().find(|&&l| l == 0 || l > layers) {
                return Err(err("vr.insertion_layers", format!("layer {l} outside 1..={layers}")));
            }
            if let Some(&l) = v.feature_levels.iter().find(|&&l| l == 0 || l > self.encoder.depth) {
                return Err(err(
                    "vr.feature_levels",
                    format!("level {l} outside 1..={}", self.encoder.depth),
                ));
            }
            if self.prune.is_some() {
                return Err(err("prune", "token pruning and vision remember blocks are exclusive"));
            }
        }
        if let Some(p) = &self.prune {
            p.validate(layers).map_err(|e| err("prune", e.to_string()))?;
            let n = self.model_config().projector.num_tokens();
            let keep = match p {
                PruneSchedule::Fastv { keep, .. } | PruneSchedule::EncoderPrune { keep } => *keep,
                PruneSchedule::PyramidDrop { .. } => 1,
            };
            let pool = match p {
                PruneSchedule::EncoderPrune { .. } => self.task.grid * self.task.grid,
                _ => n,
            };
            if keep > pool {
                return Err(err("prune.keep", format!("keeps {keep} of {pool} tokens")));
            }
        }
        self.model_config().validate().map_err(|e| match e {
            vrlab_core::Error::Config(m) => match m.split_once(": ") {
                Some((path, rest)) if !path.contains(' ') => err(path, rest),
                _ => err("<config>", m),
            },
            other => err("<config>", other.to_string()),
        })?;
        let needed = self.vision_tokens() + PROMPT_LEN + self.bench.decode_tokens;
        if needed > self.decoder.max_seq_len {
            return Err(err(
                "decoder.max_seq_len",
                format!("{} is shorter than vision + prompt + decode tokens ({needed})", self.decoder.max_seq_len),
            ));
        }
        if self.train.batch_size == 0 || self.train.batch_size > self.train.n_train {
            return Err(err("train.batch_size", "must lie in 1..=train.n_train"));
        }
        if self.train.n_test == 0 {
            return Err(err("train.n_test", "must be positive"));
        }
        if self.train.lr.is_nan() || self.train.lr < 0.0 {
            return Err(err("train.lr", "must be nonnegative"));
        }
        let (ci, cj) = self.probe.cell;
        if ci >= self.task.grid || cj >= self.task.grid {
            return Err(err("probe.cell", format!("({ci}, {cj}) outside the {0}x{0} grid", self.task.grid)));
        }
        if self.probe.n_train == 0 || self.probe.n_test == 0 {
            return Err(err("probe.n_train", "probe datasets must be nonempty"));
        }
        if let Some(s) = self.probe.stages.iter().find(|s| matches!(s, Stage::DecoderLayer(i) if *i > layers)) {
            return Err(err("probe.stages", format!("{} beyond {layers} decoder layers", s.name())));
        }
        if self.bench.repeats == 0 {
            return Err(err("bench.repeats", "must be positive"));
        }
        Ok(())
    }
}

/// Applies `key.path=value`. The value is read as a TOML value when it
/// parses as one and as a bare string otherwise; `none` removes the key.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| err("--set", format!("expected key=value, got {assignment:?}")))?;
    let key = key.trim();
    let raw = raw.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(err("--set", format!("malformed key {key:?}")));
    }
    let value = if raw == "none" {
        None
    } else {
        Some(match toml::from_str::<Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed"),
            Err(_) => Value::String(raw.to_string()),
        })
    };
    let mut node = table;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| err(&parts[..=i].join("."), "is not a table"))?;
    }
    let last = parts[parts.len() - 1];
    match value {
        Some(v) => {
            node.insert(last.to_string(), v);
        }
        None => {
            node.remove(last);
        }
    }
    Ok(())
}

/// Parses `text`, applies overrides and validates.
pub fn parse(text: &str, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let mut table: Table = toml::from_str(text).map_err(|e| err("<file>", e.message().to_string()))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        err(if path == "." { "<config>" } else { &path }, e.into_inner().message().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| err("<file>", format!("{}: {e}", path.display())))?;
    parse(&text, overrides)
}

pub fn to_toml(cfg: &ExperimentConfig) -> String {
    toml::to_string_pretty(cfg).expect("config serialises")
}
