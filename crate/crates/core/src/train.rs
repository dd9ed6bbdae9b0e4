//! Minibatch training and evaluation on the glyph-grid task.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Encoded, TextBatch, VisionLanguageModel};
use crate::params::{AdamConfig, AdamState, ParamStore};
use crate::pruning::PruneSchedule;
use crate::rng::RngState;
use crate::task::{Dataset, SyntheticTask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Linear warmup length in steps; the rate then decays linearly to zero.
    pub warmup: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 32,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            warmup: 30,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        let base = self.adam.lr;
        if step < self.warmup {
            return base * (step + 1) as f64 / self.warmup as f64;
        }
        let rest = (self.steps - self.warmup).max(1) as f64;
        base * (1.0 - (step - self.warmup) as f64 / rest).max(0.0)
    }
}

/// Prompt plus answer for each example.
pub fn training_text(task: &SyntheticTask, data: &Dataset, idx: &[usize]) -> TextBatch {
    TextBatch {
        rows: idx
            .iter()
            .map(|&k| {
                let mut row = task.prompt(data.cells[k]);
                row.push(data.labels[k]);
                row
            })
            .collect(),
        n_response: 1,
    }
}

/// Trains `params` in place; returns the per-step loss curve.
pub fn fit(
    model: &VisionLanguageModel,
    params: &mut ParamStore,
    task: &SyntheticTask,
    data: &Dataset,
    enc: &Encoded,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = RngState::new(seed).split("batches");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut state = AdamState::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    let bs = cfg.batch_size.min(data.len());
    for step in 0..cfg.steps {
        if cursor + bs > order.len() {
            rng.shuffle(&mut order);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + bs];
        cursor += bs;
        let batch = enc.select(idx)?;
        let text = training_text(task, data, idx);
        let adam = AdamConfig {
            lr: cfg.lr_at(step),
            ..cfg.adam
        };
        losses.push(model.train_step(params, &mut state, &adam, &batch, &text)?);
    }
    Ok(losses)
}

/// Fraction of examples whose answer is predicted exactly.
pub fn accuracy(
    model: &VisionLanguageModel,
    params: &ParamStore,
    task: &SyntheticTask,
    data: &Dataset,
    enc: &Encoded,
    prune: Option<&PruneSchedule>,
) -> Result<f64> {
    const CHUNK: usize = 64;
    let mut correct = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(CHUNK) {
        let batch = enc.select(idx)?;
        let prompts: Vec<Vec<usize>> = idx.iter().map(|&k| task.prompt(data.cells[k])).collect();
        let pred = model.predict(params, &batch, &prompts, prune)?;
        correct += idx.iter().zip(pred).filter(|(&k, p)| data.labels[k] == *p).count();
    }
    Ok(correct as f64 / data.len() as f64)
}
