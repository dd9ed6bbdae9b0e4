//! The full pipeline: frozen encoder → projector → decoder (with optional
//! Vision Remember blocks or token pruning), plus training and evaluation.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig, Forward, ForwardOptions};
use crate::encoder::{EncoderConfig, ToyEncoder};
use crate::error::{Error, Result};
use crate::ops;
use crate::params::{AdamConfig, AdamState, ParamStore};
use crate::projectors::{Projector, ProjectorConfig, ProjectorKind};
use crate::pruning::{self, PruneSchedule};
use crate::rng::RngState;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;
use crate::vision_remember::{fuse_multilevel, MultiLevelFeatures};

pub const SCOPE_PROJECTOR: &str = "projector";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// Cross-field consistency, reported with field paths.
    pub fn validate(&self) -> Result<()> {
        let at = |path: &str, e: Error| Error::Config(format!("{path}: {e}"));
        self.encoder.validate().map_err(|e| at("encoder", e))?;
        self.projector.validate().map_err(|e| at("projector", e))?;
        self.decoder.validate().map_err(|e| at("decoder", e))?;
        let (e, p, d) = (&self.encoder, &self.projector, &self.decoder);
        if p.d_vision != e.d_vision {
            return Err(Error::Config(format!(
                "projector.d_vision: {} differs from encoder.d_vision {}",
                p.d_vision, e.d_vision
            )));
        }
        if p.feature_grid != e.grid {
            return Err(Error::Config(format!(
                "projector.feature_grid: {:?} differs from encoder.grid {:?}",
                p.feature_grid, e.grid
            )));
        }
        if p.d_model != d.d_model {
            return Err(Error::Config(format!(
                "projector.d_model: {} differs from decoder.d_model {}",
                p.d_model, d.d_model
            )));
        }
        if let Some(vr) = &d.vr {
            if vr.downsample != p.downsample {
                return Err(Error::Config(format!(
                    "decoder.vr.downsample: {} differs from projector.downsample {}",
                    vr.downsample, p.downsample
                )));
            }
            if vr.d_vision != e.d_vision {
                return Err(Error::Config(format!(
                    "decoder.vr.d_vision: {} differs from encoder.d_vision {}",
                    vr.d_vision, e.d_vision
                )));
            }
            if let Some(&l) = vr.feature_levels.iter().find(|&&l| l == 0 || l > e.depth) {
                return Err(Error::Config(format!(
                    "decoder.vr.feature_levels: level {l} outside 1..={}",
                    e.depth
                )));
            }
        }
        Ok(())
    }
}

/// Encoder outputs for a batch of images.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    /// Last encoder level `[B, W, H, Dv]`, the projector input.
    pub top: Tensor,
    pub fused: Option<MultiLevelFeatures>,
}

impl Encoded {
    pub fn batch(&self) -> usize {
        self.top.dim(0)
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            top: ops::index_select(&self.top, 0, idx)?,
            fused: self.fused.as_ref().map(|f| f.select(idx)).transpose()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// Frozen encoder weights (`enc.*`).
    pub encoder: ParamStore,
    pub trainable: ParamStore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisionLanguageModel {
    pub cfg: ModelConfig,
    pub encoder: ToyEncoder,
    pub projector: Projector,
    pub decoder: Decoder,
}

/// Text for a batch: prompt rows (optionally followed by response ids).
#[derive(Clone, Debug, PartialEq)]
pub struct TextBatch {
    pub rows: Vec<Vec<usize>>,
    pub n_response: usize,
}

impl VisionLanguageModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            encoder: ToyEncoder::new(cfg.encoder.clone())?,
            projector: Projector::new(cfg.projector.clone())?,
            decoder: Decoder::new(cfg.decoder.clone())?,
            cfg,
        })
    }

    /// Encoder weights depend on `encoder_seed` only, so runs that differ in
    /// projector or decoder share identical features.
    pub fn init(&self, encoder_seed: u64, seed: u64) -> ModelParams {
        let mut encoder = ParamStore::new();
        self.encoder.init(&mut encoder, &mut RngState::new(encoder_seed).split("encoder"));
        let mut trainable = ParamStore::new();
        let rng = RngState::new(seed).split("model");
        self.projector.init(&mut trainable, &mut rng.split("projector"));
        self.decoder.init(&mut trainable, &mut rng.split("decoder"));
        ModelParams { encoder, trainable }
    }

    pub fn encode(&self, encoder_params: &ParamStore, images: &Tensor) -> Result<Encoded> {
        let levels = self.encoder.encode(encoder_params, images)?;
        let fused = match &self.cfg.decoder.vr {
            Some(vr) => {
                let picked: Vec<_> = vr.feature_levels.iter().map(|&l| levels[l - 1].clone()).collect();
                Some(fuse_multilevel(&picked)?)
            }
            None => None,
        };
        Ok(Encoded {
            top: levels.last().expect("depth ≥ 1").data.clone(),
            fused,
        })
    }

    /// Projected vision tokens `[B, n, Dt]`, applying encoder pruning if scheduled.
    pub fn vision_tokens(&self, g: &mut Graph<'_>, enc: &Encoded, prune: Option<&PruneSchedule>) -> Result<Var> {
        let prev = g.set_scope(SCOPE_PROJECTOR);
        let top = match prune {
            Some(PruneSchedule::EncoderPrune { keep }) => {
                let p = &self.cfg.projector;
                if p.downsample != 1 || p.kind == ProjectorKind::Perceiver {
                    return Err(Error::Config(
                        "prune: encoder_prune needs an uncompressed per-token projector".into(),
                    ));
                }
                let (kept, _) = pruning::encoder_prune(&enc.top, *keep)?;
                let b = kept.dim(0);
                let d = kept.last_dim();
                kept.reshape(&[b, *keep, 1, d])?
            }
            _ => enc.top.clone(),
        };
        let x = g.constant(top);
        let out = self.projector.forward(g, x);
        g.set_scope(&prev);
        out
    }

    /// Full prefill over `enc` and `text`.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        enc: &Encoded,
        text: &TextBatch,
        prune: Option<&PruneSchedule>,
        opts: ForwardOptions<'_>,
    ) -> Result<Forward> {
        let vision = self.vision_tokens(g, enc, prune)?;
        let nv = g.shape(vision)[1];
        let (x, layout) = self.decoder.embed(g, Some(vision), &text.rows, text.n_response)?;
        let feats = enc.fused.as_ref().map(|f| g.constant(f.fused.clone()));
        let plan = match prune {
            Some(s) => Some(s.plan(nv, self.cfg.decoder.num_layers)?),
            None => None,
        };
        let opts = ForwardOptions {
            prune: plan.as_ref(),
            ..opts
        };
        self.decoder.forward(g, x, layout, feats, &opts, None)
    }

    /// Mean cross-entropy over response tokens.
    pub fn loss(&self, g: &mut Graph<'_>, enc: &Encoded, text: &TextBatch) -> Result<Var> {
        if text.n_response == 0 {
            return Err(Error::Invalid("loss needs response tokens".into()));
        }
        let f = self.forward(g, enc, text, None, ForwardOptions::default())?;
        let r = f.layout.response;
        let b = text.rows.len();
        let logits = g.slice(f.logits, 1, r.start - 1, r.end - 1)?;
        let logits = g.reshape(logits, &[b * r.len(), self.cfg.decoder.vocab_size])?;
        let nt = text.rows[0].len();
        let targets: Vec<usize> = text
            .rows
            .iter()
            .flat_map(|row| row[nt - text.n_response..].iter().copied())
            .collect();
        g.cross_entropy(logits, &targets)
    }

    /// One Adam step; returns the loss before the update.
    pub fn train_step(
        &self,
        params: &mut ParamStore,
        state: &mut AdamState,
        adam: &AdamConfig,
        enc: &Encoded,
        text: &TextBatch,
    ) -> Result<f64> {
        let (loss, grads) = {
            let mut g = Graph::with_params(params);
            let l = self.loss(&mut g, enc, text)?;
            let value = g.value(l).item();
            if !value.is_finite() {
                return Err(Error::NonFinite);
            }
            (value, g.backward(l).params(&g))
        };
        state.step(adam, params, &grads)?;
        Ok(loss)
    }

    /// Argmax next-token prediction after each prompt row.
    pub fn predict(
        &self,
        params: &ParamStore,
        enc: &Encoded,
        prompts: &[Vec<usize>],
        prune: Option<&PruneSchedule>,
    ) -> Result<Vec<usize>> {
        let mut g = Graph::inference(params);
        let text = TextBatch {
            rows: prompts.to_vec(),
            n_response: 0,
        };
        let f = self.forward(&mut g, enc, &text, prune, ForwardOptions::default())?;
        let s = f.layout.len();
        let logits = g.slice(f.logits, 1, s - 1, s)?;
        Ok(g.value(logits).argmax_last())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vision_remember::VisionRememberConfig;
    use alloc::vec;

    pub(crate) fn tiny(vr: bool) -> ModelConfig {
        let encoder = EncoderConfig {
            patch: 2,
            grid: (4, 4),
            d_vision: 4,
            depth: 2,
            heads: 2,
            ..EncoderConfig::default()
        };
        let projector = ProjectorConfig::new(ProjectorKind::AvgPool, 2, 4, 8, (4, 4));
        let decoder = DecoderConfig {
            num_layers: 2,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            vocab_size: 12,
            max_seq_len: 16,
            vr: vr.then(|| VisionRememberConfig {
                insertion_layers: vec![1],
                feature_levels: vec![1, 2],
                downsample: 2,
                d_model: 8,
                d_vision: 4,
                heads: 2,
                ..VisionRememberConfig::default()
            }),
        };
        ModelConfig {
            encoder,
            projector,
            decoder,
        }
    }

    #[test]
    fn mismatched_fields_are_reported_by_path() {
        let mut cfg = tiny(true);
        cfg.decoder.vr.as_mut().unwrap().downsample = 3;
        let msg = format!("{}", VisionLanguageModel::new(cfg).unwrap_err());
        assert!(msg.contains("decoder.vr.downsample"), "{msg}");
        let mut cfg = tiny(false);
        cfg.projector.d_model = 16;
        let msg = format!("{}", VisionLanguageModel::new(cfg).unwrap_err());
        assert!(msg.contains("projector.d_model"), "{msg}");
    }

    #[test]
    fn initial_loss_is_near_uniform_and_one_step_descends() {
        for vr in [false, true] {
            let m = VisionLanguageModel::new(tiny(vr)).unwrap();
            let mut p = m.init(1, 2);
            let img = Tensor::randn(&[2, 8, 8, 1], 1.0, &mut RngState::new(3));
            let enc = m.encode(&p.encoder, &img).unwrap();
            let text = TextBatch {
                rows: vec![vec![1, 2, 3], vec![4, 5, 6]],
                n_response: 1,
            };
            let mut g = Graph::inference(&p.trainable);
            let l0 = m.loss(&mut g, &enc, &text).unwrap();
            let l0 = g.value(l0).item();
            let uniform = libm::log(12.0);
            assert!((l0 - uniform).abs() < 0.1 * uniform, "{l0}");
            let adam = AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            };
            let mut st = AdamState::new();
            let before = m.train_step(&mut p.trainable, &mut st, &adam, &enc, &text).unwrap();
            let mut g = Graph::inference(&p.trainable);
            let l1 = m.loss(&mut g, &enc, &text).unwrap();
            assert!(g.value(l1).item() < before);
        }
    }
}
