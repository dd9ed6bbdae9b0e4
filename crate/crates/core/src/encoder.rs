//! Frozen stand-in vision encoder: patchify, embed, and a few bidirectional
//! pre-norm transformer layers whose every output is exposed as a level.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, MultiHeadAttention};
use crate::params::{Init, ParamStore};
use crate::projectors::VisionFeatureMap;
use crate::rng::RngState;
use crate::spatial;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

pub const SCOPE: &str = "encoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub patch: usize,
    pub in_channels: usize,
    /// Patch grid `(W, H)`.
    pub grid: (usize, usize),
    pub d_vision: usize,
    pub depth: usize,
    pub heads: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            in_channels: 1,
            grid: (6, 6),
            d_vision: 16,
            depth: 3,
            heads: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.in_channels == 0 || self.grid.0 == 0 || self.grid.1 == 0 || self.depth == 0 {
            return Err(Error::Config("encoder extents must be positive".into()));
        }
        if self.heads == 0 || self.d_vision % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_vision {} not divisible by {} heads",
                self.d_vision, self.heads
            )));
        }
        Ok(())
    }

    /// Image extents `(W·p, H·p)`.
    pub fn image_size(&self) -> (usize, usize) {
        (self.grid.0 * self.patch, self.grid.1 * self.patch)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyEncoder {
    pub cfg: EncoderConfig,
}

impl ToyEncoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    fn attn(&self, layer: usize) -> MultiHeadAttention {
        let d = self.cfg.d_vision;
        MultiHeadAttention::new(format!("enc.layer.{layer}.attn"), d, d, d, self.cfg.heads)
            .expect("validated")
            .with_output(d, false)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) {
        let c = &self.cfg;
        let d = c.d_vision;
        let pin = c.patch * c.patch * c.in_channels;
        nn::init_linear_default(store, "enc.patch", pin, d, rng);
        store.init("enc.pos", &[c.grid.0, c.grid.1, d], Init::Normal(1.0), rng);
        for l in 1..=c.depth {
            nn::init_layer_norm(store, &format!("enc.layer.{l}.ln1"), d, rng);
            self.attn(l).init(store, rng);
            nn::init_layer_norm(store, &format!("enc.layer.{l}.ln2"), d, rng);
            nn::init_mlp(store, &format!("enc.layer.{l}.mlp"), d, 2 * d, d, rng);
        }
    }

    /// `[B, W·p, H·p, C]` → one `[B, W, H, Dv]` map per layer.
    pub fn forward(&self, g: &mut Graph<'_>, image: Var) -> Result<Vec<Var>> {
        let c = &self.cfg;
        let (b, wp, hp, ch) = spatial::grid_dims(g.shape(image), c.patch)?;
        if (wp / c.patch, hp / c.patch) != c.grid || ch != c.in_channels {
            return Err(Error::ShapeMismatch {
                op: "encoder",
                lhs: g.shape(image).to_vec(),
                rhs: alloc::vec![c.grid.0 * c.patch, c.grid.1 * c.patch, c.in_channels],
            });
        }
        let (w, h, d) = (c.grid.0, c.grid.1, c.d_vision);
        let prev = g.set_scope(SCOPE);
        let patches = spatial::pixel_unshuffle(g, image, c.patch)?;
        let x = nn::linear(g, "enc.patch", patches)?;
        let pos = g.param("enc.pos")?;
        let x = g.add(x, pos)?;
        let mut x = g.reshape(x, &[b, w * h, d])?;
        let mut levels = Vec::with_capacity(c.depth);
        for l in 1..=c.depth {
            let attn = self.attn(l);
            let n = nn::layer_norm(g, &format!("enc.layer.{l}.ln1"), x)?;
            let a = attn.forward(g, n, n, None)?.out;
            let r = g.add(x, a)?;
            let n = nn::layer_norm(g, &format!("enc.layer.{l}.ln2"), r)?;
            let m = nn::mlp(g, &format!("enc.layer.{l}.mlp"), n)?;
            x = g.add(r, m)?;
            levels.push(g.reshape(x, &[b, w, h, d])?);
        }
        g.set_scope(&prev);
        Ok(levels)
    }

    /// Forward-only encoding; level indices are 1-based layer numbers.
    pub fn encode(&self, store: &ParamStore, image: &Tensor) -> Result<Vec<VisionFeatureMap>> {
        let mut g = Graph::inference(store);
        let x = g.constant(image.clone());
        let levels = self.forward(&mut g, x)?;
        Ok(levels
            .into_iter()
            .enumerate()
            .map(|(i, v)| VisionFeatureMap {
                data: g.value(v).clone(),
                level: i + 1,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient_with_params, GradCheckOptions};

    fn small() -> (ToyEncoder, ParamStore) {
        let enc = ToyEncoder::new(EncoderConfig {
            patch: 2,
            grid: (2, 3),
            d_vision: 4,
            heads: 2,
            ..EncoderConfig::default()
        })
        .unwrap();
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut RngState::new(3));
        (enc, store)
    }

    #[test]
    fn three_levels_share_spatial_shape() {
        let (enc, store) = small();
        let img = Tensor::randn(&[2, 4, 6, 1], 1.0, &mut RngState::new(1));
        let levels = enc.encode(&store, &img).unwrap();
        assert_eq!(levels.len(), 3);
        for (i, l) in levels.iter().enumerate() {
            assert_eq!(l.level, i + 1);
            assert_eq!(l.data.shape(), &[2, 2, 3, 4]);
        }
        let again = enc.encode(&store, &img).unwrap();
        assert!(levels.iter().zip(&again).all(|(a, b)| a.data.bit_eq(&b.data)));
    }

    #[test]
    fn rejects_non_divisible_image() {
        let (enc, store) = small();
        assert!(enc.encode(&store, &Tensor::zeros(&[1, 5, 6, 1])).is_err());
    }

    #[test]
    fn encoder_gradient() {
        let (enc, store) = small();
        let img = Tensor::randn(&[1, 4, 6, 1], 1.0, &mut RngState::new(2));
        let rep = check_gradient_with_params(
            &store,
            |g, v| Ok(*enc.forward(g, v[0])?.last().unwrap()),
            &[img],
            &GradCheckOptions {
                max_coords_per_tensor: Some(6),
                ..GradCheckOptions::default()
            },
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
    }
}
