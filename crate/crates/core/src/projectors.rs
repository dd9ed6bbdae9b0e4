//! Vision projectors: map an encoder feature map `[B, W, H, Dv]` to
//! `(W·H)/s²` decoder-width tokens `[B, n², Dt]`.

use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, MultiHeadAttention};
use crate::params::{Init, ParamStore};
use crate::rng::RngState;
use crate::spatial;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// Standard deviation of the perceiver's initial latent queries.
pub const LATENT_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorKind {
    AvgPool,
    PixelShuffle,
    Perceiver,
    LdpV2,
    /// Uncompressed two-layer MLP; requires `downsample == 1`.
    MlpIdentity,
}

impl ProjectorKind {
    pub const COMPRESSING: [ProjectorKind; 4] = [
        ProjectorKind::AvgPool,
        ProjectorKind::PixelShuffle,
        ProjectorKind::Perceiver,
        ProjectorKind::LdpV2,
    ];
}

/// A per-level encoder feature map `[B, W, H, Dv]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionFeatureMap {
    pub data: Tensor,
    pub level: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    pub kind: ProjectorKind,
    pub downsample: usize,
    pub d_vision: usize,
    pub d_model: usize,
    /// Spatial extents `(W, H)` of the feature map the projector consumes.
    pub feature_grid: (usize, usize),
    #[serde(default = "default_heads")]
    pub heads: usize,
}

fn default_heads() -> usize {
    4
}

impl ProjectorConfig {
    pub fn new(kind: ProjectorKind, downsample: usize, d_vision: usize, d_model: usize, feature_grid: (usize, usize)) -> Self {
        Self {
            kind,
            downsample,
            d_vision,
            d_model,
            feature_grid,
            heads: default_heads(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.downsample;
        if s == 0 {
            return Err(Error::Config("downsample must be positive".into()));
        }
        let (w, h) = self.feature_grid;
        for extent in [w, h] {
            if extent == 0 || extent % s != 0 {
                return Err(Error::NotDivisible { extent, ratio: s });
            }
        }
        if self.kind == ProjectorKind::MlpIdentity && s != 1 {
            return Err(Error::Config(format!(
                "mlp_identity does not compress; downsample must be 1, got {s}"
            )));
        }
        if self.kind == ProjectorKind::Perceiver && self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "perceiver width {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    /// `(W·H)/s²`.
    pub fn num_tokens(&self) -> usize {
        let (w, h) = self.feature_grid;
        (w / self.downsample) * (h / self.downsample)
    }

    /// Output-to-input token ratio `1/s²`.
    pub fn compression_ratio(&self) -> f64 {
        1.0 / (self.downsample * self.downsample) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub cfg: ProjectorConfig,
    pub prefix: String,
}

impl Projector {
    pub fn new(cfg: ProjectorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            prefix: String::from("projector"),
        })
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    fn perceiver_attention(&self) -> MultiHeadAttention {
        let c = &self.cfg;
        MultiHeadAttention::new(self.name("xattn"), c.d_model, c.d_vision, c.d_model, c.heads)
            .expect("validated")
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) {
        let c = &self.cfg;
        let (dv, dt, s) = (c.d_vision, c.d_model, c.downsample);
        match c.kind {
            ProjectorKind::AvgPool | ProjectorKind::MlpIdentity => {
                nn::init_mlp(store, &self.name("mlp"), dv, dt, dt, rng);
            }
            ProjectorKind::PixelShuffle => {
                nn::init_linear_default(store, &self.name("merge"), s * s * dv, dt, rng);
            }
            ProjectorKind::Perceiver => {
                store.init(self.name("latents"), &[c.num_tokens(), dt], Init::Normal(LATENT_INIT_STD), rng);
                self.perceiver_attention().init(store, rng);
                nn::init_layer_norm(store, &self.name("ln"), dt, rng);
                nn::init_mlp(store, &self.name("mlp"), dt, dt, dt, rng);
            }
            ProjectorKind::LdpV2 => {
                nn::init_linear_default(store, &self.name("pw1"), dv, dt, rng);
                nn::init_linear_default(store, &self.name("pw2"), dt, dt, rng);
                store.insert(
                    self.name("dw.w"),
                    Tensor::full(&[s * s, dt], 1.0 / (s * s) as f64),
                );
                store.init(self.name("dw.b"), &[dt], Init::Zeros, rng);
                nn::init_linear_default(store, &self.name("pw3"), dt, dt, rng);
            }
        }
    }

    /// `[B, W, H, Dv]` → `[B, n², Dt]`.
    pub fn forward(&self, g: &mut Graph<'_>, feats: Var) -> Result<Var> {
        let c = &self.cfg;
        let s = c.downsample;
        let (b, w, h, dv) = spatial::grid_dims(g.shape(feats), s)?;
        if dv != c.d_vision {
            return Err(Error::ShapeMismatch {
                op: "projector",
                lhs: g.shape(feats).to_vec(),
                rhs: alloc::vec![c.d_vision],
            });
        }
        let n2 = (w / s) * (h / s);
        match c.kind {
            ProjectorKind::AvgPool | ProjectorKind::MlpIdentity => {
                let pooled = if s == 1 { feats } else { spatial::avg_pool(g, feats, s)? };
                let flat = g.reshape(pooled, &[b, n2, dv])?;
                nn::mlp(g, &self.name("mlp"), flat)
            }
            ProjectorKind::PixelShuffle => {
                let merged = spatial::pixel_unshuffle(g, feats, s)?;
                let flat = g.reshape(merged, &[b, n2, s * s * dv])?;
                nn::linear(g, &self.name("merge"), flat)
            }
            ProjectorKind::Perceiver => {
                if n2 != c.num_tokens() {
                    return Err(Error::ShapeMismatch {
                        op: "perceiver",
                        lhs: g.shape(feats).to_vec(),
                        rhs: alloc::vec![c.feature_grid.0, c.feature_grid.1],
                    });
                }
                let flat = g.reshape(feats, &[b, w * h, dv])?;
                let latents = g.param(&self.name("latents"))?;
                let attn = self.perceiver_attention();
                let a = attn.forward(g, latents, flat, None)?.out;
                let n = nn::layer_norm(g, &self.name("ln"), a)?;
                let m = nn::mlp(g, &self.name("mlp"), n)?;
                g.add(a, m)
            }
            ProjectorKind::LdpV2 => {
                let u = nn::linear(g, &self.name("pw1"), feats)?;
                let act = g.gelu(u);
                let r = nn::linear(g, &self.name("pw2"), act)?;
                let hdn = g.add(u, r)?;
                let win = spatial::window_partition(g, hdn, s)?;
                let k = g.param(&self.name("dw.w"))?;
                let weighted = g.mul(win, k)?;
                let summed = g.sum_axis(weighted, 1)?;
                let bias = g.param(&self.name("dw.b"))?;
                let conv = g.add(summed, bias)?;
                let flat = g.reshape(conv, &[b, n2, c.d_model])?;
                nn::linear(g, &self.name("pw3"), flat)
            }
        }
    }

    /// Forward-only convenience on a plain tensor.
    pub fn apply(&self, store: &ParamStore, feats: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference(store);
        let f = g.constant(feats.clone());
        let out = self.forward(&mut g, f)?;
        Ok(g.value(out).clone())
    }
}

/// `[B, W, H, Dv]` block means, the pooling stage of [`ProjectorKind::AvgPool`].
pub fn adaptive_avg_pool(f: &VisionFeatureMap, s: usize) -> Result<Tensor> {
    spatial::avg_pool_tensor(&f.data, s)
}

/// Space-to-depth stage of [`ProjectorKind::PixelShuffle`].
pub fn pixel_shuffle_merge(f: &VisionFeatureMap, s: usize) -> Result<Tensor> {
    spatial::pixel_unshuffle_tensor(&f.data, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient_with_params, GradCheckOptions};

    fn feats(b: usize, w: usize, h: usize, dv: usize, seed: u64) -> Tensor {
        Tensor::randn(&[b, w, h, dv], 1.0, &mut RngState::new(seed))
    }

    fn build(kind: ProjectorKind, s: usize, dv: usize, dt: usize, grid: (usize, usize), seed: u64) -> (Projector, ParamStore) {
        let p = Projector::new(ProjectorConfig::new(kind, s, dv, dt, grid)).unwrap();
        let mut store = ParamStore::new();
        p.init(&mut store, &mut RngState::new(seed));
        (p, store)
    }

    #[test]
    fn avg_pool_matches_block_mean_oracle_exactly() {
        let x = feats(2, 6, 9, 3, 4);
        let y = spatial::avg_pool_tensor(&x, 3).unwrap();
        for b in 0..2 {
            for i in 0..2 {
                for j in 0..3 {
                    for c in 0..3 {
                        let mut sum = 0.0;
                        for di in 0..3 {
                            for dj in 0..3 {
                                sum += x.at(&[b, 3 * i + di, 3 * j + dj, c]);
                            }
                        }
                        assert_eq!(y.at(&[b, i, j, c]).to_bits(), (sum / 9.0).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn constant_field_pools_to_itself() {
        let x = Tensor::full(&[1, 24, 24, 2], 0.7);
        let y = spatial::avg_pool_tensor(&x, 3).unwrap();
        assert_eq!(y.shape(), &[1, 8, 8, 2]);
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn grid_24_at_s3_gives_sixty_four_tokens() {
        for kind in ProjectorKind::COMPRESSING {
            let cfg = ProjectorConfig::new(kind, 3, 4, 8, (24, 24));
            assert_eq!(cfg.num_tokens(), 64);
        }
        let (p, store) = build(ProjectorKind::AvgPool, 3, 4, 8, (24, 24), 0);
        let out = p.apply(&store, &feats(1, 24, 24, 4, 1)).unwrap();
        assert_eq!(out.shape(), &[1, 64, 8]);
    }

    #[test]
    fn token_count_law_for_every_projector() {
        for kind in ProjectorKind::COMPRESSING {
            for s in [2, 3, 4] {
                let grid = (12, 12);
                let (p, store) = build(kind, s, 4, 8, grid, s as u64);
                let out = p.apply(&store, &feats(2, 12, 12, 4, 7)).unwrap();
                assert_eq!(out.shape(), &[2, 144 / (s * s), 8], "{kind:?} s={s}");
            }
        }
    }

    #[test]
    fn ldp_specialisation_equals_avg_pool() {
        let (s, d) = (3, 4);
        let (p, mut store) = build(ProjectorKind::LdpV2, s, d, d, (6, 6), 2);
        store.insert("projector.pw1.w", Tensor::identity(d));
        store.insert("projector.pw2.w", Tensor::zeros(&[d, d]));
        store.insert("projector.pw3.w", Tensor::identity(d));
        store.insert("projector.dw.w", Tensor::full(&[s * s, d], 1.0 / (s * s) as f64));
        let x = feats(2, 6, 6, d, 3);
        let out = p.apply(&store, &x).unwrap();
        let want = spatial::avg_pool_tensor(&x, s).unwrap().reshape(&[2, 4, d]).unwrap();
        assert!(out.max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn ldp_is_local() {
        let (p, store) = build(ProjectorKind::LdpV2, 3, 4, 8, (6, 6), 5);
        let x = feats(1, 6, 6, 4, 6);
        let base = p.apply(&store, &x).unwrap();
        let mut y = x.clone();
        // pixel (4, 5) lives in window 3
        y.set(&[0, 4, 5, 2], 10.0);
        let moved = p.apply(&store, &y).unwrap();
        for t in 0..3 {
            for c in 0..8 {
                assert_eq!(base.at(&[0, t, c]), moved.at(&[0, t, c]));
            }
        }
        assert!((0..8).any(|c| base.at(&[0, 3, c]) != moved.at(&[0, 3, c])));
    }

    #[test]
    fn perceiver_single_latent_single_feature_is_value_projection() {
        let (p, mut store) = build(ProjectorKind::Perceiver, 1, 4, 8, (1, 1), 3);
        store.insert("projector.mlp.fc2.w", Tensor::zeros(&[8, 8]));
        let x = feats(1, 1, 1, 4, 8);
        let out = p.apply(&store, &x).unwrap();
        let wv = store.get("projector.xattn.v.w").unwrap();
        let bv = store.get("projector.xattn.v.b").unwrap();
        let want = crate::ops::add(&crate::ops::matmul(&x.reshape(&[1, 4]).unwrap(), wv).unwrap(), bv).unwrap();
        assert!(out.reshape(&[1, 8]).unwrap().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn perceiver_spatial_permutation_keeps_latent_count() {
        let (p, store) = build(ProjectorKind::Perceiver, 2, 4, 8, (4, 4), 3);
        let x = feats(1, 4, 4, 4, 9);
        let flat = x.reshape(&[16, 4]).unwrap();
        let rev: alloc::vec::Vec<usize> = (0..16).rev().collect();
        let permuted = crate::ops::index_select(&flat, 0, &rev).unwrap().reshape(&[1, 4, 4, 4]).unwrap();
        let a = p.apply(&store, &x).unwrap();
        let b = p.apply(&store, &permuted).unwrap();
        assert_eq!(a.shape(), b.shape());
        // Without positional terms the resampler is permutation-invariant.
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn mlp_identity_requires_unit_ratio() {
        assert!(Projector::new(ProjectorConfig::new(ProjectorKind::MlpIdentity, 2, 4, 8, (4, 4))).is_err());
        assert!(Projector::new(ProjectorConfig::new(ProjectorKind::AvgPool, 3, 4, 8, (4, 4))).is_err());
    }

    #[test]
    fn every_projector_passes_gradient_check() {
        for kind in [
            ProjectorKind::AvgPool,
            ProjectorKind::PixelShuffle,
            ProjectorKind::Perceiver,
            ProjectorKind::LdpV2,
            ProjectorKind::MlpIdentity,
        ] {
            let s = if kind == ProjectorKind::MlpIdentity { 1 } else { 2 };
            let (p, store) = build(kind, s, 4, 8, (4, 4), 11);
            let rep = check_gradient_with_params(
                &store,
                |g, v| p.forward(g, v[0]),
                &[feats(1, 4, 4, 4, 12)],
                &GradCheckOptions {
                    max_coords_per_tensor: Some(12),
                    ..GradCheckOptions::default()
                },
            )
            .unwrap();
            assert!(rep.max_rel_error <= 1e-4, "{kind:?}: {rep:?}");
        }
    }
}
