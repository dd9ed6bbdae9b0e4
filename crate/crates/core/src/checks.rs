//! Executable verification suites. The `verify` command runs them and the
//! test suite asserts on them, so both always exercise the same code.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attention;
use crate::cost::{self, CostReport};
use crate::decoder::{greedy_decode, Decoder, DecoderConfig, ForwardOptions, KVCache, SequenceLayout};
use crate::encoder::{EncoderConfig, ToyEncoder};
use crate::error::Result;
use crate::gradcheck::{check_gradient_with_params, GradCheckOptions};
use crate::nn::{self, MultiHeadAttention};
use crate::ops;
use crate::params::ParamStore;
use crate::projectors::{Projector, ProjectorConfig, ProjectorKind, VisionFeatureMap};
use crate::pruning::{self, PruneSchedule};
use crate::rng::RngState;
use crate::spatial;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;
use crate::vision_remember::{self, BlockOrder, Interaction, VisionRememberBlock, VisionRememberConfig};

/// One measured quantity and the bound it must respect.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// Human-readable bound, e.g. `<= 1e-12`.
    pub bound: String,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound: format!("<= {bound:e}"),
            passed: value <= bound,
        }
    }

    pub fn above(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound: format!("> {bound:e}"),
            passed: value > bound,
        }
    }

    pub fn holds(name: impl Into<String>, ok: bool) -> Self {
        Self {
            name: name.into(),
            value: if ok { 1.0 } else { 0.0 },
            bound: "holds".to_string(),
            passed: ok,
        }
    }

    pub fn equal_u64(name: impl Into<String>, got: u64, want: u64) -> Self {
        Self {
            name: name.into(),
            value: got as f64,
            bound: format!("== {want}"),
            passed: got == want,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub name: String,
    pub checks: Vec<Check>,
}

impl Suite {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            checks: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    fn push(&mut self, c: Check) {
        self.checks.push(c);
    }
}

/// Replaces every parameter whose name starts with `prefix` by `N(0, std²)`
/// draws, so zero-initialised projections stop hiding their inputs.
pub fn randomize(store: &mut ParamStore, prefix: &str, std: f64, rng: &mut RngState) {
    let names: Vec<String> = store.names().filter(|n| n.starts_with(prefix)).cloned().collect();
    for n in names {
        let shape = store.get(&n).expect("listed").shape().to_vec();
        store.insert(n, Tensor::randn(&shape, std, rng));
    }
}

// -- shared toy decoder ------------------------------------------------------

const TOY_VOCAB: usize = 24;
const TOY_WIDTH: usize = 16;
/// Fused feature grid `W = H` read by the toy blocks; with `s = 2` it gives
/// four vision tokens.
const TOY_GRID: usize = 4;
const TOY_LEVELS: usize = 2;
const TOY_DV: usize = 4;

fn toy_vr(layers: Vec<usize>, interaction: Interaction, order: BlockOrder) -> VisionRememberConfig {
    VisionRememberConfig {
        insertion_layers: layers,
        feature_levels: (1..=TOY_LEVELS).collect(),
        interaction,
        order,
        downsample: 2,
        d_model: TOY_WIDTH,
        d_vision: TOY_DV,
        heads: 4,
    }
}

fn toy_decoder(num_layers: usize, vr: Option<VisionRememberConfig>) -> DecoderConfig {
    DecoderConfig {
        num_layers,
        d_model: TOY_WIDTH,
        heads: 4,
        d_ff: 2 * TOY_WIDTH,
        vocab_size: TOY_VOCAB,
        max_seq_len: 64,
        vr,
    }
}

struct Toy {
    dec: Decoder,
    store: ParamStore,
    vision: Tensor,
    feats: Tensor,
}

impl Toy {
    fn new(cfg: DecoderConfig, n_vision: usize, batch: usize, seed: u64) -> Result<Self> {
        let dec = Decoder::new(cfg)?;
        let rng = RngState::new(seed);
        let mut store = ParamStore::new();
        dec.init(&mut store, &mut rng.split("init"));
        randomize(&mut store, "vr.", 0.3, &mut rng.split("vr"));
        let mut data = rng.split("data");
        let vision = Tensor::randn(&[batch, n_vision, TOY_WIDTH], 1.0, &mut data);
        let feats = Tensor::randn(&[batch, TOY_GRID, TOY_GRID, TOY_LEVELS * TOY_DV], 1.0, &mut data);
        Ok(Self {
            dec,
            store,
            vision,
            feats,
        })
    }

    fn text(&self, batch: usize, len: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut rng = RngState::new(seed).split("text");
        (0..batch)
            .map(|_| (0..len).map(|_| rng.below(TOY_VOCAB)).collect())
            .collect()
    }

    fn feats_if_needed(&self) -> Option<&Tensor> {
        self.dec.cfg.vr.as_ref().map(|_| &self.feats)
    }

    /// Prefill logits plus the per-layer bookkeeping.
    fn prefill(&self, g: &mut Graph<'_>, text: &[Vec<usize>], n_resp: usize, opts: &ForwardOptions<'_>) -> Result<crate::decoder::Forward> {
        let v = g.constant(self.vision.clone());
        let f = self.feats_if_needed().map(|t| g.constant(t.clone()));
        let (x, layout) = self.dec.embed(g, Some(v), text, n_resp)?;
        self.dec.forward(g, x, layout, f, opts, None)
    }

    fn logits(&self, text: &[Vec<usize>], n_resp: usize, opts: &ForwardOptions<'_>) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let f = self.prefill(&mut g, text, n_resp, opts)?;
        Ok(g.value(f.logits).clone())
    }
}

// -- suites ------------------------------------------------------------------

/// Local window attention against global attention under a block-diagonal
/// mask, over `configs` random shapes.
pub fn local_global_equivalence(configs: usize, seed: u64) -> Result<Suite> {
    let mut suite = Suite::new("local_global_equivalence");
    let mut rng = RngState::new(seed).split("local-global");
    let mut worst = 0.0f64;
    let mut separation = f64::INFINITY;
    for _ in 0..configs {
        let s = [2, 3][rng.below(2)];
        let w = if s == 3 { 6 } else { [4, 6][rng.below(2)] };
        let levels = [1, 3][rng.below(2)];
        let b = 1 + rng.below(2);
        let dv = 4;
        let dt = 8;
        let cfg = VisionRememberConfig {
            insertion_layers: vec![1],
            feature_levels: (1..=levels).collect(),
            downsample: s,
            d_model: dt,
            d_vision: dv,
            heads: [1, 2, 4][rng.below(3)],
            ..VisionRememberConfig::default()
        };
        let block = VisionRememberBlock::new(cfg, 1);
        let mut store = ParamStore::new();
        block.init(&mut store, &mut rng);
        randomize(&mut store, "vr.", 0.5, &mut rng);
        let n2 = (w / s) * (w / s);
        let tokens = Tensor::randn(&[b, n2, dt], 1.0, &mut rng);
        let feats = Tensor::randn(&[b, w, w, levels * dv], 1.0, &mut rng);
        let mask = spatial::block_diagonal_mask(w, w, s)?;
        let run = |inter: Interaction, m: Option<&Tensor>| -> Result<Tensor> {
            let mut g = Graph::inference(&store);
            let t = g.constant(tokens.clone());
            let f = g.constant(feats.clone());
            let out = block.cross_attention_core(&mut g, t, f, inter, m)?;
            Ok(g.value(out).clone())
        };
        let local = run(Interaction::Local, None)?;
        worst = worst.max(local.max_abs_diff(&run(Interaction::Global, Some(&mask))?));
        if n2 > 1 {
            separation = separation.min(local.max_abs_diff(&run(Interaction::Global, None)?));
        }
    }
    suite.push(Check::at_most("local vs masked global max |diff|", worst, 1e-10));
    suite.push(Check::above("local vs unmasked global differ", separation, 1e-8));
    Ok(suite)
}

type GraphFn = Box<dyn Fn(&mut Graph<'_>, &[Var]) -> Result<Var>>;

struct GradCase {
    name: &'static str,
    inputs: Vec<Vec<usize>>,
    params: Box<dyn Fn(&mut RngState) -> ParamStore>,
    f: GraphFn,
    coords: Option<usize>,
}

fn case(name: &'static str, inputs: Vec<Vec<usize>>, f: GraphFn) -> GradCase {
    GradCase {
        name,
        inputs,
        params: Box::new(|_| ParamStore::new()),
        f,
        coords: None,
    }
}

fn scaled_gelu_adjoint(inputs: &[&Tensor], _out: &Tensor, g: &Tensor) -> Vec<Tensor> {
    vec![ops::gelu_backward(g, inputs[0]).map(|v| 1.1 * v)]
}

fn gradient_cases(inject_fault: bool) -> Vec<GradCase> {
    let mut cases = vec![
        case("add", vec![vec![2, 3], vec![2, 3]], Box::new(|g, v| g.add(v[0], v[1]))),
        case("add_broadcast", vec![vec![2, 3, 4], vec![3, 4]], Box::new(|g, v| g.add(v[0], v[1]))),
        case("sub", vec![vec![2, 3], vec![3]], Box::new(|g, v| g.sub(v[0], v[1]))),
        case("mul", vec![vec![2, 3], vec![2, 3]], Box::new(|g, v| g.mul(v[0], v[1]))),
        case("mul_broadcast", vec![vec![2, 4, 3], vec![4, 3]], Box::new(|g, v| g.mul(v[0], v[1]))),
        case("scale", vec![vec![5]], Box::new(|g, v| Ok(g.scale(v[0], -1.7)))),
        case("div_scalar", vec![vec![5]], Box::new(|g, v| Ok(g.div_scalar(v[0], 3.0)))),
        case("gelu", vec![vec![7]], Box::new(|g, v| Ok(g.gelu(v[0])))),
        case("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|g, v| g.matmul(v[0], v[1]))),
        case("matmul_batched", vec![vec![2, 3, 4], vec![2, 4, 2]], Box::new(|g, v| g.matmul(v[0], v[1]))),
        case("matmul_shared_rhs", vec![vec![2, 3, 4], vec![4, 2]], Box::new(|g, v| g.matmul(v[0], v[1]))),
        case("matmul_t", vec![vec![2, 3, 4], vec![2, 5, 4]], Box::new(|g, v| g.matmul_t(v[0], v[1]))),
        case("softmax_last", vec![vec![2, 5]], Box::new(|g, v| g.softmax(v[0], 1))),
        case("softmax_first", vec![vec![4, 3]], Box::new(|g, v| g.softmax(v[0], 0))),
        case(
            "layer_norm",
            vec![vec![3, 6], vec![6], vec![6]],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])),
        ),
        case("concat", vec![vec![2, 3], vec![2, 1]], Box::new(|g, v| g.concat(&[v[0], v[1]], 1))),
        case("slice", vec![vec![2, 5, 2]], Box::new(|g, v| g.slice(v[0], 1, 1, 4))),
        case(
            "index_select",
            vec![vec![4, 3]],
            Box::new(|g, v| g.index_select(v[0], 0, &[2, 0, 2, 3])),
        ),
        case("reshape", vec![vec![2, 6]], Box::new(|g, v| g.reshape(v[0], &[3, 4]))),
        case("permute", vec![vec![2, 3, 4]], Box::new(|g, v| g.permute(v[0], &[2, 0, 1]))),
        case("sum_axis", vec![vec![2, 3, 4]], Box::new(|g, v| g.sum_axis(v[0], 1))),
        case("mean_axis", vec![vec![2, 3, 4]], Box::new(|g, v| g.mean_axis(v[0], 2))),
        case("max_axis", vec![vec![3, 5]], Box::new(|g, v| g.max_axis(v[0], 0))),
        case(
            "cross_entropy",
            vec![vec![4, 5]],
            Box::new(|g, v| g.cross_entropy(v[0], &[0, 4, 2, 2])),
        ),
        case(
            "attention_masked",
            vec![vec![2, 4, 3], vec![2, 4, 3], vec![2, 4, 3]],
            Box::new(|g, v| {
                let m = g.constant(attention::causal_mask(4));
                Ok(attention::sdpa(g, v[0], v[1], v[2], Some(m))?.0)
            }),
        ),
        case(
            "window_partition",
            vec![vec![1, 4, 6, 2]],
            Box::new(|g, v| spatial::window_partition(g, v[0], 2)),
        ),
        case(
            "pixel_unshuffle",
            vec![vec![1, 6, 6, 2]],
            Box::new(|g, v| spatial::pixel_unshuffle(g, v[0], 3)),
        ),
        case("avg_pool", vec![vec![2, 4, 4, 2]], Box::new(|g, v| spatial::avg_pool(g, v[0], 2))),
        case(
            "text_guided_token",
            vec![vec![2, 3, 4]],
            Box::new(|g, v| vision_remember::text_guided_token(g, v[0])),
        ),
    ];

    let mha = || MultiHeadAttention::new("mha", 6, 4, 8, 2).expect("valid").with_output(6, false);
    cases.push(GradCase {
        name: "multi_head_attention",
        inputs: vec![vec![2, 3, 6], vec![2, 5, 4]],
        params: Box::new(move |rng| {
            let mut s = ParamStore::new();
            mha().init(&mut s, rng);
            s
        }),
        f: Box::new(move |g, v| Ok(mha().forward(g, v[0], v[1], None)?.out)),
        coords: Some(6),
    });
    cases.push(GradCase {
        name: "mlp",
        inputs: vec![vec![2, 3, 4]],
        params: Box::new(|rng| {
            let mut s = ParamStore::new();
            nn::init_mlp(&mut s, "mlp", 4, 6, 3, rng);
            s
        }),
        f: Box::new(|g, v| nn::mlp(g, "mlp", v[0])),
        coords: Some(6),
    });

    for (name, kind) in [
        ("projector_avg_pool", ProjectorKind::AvgPool),
        ("projector_pixel_shuffle", ProjectorKind::PixelShuffle),
        ("projector_perceiver", ProjectorKind::Perceiver),
        ("projector_ldp_v2", ProjectorKind::LdpV2),
    ] {
        let p = Projector::new(ProjectorConfig::new(kind, 2, 4, 8, (4, 4))).expect("valid");
        let q = p.clone();
        cases.push(GradCase {
            name,
            inputs: vec![vec![2, 4, 4, 4]],
            params: Box::new(move |rng| {
                let mut s = ParamStore::new();
                p.init(&mut s, rng);
                randomize(&mut s, "projector.", 0.5, rng);
                s
            }),
            f: Box::new(move |g, v| q.forward(g, v[0])),
            coords: Some(6),
        });
    }

    for (name, order, inter) in [
        ("vr_block_self_cross_local", BlockOrder::SelfThenCross, Interaction::Local),
        ("vr_block_self_cross_global", BlockOrder::SelfThenCross, Interaction::Global),
        ("vr_block_cross_self_local", BlockOrder::CrossThenSelf, Interaction::Local),
        ("vr_block_cross_self_global", BlockOrder::CrossThenSelf, Interaction::Global),
    ] {
        let block = VisionRememberBlock::new(toy_vr(vec![1], inter, order), 1);
        let b2 = block.clone();
        let layout = SequenceLayout::new(4, 2, 1);
        cases.push(GradCase {
            name,
            inputs: vec![vec![1, 7, TOY_WIDTH], vec![1, TOY_GRID, TOY_GRID, TOY_LEVELS * TOY_DV]],
            params: Box::new(move |rng| {
                let mut s = ParamStore::new();
                block.init(&mut s, rng);
                randomize(&mut s, "vr.", 0.5, rng);
                s
            }),
            f: Box::new(move |g, v| b2.forward(g, v[0], &layout, v[1])),
            coords: Some(5),
        });
    }

    let enc = ToyEncoder::new(EncoderConfig {
        patch: 2,
        grid: (2, 2),
        d_vision: 4,
        depth: 2,
        heads: 2,
        ..EncoderConfig::default()
    })
    .expect("valid");
    let enc2 = enc.clone();
    cases.push(GradCase {
        name: "encoder",
        inputs: vec![vec![1, 4, 4, 1]],
        params: Box::new(move |rng| {
            let mut s = ParamStore::new();
            enc.init(&mut s, rng);
            s
        }),
        f: Box::new(move |g, v| Ok(*enc2.forward(g, v[0])?.last().expect("depth ≥ 1"))),
        coords: Some(4),
    });

    let dec = Decoder::new(toy_decoder(2, Some(toy_vr(vec![1], Interaction::Local, BlockOrder::SelfThenCross))))
        .expect("valid");
    let dec2 = dec.clone();
    cases.push(GradCase {
        name: "decoder_with_block",
        inputs: vec![vec![1, 4, TOY_WIDTH], vec![1, TOY_GRID, TOY_GRID, TOY_LEVELS * TOY_DV]],
        params: Box::new(move |rng| {
            let mut s = ParamStore::new();
            dec.init(&mut s, rng);
            randomize(&mut s, "vr.", 0.3, rng);
            s
        }),
        f: Box::new(move |g, v| {
            let (x, layout) = dec2.embed(g, Some(v[0]), &[vec![3, 5, 7]], 1)?;
            Ok(dec2.forward(g, x, layout, Some(v[1]), &ForwardOptions::default(), None)?.logits)
        }),
        coords: Some(3),
    });

    if inject_fault {
        cases.push(case(
            "gelu_with_wrong_adjoint",
            vec![vec![6]],
            Box::new(|g, v| {
                let out = ops::gelu(g.value(v[0]));
                Ok(g.custom(&[v[0]], out, scaled_gelu_adjoint))
            }),
        ));
    }
    cases
}

/// Central finite differences against every hand-written adjoint, the
/// projectors, all four block variants, the encoder and a decoder with a
/// block, `seeds` draws each. `inject_fault` adds an op with a deliberately
/// wrong adjoint.
pub fn gradients(seeds: u64, inject_fault: bool) -> Result<Suite> {
    let mut suite = Suite::new("gradients");
    for c in gradient_cases(inject_fault) {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let mut rng = RngState::new(seed).split(c.name);
            let params = (c.params)(&mut rng);
            let inputs: Vec<Tensor> = c.inputs.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();
            let opts = GradCheckOptions {
                seed,
                max_coords_per_tensor: c.coords,
                ..GradCheckOptions::default()
            };
            let rep = check_gradient_with_params(&params, &c.f, &inputs, &opts)?;
            worst = worst.max(rep.max_rel_error);
        }
        suite.push(Check::at_most(c.name, worst, 1e-4));
    }
    Ok(suite)
}

/// Exact pooling oracle, merge round trip, LDP specialisation and the
/// token-count law.
pub fn projector_oracles(seed: u64) -> Result<Suite> {
    let mut suite = Suite::new("projector_oracles");
    let mut rng = RngState::new(seed).split("projectors");

    let x = Tensor::randn(&[2, 6, 9, 3], 1.0, &mut rng);
    let map = VisionFeatureMap { data: x.clone(), level: 1 };
    let pooled = crate::projectors::adaptive_avg_pool(&map, 3)?;
    let mut exact = pooled.shape() == [2, 2, 3, 3];
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
                    exact &= pooled.at(&[b, i, j, c]).to_bits() == (sum / 9.0).to_bits();
                }
            }
        }
    }
    suite.push(Check::holds("adaptive_avg_pool equals block-mean oracle bitwise", exact));

    let mut round = true;
    for s in [2, 3] {
        let y = Tensor::randn(&[2, 6, 12, 5], 1.0, &mut rng);
        let merged = crate::projectors::pixel_shuffle_merge(&VisionFeatureMap { data: y.clone(), level: 1 }, s)?;
        round &= spatial::pixel_shuffle_tensor(&merged, s)?.bit_eq(&y);
    }
    suite.push(Check::holds("pixel_shuffle unmerge(merge(x)) is bit-identical", round));

    let (s, d) = (3, 4);
    let ldp = Projector::new(ProjectorConfig::new(ProjectorKind::LdpV2, s, d, d, (6, 6)))?;
    let mut store = ParamStore::new();
    ldp.init(&mut store, &mut rng);
    store.insert("projector.pw1.w", Tensor::identity(d));
    store.insert("projector.pw1.b", Tensor::zeros(&[d]));
    store.insert("projector.pw2.w", Tensor::zeros(&[d, d]));
    store.insert("projector.pw2.b", Tensor::zeros(&[d]));
    store.insert("projector.pw3.w", Tensor::identity(d));
    store.insert("projector.pw3.b", Tensor::zeros(&[d]));
    store.insert("projector.dw.w", Tensor::full(&[s * s, d], 1.0 / (s * s) as f64));
    store.insert("projector.dw.b", Tensor::zeros(&[d]));
    let f = Tensor::randn(&[2, 6, 6, d], 1.0, &mut rng);
    let out = ldp.apply(&store, &f)?;
    let want = spatial::avg_pool_tensor(&f, s)?.reshape(&[2, 4, d])?;
    suite.push(Check::at_most("ldp_v2 specialisation vs avg_pool", out.max_abs_diff(&want), 1e-12));

    let mut law = true;
    for kind in ProjectorKind::COMPRESSING {
        for s in [2, 3, 4] {
            let p = Projector::new(ProjectorConfig::new(kind, s, 4, 8, (12, 12)))?;
            let mut st = ParamStore::new();
            p.init(&mut st, &mut rng);
            let out = p.apply(&st, &Tensor::randn(&[1, 12, 12, 4], 1.0, &mut rng))?;
            law &= out.shape() == [1, 144 / (s * s), 8] && p.cfg.num_tokens() == 144 / (s * s);
        }
    }
    suite.push(Check::holds("token count (W*H)/s^2 for all four projectors at s=2,3,4", law));
    let tokens = ProjectorConfig::new(ProjectorKind::AvgPool, 3, 4, 8, (24, 24)).num_tokens();
    suite.push(Check::equal_u64("tokens for a 24x24 grid at s=3", tokens as u64, 64));
    Ok(suite)
}

/// Largest logit change at positions before a perturbed response token.
fn future_leak(toy: &Toy, seed: u64) -> Result<(f64, f64)> {
    let (nt, nr) = (3, 5);
    let text = toy.text(2, nt + nr, seed);
    let opts = ForwardOptions::default();
    let base = toy.logits(&text, nr, &opts)?;
    let nv = toy.vision.dim(1);
    let mut leak = 0.0f64;
    let mut moved = f64::INFINITY;
    for j in 0..nr {
        let mut t = text.clone();
        for row in &mut t {
            row[nt + j] = (row[nt + j] + 1 + j) % TOY_VOCAB;
        }
        let pert = toy.logits(&t, nr, &opts)?;
        let pos = nv + nt + j;
        let before = ops::slice(&base, 1, 0, pos)?;
        let before_p = ops::slice(&pert, 1, 0, pos)?;
        leak = leak.max(before.max_abs_diff(&before_p));
        let at = ops::slice(&base, 1, pos, pos + 1)?;
        let at_p = ops::slice(&pert, 1, pos, pos + 1)?;
        moved = moved.min(at.max_abs_diff(&at_p));
    }
    Ok((leak, moved))
}

/// Response-span perturbations must not reach earlier logits; cached and
/// uncached greedy decoding must agree.
pub fn causality_and_cache(cache_seeds: u64, steps: usize) -> Result<Suite> {
    let mut suite = Suite::new("causality_and_cache");
    for (label, vr) in [
        ("without blocks", None),
        (
            "with blocks at {1,4}",
            Some(toy_vr(vec![1, 4], Interaction::Local, BlockOrder::SelfThenCross)),
        ),
    ] {
        let toy = Toy::new(toy_decoder(6, vr), 4, 2, 11)?;
        let (leak, moved) = future_leak(&toy, 12)?;
        suite.push(Check::at_most(format!("future leakage {label}"), leak, 1e-12));
        suite.push(Check::above(format!("perturbed position responds {label}"), moved, 1e-6));
    }
    let mut worst = 0.0f64;
    let mut same_ids = true;
    for seed in 0..cache_seeds {
        let vr = toy_vr(vec![1, 4], Interaction::Local, BlockOrder::SelfThenCross);
        let toy = Toy::new(toy_decoder(6, Some(vr)), 4, 2, 100 + seed)?;
        let prompt = toy.text(2, 3, seed);
        let run = |cached| {
            greedy_decode(
                &toy.dec,
                &toy.store,
                Some(&toy.vision),
                &prompt,
                toy.feats_if_needed(),
                steps,
                cached,
            )
        };
        let (a, b) = (run(true)?, run(false)?);
        same_ids &= a.ids == b.ids;
        for (x, y) in a.step_logits.iter().zip(&b.step_logits) {
            worst = worst.max(x.max_abs_diff(y));
        }
    }
    suite.push(Check::at_most(
        format!("cached vs uncached logits over {steps} steps, {cache_seeds} seeds"),
        worst,
        1e-8,
    ));
    suite.push(Check::holds("cached and uncached decode pick the same tokens", same_ids));
    Ok(suite)
}

/// Inside one block: vision tokens see later tokens and the text guide,
/// and every non-vision row passes through untouched.
pub fn bidirectionality(seed: u64) -> Result<Suite> {
    let mut suite = Suite::new("bidirectionality");
    let mut rng = RngState::new(seed).split("bidirectional");
    for order in [BlockOrder::SelfThenCross, BlockOrder::CrossThenSelf] {
        let block = VisionRememberBlock::new(toy_vr(vec![1], Interaction::Local, order), 1);
        let mut store = ParamStore::new();
        block.init(&mut store, &mut rng);
        randomize(&mut store, "vr.", 0.5, &mut rng);
        let (nv, nt, nr) = (4, 3, 2);
        let layout = SequenceLayout::new(nv, nt, nr);
        let hidden = Tensor::randn(&[1, nv + nt + nr, TOY_WIDTH], 1.0, &mut rng);
        let feats = Tensor::randn(&[1, TOY_GRID, TOY_GRID, TOY_LEVELS * TOY_DV], 1.0, &mut rng);
        let run = |h: &Tensor| -> Result<Tensor> {
            let mut g = Graph::inference(&store);
            let hv = g.constant(h.clone());
            let f = g.constant(feats.clone());
            let out = block.forward(&mut g, hv, &layout, f)?;
            Ok(g.value(out).clone())
        };
        let base = run(&hidden)?;
        let first = |t: &Tensor| ops::slice(t, 1, 0, 1);

        // random directions: a uniform shift would vanish under layer norm
        let mut later = hidden.clone();
        for c in 0..TOY_WIDTH {
            let v = later.at(&[0, nv - 1, c]);
            later.set(&[0, nv - 1, c], v + 0.5 * rng.normal());
        }
        let d_later = first(&run(&later)?)?.max_abs_diff(&first(&base)?);

        let mut guided = hidden.clone();
        for c in 0..TOY_WIDTH {
            // lift one text row above the others so it becomes the guide
            guided.set(&[0, nv + 1, c], 5.0 + rng.normal());
        }
        let d_guide = first(&run(&guided)?)?.max_abs_diff(&first(&base)?);

        let tail = |t: &Tensor| ops::slice(t, 1, nv, nv + nt + nr);
        let untouched = tail(&base)?.bit_eq(&tail(&hidden)?);

        let tag = match order {
            BlockOrder::SelfThenCross => "self-then-cross",
            BlockOrder::CrossThenSelf => "cross-then-self",
        };
        suite.push(Check::above(format!("first vision token responds to last ({tag})"), d_later, 1e-6));
        suite.push(Check::above(format!("first vision token responds to guide ({tag})"), d_guide, 1e-6));
        suite.push(Check::holds(format!("text and response rows bit-unchanged ({tag})"), untouched));
    }
    Ok(suite)
}

/// Counter against closed form: prefill, first decode step, block overhead
/// and KV bytes on four configurations, plus the two derived ratios.
pub fn flop_accounting() -> Result<Suite> {
    let mut suite = Suite::new("flop_accounting");
    let configs: [(&str, Option<VisionRememberConfig>, Option<PruneSchedule>); 4] = [
        ("plain", None, None),
        (
            "blocks {1,4} local",
            Some(toy_vr(vec![1, 4], Interaction::Local, BlockOrder::SelfThenCross)),
            None,
        ),
        (
            "block {2} global",
            Some(toy_vr(vec![2], Interaction::Global, BlockOrder::CrossThenSelf)),
            None,
        ),
        ("fastv", None, Some(PruneSchedule::Fastv { layer: 2, keep: 3 })),
    ];
    for (label, vr, prune) in configs {
        let n_vision = if prune.is_some() { 8 } else { 4 };
        let toy = Toy::new(toy_decoder(6, vr), n_vision, 1, 21)?;
        let (nv, nt) = (toy.vision.dim(1), 5);
        let text = toy.text(1, nt, 22);
        let plan = prune.as_ref().map(|p| p.plan(nv, 6)).transpose()?;
        let want = CostReport::analytic(&toy.dec.cfg, nv, nt, (TOY_GRID, TOY_GRID), plan.as_ref(), 8)?;

        let mut g = Graph::inference(&toy.store);
        let v = g.constant(toy.vision.clone());
        let f = toy.feats_if_needed().map(|t| g.constant(t.clone()));
        let (x, layout) = toy.dec.embed(&mut g, Some(v), &text, 0)?;
        let opts = ForwardOptions {
            prune: plan.as_ref(),
            ..ForwardOptions::default()
        };
        let mut cache = KVCache::default();
        let fwd = toy.dec.forward(&mut g, x, layout, f, &opts, Some(&mut cache))?;
        suite.push(Check::holds(
            format!("tokens per layer ({label})"),
            fwd.tokens_per_layer == want.tokens_per_layer,
        ));
        suite.push(Check::equal_u64(
            format!("prefill ({label})"),
            g.flops().get(crate::decoder::SCOPE_LAYERS),
            want.prefill_flops,
        ));
        suite.push(Check::equal_u64(
            format!("block overhead ({label})"),
            g.flops().get(vision_remember::SCOPE),
            want.vr_overhead_flops,
        ));
        suite.push(Check::equal_u64(
            format!("kv bytes ({label})"),
            (cache.elements() * 8) as u64,
            want.kv_cache_bytes,
        ));
        let mut g = Graph::inference(&toy.store);
        toy.dec.decode_step_on(&mut g, &mut cache, &[1])?;
        suite.push(Check::equal_u64(
            format!("decode step ({label})"),
            g.flops().get(crate::decoder::SCOPE_LAYERS),
            want.decode_flops_per_token,
        ));
    }

    let mut vr = VisionRememberConfig::default();
    let local = cost::vr_block_macs(&vr, 24, 24)?.scores;
    vr.interaction = Interaction::Global;
    let global = cost::vr_block_macs(&vr, 24, 24)?.scores;
    suite.push(Check::holds("local/global score cost at 24x24, s=3 is 1/64", 64 * local == global));

    let d = DecoderConfig::default();
    let ratio = cost::prefill_attention_flops(&d, 576, 32) as f64 / cost::prefill_attention_flops(&d, 64, 32) as f64;
    let want = (608.0f64 / 96.0) * (608.0 / 96.0);
    suite.push(Check::at_most(
        "attention score ratio 576 vs 64 vision tokens, relative error to (608/96)^2",
        (ratio - want).abs() / want,
        1e-12,
    ));
    Ok(suite)
}

/// Parameters exist and receive gradient exactly at the configured layers,
/// and a block changes hidden states only from its own layer on.
pub fn insertion_locality(insertions: &[Vec<usize>], num_layers: usize) -> Result<Suite> {
    let mut suite = Suite::new("insertion_locality");
    for layers in insertions {
        let vr = toy_vr(layers.clone(), Interaction::Local, BlockOrder::SelfThenCross);
        let toy = Toy::new(toy_decoder(num_layers, Some(vr)), 4, 1, 31)?;
        let text = toy.text(1, 4, 32);

        let owners: Vec<usize> = {
            let mut v: Vec<usize> = toy
                .store
                .names()
                .filter_map(|n| n.strip_prefix("vr.")?.split('.').next()?.parse().ok())
                .collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        suite.push(Check::holds(format!("block parameters only at {layers:?}"), &owners == layers));

        let grads = {
            let mut g = Graph::with_params(&toy.store);
            let v = g.constant(toy.vision.clone());
            let f = g.constant(toy.feats.clone());
            let (x, layout) = toy.dec.embed(&mut g, Some(v), &text, 1)?;
            let fwd = toy.dec.forward(&mut g, x, layout, Some(f), &ForwardOptions::default(), None)?;
            let s = g.shape(fwd.logits).to_vec();
            let last = g.slice(fwd.logits, 1, s[1] - 2, s[1] - 1)?;
            let last = g.reshape(last, &[1, TOY_VOCAB])?;
            let loss = g.cross_entropy(last, &[text[0][3]])?;
            g.backward(loss).params(&g)
        };
        let mut every_block_learns = true;
        for &l in layers {
            let norm: f64 = grads
                .iter()
                .filter(|(n, _)| n.starts_with(&format!("vr.{l}.")))
                .map(|(_, t)| t.max_abs())
                .fold(0.0, f64::max);
            every_block_learns &= norm > 0.0;
        }
        suite.push(Check::holds(format!("every block at {layers:?} receives gradient"), every_block_learns));

        let hidden = |store: &ParamStore| -> Result<Vec<Tensor>> {
            let mut g = Graph::inference(store);
            let opts = ForwardOptions {
                keep_hidden: true,
                ..ForwardOptions::default()
            };
            Ok(toy.prefill(&mut g, &text, 1, &opts)?.layer_hidden)
        };
        let base = hidden(&toy.store)?;
        let mut local = true;
        for &l in layers {
            let mut nudged = toy.store.clone();
            let name = format!("vr.{l}.proj.b");
            let b = nudged.get(&name).expect("block bias").map(|v| v + 0.25);
            nudged.insert(name, b);
            let h = hidden(&nudged)?;
            for k in 1..=num_layers {
                let same = h[k - 1].bit_eq(&base[k - 1]);
                local &= if k < l { same } else { !same };
            }
        }
        suite.push(Check::holds(format!("blocks at {layers:?} act only from their own layer on"), local));
    }
    Ok(suite)
}

/// Keep-all identity, nested pyramid keep sets, the norm-ranking oracle and
/// per-layer token counts in the cost report.
pub fn pruning_baselines(seed: u64) -> Result<Suite> {
    let mut suite = Suite::new("pruning_baselines");
    let toy = Toy::new(toy_decoder(6, None), 16, 2, seed)?;
    let text = toy.text(2, 4, seed + 1);
    let nv = toy.vision.dim(1);
    let base = toy.logits(&text, 0, &ForwardOptions::default())?;
    let mut worst = 0.0f64;
    for sched in [
        PruneSchedule::Fastv { layer: 2, keep: nv },
        PruneSchedule::PyramidDrop {
            stage_ends: vec![1, 3],
            ratios: vec![1.0, 1.0],
        },
    ] {
        let plan = sched.plan(nv, 6)?;
        let opts = ForwardOptions {
            prune: Some(&plan),
            ..ForwardOptions::default()
        };
        worst = worst.max(toy.logits(&text, 0, &opts)?.max_abs_diff(&base));
    }
    suite.push(Check::at_most("keep-all pruning leaves logits unchanged", worst, 1e-12));

    let ratios = [0.5, 0.5, 0.5];
    let ends = [1, 2, 4];
    let mut nested = true;
    let mut counts_ok = true;
    let mut previous: Option<Vec<Vec<usize>>> = None;
    for t in 1..=ends.len() {
        let sched = PruneSchedule::PyramidDrop {
            stage_ends: ends[..t].to_vec(),
            ratios: ratios[..t].to_vec(),
        };
        let plan = sched.plan(nv, 6)?;
        let mut g = Graph::inference(&toy.store);
        let opts = ForwardOptions {
            prune: Some(&plan),
            ..ForwardOptions::default()
        };
        let kept = toy.prefill(&mut g, &text, 0, &opts)?.kept.unwrap_or_default();
        let want = pruning::pyramid_keep_counts(nv, &ratios[..t])?;
        counts_ok &= kept.iter().all(|k| Some(&k.len()) == want.last());
        if let Some(prev) = &previous {
            nested &= kept.iter().zip(prev).all(|(k, p)| k.iter().all(|i| p.contains(i)));
        }
        previous = Some(kept);
    }
    suite.push(Check::holds("pyramid keep sets are nested across stages", nested));
    suite.push(Check::holds("pyramid keep counts are ceil(n * prod ratios)", counts_ok));

    let mut rng = RngState::new(seed).split("encoder-prune");
    let feats = Tensor::randn(&[2, 4, 4, 3], 1.0, &mut rng);
    let keep = 5;
    let (kept, picks) = pruning::encoder_prune(&feats, keep)?;
    let flat = feats.reshape(&[2, 16, 3])?;
    let mut oracle = true;
    for (b, p) in picks.iter().enumerate() {
        let mut by_norm: Vec<(f64, usize)> = (0..16)
            .map(|i| {
                let n: f64 = (0..3).map(|c| flat.at(&[b, i, c]) * flat.at(&[b, i, c])).sum();
                (n, i)
            })
            .collect();
        by_norm.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut want: Vec<usize> = by_norm[..keep].iter().map(|&(_, i)| i).collect();
        want.sort_unstable();
        oracle &= *p == want;
        for (r, &i) in p.iter().enumerate() {
            for c in 0..3 {
                oracle &= kept.at(&[b, r, c]).to_bits() == flat.at(&[b, i, c]).to_bits();
            }
        }
    }
    suite.push(Check::holds("encoder_prune keeps the largest-norm tokens in order", oracle));

    let cfg = DecoderConfig::default();
    let plan = PruneSchedule::Fastv { layer: 2, keep: 16 }.plan(64, cfg.num_layers)?;
    let pruned = CostReport::analytic(&cfg, 64, 8, (24, 24), Some(&plan), 2)?;
    let full = CostReport::analytic(&cfg, 64, 8, (24, 24), None, 2)?;
    let reduced = pruned.tokens_per_layer[..2] == [72, 72]
        && pruned.tokens_per_layer[2..].iter().all(|&t| t == 24)
        && pruned.prefill_flops < full.prefill_flops
        && pruned.kv_cache_bytes < full.kv_cache_bytes;
    suite.push(Check::holds("cost report reflects reduced per-layer token counts", reduced));
    Ok(suite)
}

/// Every suite at its acceptance size.
pub fn all(inject_fault: bool) -> Result<Vec<Suite>> {
    Ok(vec![
        local_global_equivalence(20, 1)?,
        gradients(10, inject_fault)?,
        projector_oracles(3)?,
        causality_and_cache(20, 20)?,
        bidirectionality(4)?,
        flop_accounting()?,
        insertion_locality(&[vec![1], vec![1, 4], vec![1, 4, 7]], 8)?,
        pruning_baselines(5)?,
    ])
}
