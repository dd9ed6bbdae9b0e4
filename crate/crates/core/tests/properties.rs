use proptest::prelude::*;

use vrlab_core::cost::{self, tokens_per_layer};
use vrlab_core::decoder::{DecoderConfig, SequenceLayout};
use vrlab_core::params::ParamStore;
use vrlab_core::projectors::{Projector, ProjectorConfig, ProjectorKind};
use vrlab_core::pruning::{self, PruneSchedule};
use vrlab_core::spatial;
use vrlab_core::task::SyntheticTask;
use vrlab_core::vision_remember::{Interaction, VisionRememberBlock, VisionRememberConfig};
use vrlab_core::{checks, Graph, RngState, Tensor};

fn compressing() -> impl Strategy<Value = ProjectorKind> {
    prop::sample::select(ProjectorKind::COMPRESSING.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn token_count_law(kind in compressing(), s in 1usize..=4, wm in 1usize..=3, hm in 1usize..=3, seed in 0u64..1000) {
        let (w, h) = (s * wm, s * hm);
        let p = Projector::new(ProjectorConfig::new(kind, s, 4, 8, (w, h))).unwrap();
        let mut store = ParamStore::new();
        let mut rng = RngState::new(seed);
        p.init(&mut store, &mut rng);
        let out = p.apply(&store, &Tensor::randn(&[1, w, h, 4], 1.0, &mut rng)).unwrap();
        prop_assert_eq!(out.shape(), &[1, w * h / (s * s), 8]);
        prop_assert_eq!(p.cfg.compression_ratio(), 1.0 / (s * s) as f64);
    }

    #[test]
    fn spatial_rearrangements_round_trip(s in 1usize..=3, wm in 1usize..=3, hm in 1usize..=3, c in 1usize..=3, seed in 0u64..1000) {
        let x = Tensor::randn(&[2, s * wm, s * hm, c], 1.0, &mut RngState::new(seed));
        let merged = spatial::pixel_unshuffle_tensor(&x, s).unwrap();
        prop_assert!(spatial::pixel_shuffle_tensor(&merged, s).unwrap().bit_eq(&x));
        let win = spatial::window_partition_tensor(&x, s).unwrap();
        prop_assert!(spatial::window_unpartition_tensor(&win, 2, s * wm, s * hm, s).unwrap().bit_eq(&x));
    }

    #[test]
    fn local_equals_masked_global(s in 2usize..=3, wm in 1usize..=3, levels in 1usize..=3, heads in prop::sample::select(vec![1usize, 2, 4]), seed in 0u64..1000) {
        let w = s * wm;
        let cfg = VisionRememberConfig {
            insertion_layers: vec![1],
            feature_levels: (1..=levels).collect(),
            downsample: s,
            d_model: 8,
            d_vision: 4,
            heads,
            ..VisionRememberConfig::default()
        };
        let block = VisionRememberBlock::new(cfg, 1);
        let mut rng = RngState::new(seed);
        let mut store = ParamStore::new();
        block.init(&mut store, &mut rng);
        checks::randomize(&mut store, "vr.", 0.5, &mut rng);
        let tokens = Tensor::randn(&[1, wm * wm, 8], 1.0, &mut rng);
        let feats = Tensor::randn(&[1, w, w, 4 * levels], 1.0, &mut rng);
        let mask = spatial::block_diagonal_mask(w, w, s).unwrap();
        let run = |inter, m: Option<&Tensor>| {
            let mut g = Graph::inference(&store);
            let t = g.constant(tokens.clone());
            let f = g.constant(feats.clone());
            let out = block.cross_attention_core(&mut g, t, f, inter, m).unwrap();
            g.value(out).clone()
        };
        let d = run(Interaction::Local, None).max_abs_diff(&run(Interaction::Global, Some(&mask)));
        prop_assert!(d <= 1e-10, "{}", d);
    }

    #[test]
    fn pyramid_counts_shrink_and_match_the_product(n in 1usize..200, ratios in prop::collection::vec(0.1f64..=1.0, 1..4)) {
        let counts = pruning::pyramid_keep_counts(n, &ratios).unwrap();
        let mut frac = 1.0;
        let mut prev = n;
        for (k, r) in counts.iter().zip(&ratios) {
            frac *= r;
            prop_assert!(*k <= prev && *k >= 1);
            prop_assert!((*k as f64) + 1e-9 >= n as f64 * frac);
            prop_assert!((*k as f64) < n as f64 * frac + 1.0);
            prev = *k;
        }
    }

    #[test]
    fn attention_selection_is_sorted_and_sized(nv in 1usize..10, nt in 1usize..4, keep_frac in 0.0f64..1.0, seed in 0u64..1000) {
        let keep = 1 + ((nv - 1) as f64 * keep_frac) as usize;
        let layout = SequenceLayout::new(nv, nt, 0);
        let s = nv + nt;
        let w = Tensor::rand_uniform(&[2, 2, s, s], 0.0, 1.0, &mut RngState::new(seed));
        let picks = pruning::select_by_attention(&w, &layout, keep).unwrap();
        for p in &picks {
            prop_assert_eq!(p.len(), keep);
            prop_assert!(p.windows(2).all(|x| x[0] < x[1]));
            prop_assert!(p.iter().all(|&i| i < nv));
        }
    }

    #[test]
    fn encoder_prune_keeps_largest_norms(n in 2usize..12, keep_frac in 0.0f64..1.0, seed in 0u64..1000) {
        let keep = 1 + ((n - 1) as f64 * keep_frac) as usize;
        let x = Tensor::randn(&[1, n, 3], 1.0, &mut RngState::new(seed));
        let (_, picks) = pruning::encoder_prune(&x, keep).unwrap();
        let norm = |i: usize| (0..3).map(|c| x.at(&[0, i, c]).powi(2)).sum::<f64>();
        let weakest_kept = picks[0].iter().map(|&i| norm(i)).fold(f64::INFINITY, f64::min);
        for i in (0..n).filter(|i| !picks[0].contains(i)) {
            prop_assert!(norm(i) <= weakest_kept);
        }
    }

    #[test]
    fn pruned_token_counts_never_increase(nv in 1usize..100, nt in 1usize..20, layer in 1usize..=6, keep_frac in 0.0f64..1.0) {
        let cfg = DecoderConfig::default();
        let keep = 1 + ((nv - 1) as f64 * keep_frac) as usize;
        let plan = PruneSchedule::Fastv { layer, keep }.plan(nv, cfg.num_layers).unwrap();
        let tokens = tokens_per_layer(&cfg, nv, nt, Some(&plan));
        prop_assert!(tokens.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(tokens[0], nv + nt);
        prop_assert!(cost::prefill_flops_layers(&cfg, &tokens) <= cost::prefill_flops(&cfg, nv, nt));
    }

    #[test]
    fn labels_are_balanced(n in 1usize..200, seed in 0u64..1000) {
        let task = SyntheticTask { grid: 3, patch: 2, ..SyntheticTask::default() };
        let d = task.generate(n, seed).unwrap();
        let counts: Vec<usize> = (0..task.alphabet).map(|c| d.labels.iter().filter(|&&l| l == c).count()).collect();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
    }
}
