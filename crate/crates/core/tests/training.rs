use vrlab_core::decoder::DecoderConfig;
use vrlab_core::encoder::EncoderConfig;
use vrlab_core::model::{ModelConfig, VisionLanguageModel};
use vrlab_core::params::AdamConfig;
use vrlab_core::projectors::{ProjectorConfig, ProjectorKind};
use vrlab_core::task::SyntheticTask;
use vrlab_core::train::{fit, TrainConfig};
use vrlab_core::vision_remember::VisionRememberConfig;

fn small(vr: bool) -> (VisionLanguageModel, SyntheticTask) {
    let task = SyntheticTask::default();
    let cfg = ModelConfig {
        encoder: EncoderConfig { depth: 2, ..EncoderConfig::default() },
        projector: ProjectorConfig::new(ProjectorKind::AvgPool, 3, 16, 16, (6, 6)),
        decoder: DecoderConfig {
            num_layers: 2,
            d_model: 16,
            d_ff: 32,
            vocab_size: task.vocab_size(),
            max_seq_len: 16,
            vr: vr.then(|| VisionRememberConfig {
                insertion_layers: vec![1],
                feature_levels: vec![1, 2],
                d_model: 16,
                ..VisionRememberConfig::default()
            }),
            ..DecoderConfig::default()
        },
    };
    (VisionLanguageModel::new(cfg).unwrap(), task)
}

#[test]
fn training_is_bit_deterministic() {
    for vr in [false, true] {
        let (model, task) = small(vr);
        let data = task.generate(24, 3).unwrap();
        let cfg = TrainConfig { steps: 6, batch_size: 8, warmup: 2, ..TrainConfig::default() };
        let run = || {
            let mut p = model.init(1, 2);
            let enc = model.encode(&p.encoder, &data.images).unwrap();
            let losses = fit(&model, &mut p.trainable, &task, &data, &enc, &cfg, 4).unwrap();
            (p, losses)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert!(a.trainable.bit_eq(&b.trainable));
        assert_eq!(la.iter().map(|l| l.to_bits()).collect::<Vec<_>>(), lb.iter().map(|l| l.to_bits()).collect::<Vec<_>>());
        assert!(!a.trainable.bit_eq(&model.init(1, 2).trainable));
    }
}

#[test]
fn zero_learning_rate_leaves_a_flat_curve() {
    let (model, task) = small(true);
    let data = task.generate(16, 5).unwrap();
    let mut p = model.init(1, 2);
    let before = p.trainable.clone();
    let enc = model.encode(&p.encoder, &data.images).unwrap();
    let cfg = TrainConfig {
        steps: 5,
        batch_size: 16,
        adam: AdamConfig { lr: 0.0, ..AdamConfig::default() },
        ..TrainConfig::default()
    };
    let losses = fit(&model, &mut p.trainable, &task, &data, &enc, &cfg, 6).unwrap();
    assert!(p.trainable.bit_eq(&before));
    let spread = losses.iter().cloned().fold(f64::MIN, f64::max) - losses.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread <= 1e-12, "{losses:?}");
}
