use vrlab::checkpoint::{Checkpoint, CheckpointError};
use vrlab::config::{self, apply_override, ExperimentConfig};
use vrlab_core::model::VisionLanguageModel;

fn checkpoint() -> Checkpoint {
    let cfg = ExperimentConfig::default();
    let model = VisionLanguageModel::new(cfg.model_config()).unwrap();
    let mut params = model.init(cfg.encoder_seed, 9);
    // exercise values a text format would lose
    let t = params.trainable.get_mut("head.b").unwrap();
    t.data_mut()[0] = f64::MIN_POSITIVE / 3.0;
    t.data_mut()[1] = -0.0;
    t.data_mut()[2] = 0.1 + 0.2;
    Checkpoint {
        seed: 9,
        encoder_seed: cfg.encoder_seed,
        model: cfg.model_config(),
        params,
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let c = checkpoint();
    let bytes = c.to_bytes();
    let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
    assert!(back.params.trainable.bit_eq(&c.params.trainable));
    assert!(back.params.encoder.bit_eq(&c.params.encoder));
    assert_eq!(back.model, c.model);
    assert_eq!(back.to_bytes(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a/b.ckpt");
    c.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap().to_bytes(), bytes);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let bytes = checkpoint().to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::read_from(&mut bad.as_slice()), Err(CheckpointError::Format(_))));
    let short = &bytes[..bytes.len() - 3];
    assert!(Checkpoint::read_from(&mut &short[..]).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Checkpoint::read_from(&mut long.as_slice()), Err(CheckpointError::Format(_))));
}

#[test]
fn compatibility_names_the_differing_field() {
    let c = checkpoint();
    let mut other = ExperimentConfig::default();
    c.ensure_compatible(&other.model_config(), other.encoder_seed).unwrap();
    other.decoder.num_layers = 5;
    let e = c.ensure_compatible(&other.model_config(), other.encoder_seed).unwrap_err();
    assert!(e.to_string().contains("decoder.num_layers"), "{e}");
}

#[test]
fn overrides_parse_toml_values_and_remove_keys() {
    let mut t: toml::Table = toml::from_str("[train]\nlr = 0.1\n[vr]\nheads = 2\n").unwrap();
    apply_override(&mut t, "train.lr=0").unwrap();
    apply_override(&mut t, "name=plain words").unwrap();
    apply_override(&mut t, "seeds=[4, 5]").unwrap();
    apply_override(&mut t, "vr=none").unwrap();
    assert_eq!(t["train"]["lr"].as_integer(), Some(0));
    assert_eq!(t["name"].as_str(), Some("plain words"));
    assert_eq!(t["seeds"].as_array().unwrap().len(), 2);
    assert!(!t.contains_key("vr"));
    assert!(apply_override(&mut t, "no_equals").is_err());
    assert!(apply_override(&mut t, "train..lr=1").is_err());
    assert_eq!(apply_override(&mut t, "name.x=1").unwrap_err().path, "name");
}

#[test]
fn shipped_configs_are_valid() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = config::load(&path, &[]).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(config::parse(&config::to_toml(&cfg), &[]).unwrap(), cfg);
        n += 1;
    }
    assert!(n >= 3);
}

#[test]
fn blocks_and_pruning_are_exclusive() {
    let e = config::parse("[vr]\n[prune]\nkind = \"fastv\"\nlayer = 2\nkeep = 2\n", &[]).unwrap_err();
    assert_eq!(e.path, "prune");
}

#[test]
fn explicit_block_extents_must_agree() {
    let ok = config::parse("[vr]\ndownsample = 3\nd_model = 32\nd_vision = 16\n", &[]).unwrap();
    assert_eq!(ok.model_config().decoder.vr.unwrap().downsample, 3);
    let e = config::parse("[vr]\nd_vision = 8\n", &[]).unwrap_err();
    assert_eq!(e.path, "vr.d_vision");
}
