use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vrlab::config::ExperimentConfig;
use vrlab::experiments::AccuracyBody;
use vrlab::report::Report;
use vrlab_core::cost::CostReport;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn vrlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vrlab")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small enough to train in a couple of seconds.
const TINY: &str = r#"
name = "tiny"
seeds = [3]

[encoder]
depth = 2

[decoder]
num_layers = 2
d_model = 16
d_ff = 32

[vr]
insertion_layers = [1]
feature_levels = [1, 2]

[train]
steps = 6
batch_size = 16
warmup = 2
n_train = 16
n_test = 24
"#;

fn tiny(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn unknown_field_is_a_config_error_with_its_path() {
    let cfg = configs().join("recall.toml");
    let o = vrlab(&["cost", "--config", cfg.to_str().unwrap(), "--set", "train.lrr=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.lrr"), "{}", stderr(&o));
}

#[test]
fn cross_field_violations_name_the_field() {
    let cfg = configs().join("recall.toml");
    for (set, path) in [
        ("vr.downsample=2", "vr.downsample"),
        ("decoder.num_layers=3", "vr.insertion_layers"),
        ("vr.feature_levels=[1, 5]", "vr.feature_levels"),
        ("probe.cell=[9, 0]", "probe.cell"),
        ("decoder.d_model=30", "decoder"),
    ] {
        let o = vrlab(&["cost", "--config", cfg.to_str().unwrap(), "--set", set]);
        assert_eq!(o.status.code(), Some(2), "{set}");
        assert!(stderr(&o).contains(path), "{set}: {}", stderr(&o));
    }
}

#[test]
fn wrongly_typed_value_reports_the_path() {
    let cfg = configs().join("recall.toml");
    let o = vrlab(&["cost", "--config", cfg.to_str().unwrap(), "--set", "decoder.num_layers=six"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("decoder.num_layers"), "{}", stderr(&o));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let o = vrlab(&["cost", "--config", "/nonexistent/x.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn cost_counts_sixty_four_tokens_at_s3_on_a_24_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("recall.toml");
    let o = vrlab(&[
        "cost",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "task.grid=24",
        "--set",
        "decoder.max_seq_len=160",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: Report<CostReport> = Report::read(&dir.path().join("cost_report.json")).unwrap();
    assert_eq!(r.body.vision_token_count, 64);
    assert_eq!(r.config.task.grid, 24);
    assert_eq!(r.kind, "cost");
}

#[test]
fn removing_the_block_section_disables_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("recall.toml");
    let o = vrlab(&["cost", "--config", cfg.to_str().unwrap(), "--set", "vr=none", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: Report<CostReport> = Report::read(&dir.path().join("cost_report.json")).unwrap();
    assert!(r.config.vr.is_none());
    assert_eq!(r.body.vr_overhead_flops, 0);
}

#[test]
fn pruned_cost_report_shrinks_later_layers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("fastv.toml");
    let o = vrlab(&["cost", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: Report<CostReport> = Report::read(&dir.path().join("cost_report.json")).unwrap();
    assert_eq!(r.body.tokens_per_layer, [39, 39, 12, 12, 12, 12]);
}

#[test]
fn verify_passes_and_lists_every_suite() {
    let dir = tempfile::tempdir().unwrap();
    let o = vrlab(&["verify", "--out", dir.path().to_str().unwrap()]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{out}");
    for suite in [
        "local_global_equivalence",
        "gradients",
        "projector_oracles",
        "causality_and_cache",
        "bidirectionality",
        "flop_accounting",
        "insertion_locality",
        "pruning_baselines",
    ] {
        assert!(out.contains(&format!("PASS {suite}")), "{suite}: {out}");
    }
    assert!(dir.path().join("verify_report.json").exists());
}

#[test]
fn verify_with_a_wrong_adjoint_fails() {
    let o = vrlab(&["verify", "--inject-fault"]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(1));
    assert!(out.contains("FAIL gradients"), "{out}");
    assert!(out.contains("gelu_with_wrong_adjoint"), "{out}");
}

#[test]
fn train_then_eval_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out = dir.path().join("run");
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    let t = vrlab(&["train", "--config", c, "--out", o]);
    assert!(t.status.success(), "{}", stderr(&t));
    assert!(out.join("seed_3.ckpt").exists());

    let e1 = vrlab(&["eval", "--config", c, "--out", o]);
    assert!(e1.status.success(), "{}", stderr(&e1));
    let first = std::fs::read(out.join("eval_report.json")).unwrap();
    let e2 = vrlab(&["eval", "--config", c, "--out", o, "--checkpoint", out.join("seed_3.ckpt").to_str().unwrap()]);
    assert!(e2.status.success(), "{}", stderr(&e2));
    let second = std::fs::read(out.join("eval_report.json")).unwrap();
    assert_eq!(first, second);

    let train: Report<AccuracyBody> = Report::read(&out.join("train_report.json")).unwrap();
    let eval: Report<AccuracyBody> = Report::read(&out.join("eval_report.json")).unwrap();
    assert_eq!(train.body.runs[0].losses.len(), 6);
    assert_eq!(train.body.runs[0].test_accuracy, eval.body.runs[0].test_accuracy);
}

#[test]
fn reports_regenerate_their_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out = dir.path().join("run");
    let t = vrlab(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--set", "seeds=[1, 2]"]);
    assert!(t.status.success(), "{}", stderr(&t));
    let text = std::fs::read_to_string(out.join("train_report.json")).unwrap();
    let r: Report<AccuracyBody> = Report::from_json(&text).unwrap();
    assert_eq!(AccuracyBody::new(r.body.runs.clone()), r.body);
    assert_eq!(r.to_json(), text);
    let echoed: ExperimentConfig = r.config.clone();
    echoed.validate().unwrap();
    assert_eq!(echoed.seeds, [1, 2]);
}

#[test]
fn zero_learning_rate_gives_a_flat_curve() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out = dir.path().join("run");
    let t = vrlab(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--set", "train.lr=0"]);
    assert!(t.status.success(), "{}", stderr(&t));
    let r: Report<AccuracyBody> = Report::read(&out.join("train_report.json")).unwrap();
    let l = &r.body.runs[0].losses;
    let spread = l.iter().cloned().fold(f64::MIN, f64::max) - l.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread <= 1e-12, "{l:?}");
}

#[test]
fn incompatible_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out = dir.path().join("run");
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    assert!(vrlab(&["train", "--config", c, "--out", o]).status.success());
    let e = vrlab(&["eval", "--config", c, "--out", o, "--set", "decoder.d_ff=48"]);
    assert_eq!(e.status.code(), Some(1));
    assert!(stderr(&e).contains("decoder.d_ff"), "{}", stderr(&e));
    let e = vrlab(&["eval", "--config", c, "--out", o, "--set", "encoder_seed=5"]);
    assert_eq!(e.status.code(), Some(1));
    assert!(stderr(&e).contains("encoder_seed"), "{}", stderr(&e));
}

#[test]
fn probe_with_one_stage_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out = dir.path().join("probe");
    let o = vrlab(&[
        "probe",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--set",
        "probe.stages=[\"post_projector\"]",
        "--set",
        "probe.n_train=64",
        "--set",
        "probe.n_test=32",
        "--set",
        "probe.max_steps=50",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: Report<vrlab::experiments::ProbeBody> = Report::read(&out.join("probe_report.json")).unwrap();
    assert_eq!(r.body.table.rows.len(), 1);
    assert!(r.body.table.compression_gap.is_none());
    assert!(!r.body.trained);
}

#[test]
fn probe_against_a_baseline_reports_gains() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let (with, without) = (dir.path().join("with"), dir.path().join("without"));
    let c = cfg.to_str().unwrap();
    assert!(vrlab(&["train", "--config", c, "--out", with.to_str().unwrap()]).status.success());
    assert!(vrlab(&["train", "--config", c, "--out", without.to_str().unwrap(), "--set", "vr=none"]).status.success());
    let out = dir.path().join("probe");
    let o = vrlab(&[
        "probe",
        "--config",
        c,
        "--out",
        out.to_str().unwrap(),
        "--checkpoint",
        with.join("seed_3.ckpt").to_str().unwrap(),
        "--baseline",
        without.join("seed_3.ckpt").to_str().unwrap(),
        "--set",
        "probe.stages=[\"decoder_layer_1\", \"decoder_layer_2\"]",
        "--set",
        "probe.n_train=64",
        "--set",
        "probe.n_test=32",
        "--set",
        "probe.max_steps=50",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: Report<vrlab::experiments::ProbeBody> = Report::read(&out.join("probe_report.json")).unwrap();
    assert!(r.body.trained);
    assert_eq!(r.body.remember_gains.len(), 2);
    assert!(r.body.baseline.is_some());
}
