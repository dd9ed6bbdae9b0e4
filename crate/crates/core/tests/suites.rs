use vrlab_core::checks::{self, Suite};

fn assert_green(suite: Suite) {
    let bad: Vec<_> = suite.failures().collect();
    assert!(suite.passed(), "{}: {bad:#?}", suite.name);
}

#[test]
fn local_and_masked_global_agree() {
    assert_green(checks::local_global_equivalence(20, 1).unwrap());
}

#[test]
fn adjoints_match_finite_differences() {
    assert_green(checks::gradients(3, false).unwrap());
}

#[test]
fn wrong_adjoint_fails_the_gradient_suite() {
    let suite = checks::gradients(1, true).unwrap();
    let bad: Vec<&str> = suite.failures().map(|c| c.name.as_str()).collect();
    assert_eq!(bad, ["gelu_with_wrong_adjoint"]);
}

#[test]
fn projector_oracles_hold() {
    assert_green(checks::projector_oracles(3).unwrap());
}

#[test]
fn decoder_is_causal_and_cache_is_exact() {
    assert_green(checks::causality_and_cache(4, 20).unwrap());
}

#[test]
fn block_mixes_vision_bidirectionally() {
    assert_green(checks::bidirectionality(4).unwrap());
}

#[test]
fn flop_counter_matches_closed_form() {
    assert_green(checks::flop_accounting().unwrap());
}

#[test]
fn blocks_sit_exactly_at_configured_layers() {
    assert_green(checks::insertion_locality(&[vec![1], vec![2, 3]], 4).unwrap());
}

#[test]
fn pruning_baselines_hold() {
    assert_green(checks::pruning_baselines(5).unwrap());
}
