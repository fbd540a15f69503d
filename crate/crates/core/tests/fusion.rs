mod common;

#[test]
fn fusion_examples_and_shift_invariance() {
    common::check_fusion().assert();
}
