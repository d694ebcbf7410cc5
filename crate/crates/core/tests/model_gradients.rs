//! Gradient fidelity through the composed models: a one-layer encoder
//! and the full bilingual loss, against central finite differences.

use clmrc_core::gradcheck::suite;

#[test]
fn encoder_one_layer_matches_finite_differences() {
    for entry in suite::encoder_one_layer(8, 2).unwrap() {
        assert!(
            entry.report.passed,
            "{}: max relative error {:.3e}",
            entry.name, entry.report.max_relative_error
        );
    }
}

#[test]
fn dual_loss_matches_finite_differences() {
    for entry in suite::dual_model(8, 2).unwrap() {
        assert!(
            entry.report.passed,
            "{}: max relative error {:.3e}",
            entry.name, entry.report.max_relative_error
        );
    }
}

#[test]
fn primitive_suite_is_green() {
    for entry in suite::primitives(2).unwrap() {
        assert!(
            entry.report.passed,
            "{}: max relative error {:.3e}",
            entry.name, entry.report.max_relative_error
        );
    }
}
