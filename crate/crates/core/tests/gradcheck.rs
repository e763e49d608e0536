mod common;

use common::{detection_loss_gradcheck_case, detector_gradcheck_case, lm_gradcheck_case};

const TOL: f64 = 1e-4;

#[test]
fn language_model_gradients_match_finite_differences() {
    for seed in 0..3 {
        let err = lm_gradcheck_case(seed, 6);
        assert!(err < TOL, "seed {seed}: {err:e}");
    }
}

#[test]
fn detector_gradients_match_finite_differences() {
    for seed in 0..5 {
        let err = detector_gradcheck_case(seed, 10);
        assert!(err < TOL, "seed {seed}: {err:e}");
    }
}

#[test]
fn detection_loss_gradients_match_finite_differences() {
    for seed in 0..5 {
        let err = detection_loss_gradcheck_case(seed);
        assert!(err < TOL, "seed {seed}: {err:e}");
    }
}
