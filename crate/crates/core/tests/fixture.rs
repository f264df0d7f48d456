//! The checked-in toy bundle against forward passes recorded by the trainer.

use std::path::PathBuf;

use fastsep::models::{InputTransform, NeuralBundle};
use ndarray::Array2;
use serde::Deserialize;

#[derive(Deserialize)]
struct Case {
    power: Vec<Vec<f64>>,
    class_vector: Vec<f64>,
    posterior: Vec<f64>,
    latent_mean: Vec<Vec<f64>>,
    log_variance: Vec<Vec<f64>>,
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1.0)
}

fn matrix(rows: &[Vec<f64>]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), rows[0].len()), |(i, j)| rows[i][j])
}

#[test]
fn bundle_matches_trainer_forward_passes() {
    let bundle = NeuralBundle::load(fixtures().join("toy.fmvae")).unwrap();
    let cases: Vec<Case> =
        serde_json::from_str(&std::fs::read_to_string(fixtures().join("toy_parity.json")).unwrap()).unwrap();
    assert!(!cases.is_empty());
    for (k, case) in cases.iter().enumerate() {
        let power = matrix(&case.power);
        let frames = power.ncols();

        let posterior = bundle.classify(power.view()).unwrap();
        for (a, b) in posterior.iter().zip(&case.posterior) {
            assert!(rel_err(*a, *b) < 1e-4, "case {k} posterior {a} vs {b}");
        }

        let mean = bundle.encode(power.view(), &case.class_vector).unwrap().mean;
        let want = matrix(&case.latent_mean);
        assert_eq!(mean.dim(), want.dim());
        for (a, b) in mean.iter().zip(want.iter()) {
            assert!(rel_err(f64::from(*a), *b) < 1e-4, "case {k} latent {a} vs {b}");
        }

        let variance = bundle.decode(mean.view(), &case.class_vector, frames).unwrap();
        let want = matrix(&case.log_variance);
        assert_eq!(variance.dim(), want.dim());
        for (a, b) in variance.iter().zip(want.iter()) {
            assert!(rel_err(a.ln(), *b) < 1e-4, "case {k} log-variance {} vs {b}", a.ln());
        }
    }
}

#[test]
fn bundle_manifest() {
    let bundle = NeuralBundle::load(fixtures().join("toy.fmvae")).unwrap();
    assert_eq!(bundle.num_classes, 4);
    assert_eq!(bundle.freq_bins, 2049);
    assert!(matches!(bundle.input, InputTransform::LogPower { .. }));
    let accuracy = bundle.metadata["holdout_accuracy"].as_f64().unwrap();
    assert!(accuracy >= 0.9, "held-out accuracy {accuracy}");
}
