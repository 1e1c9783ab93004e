//! Coarse inversion and the encoder plug-in contract.

use dhr::embedding::{coarse_invert, embed, CoarseConfig, FixedEncoder};
use dhr::generator::{GeneratorState, ToyConfig};
use dhr::latent::{LatentCode, LatentSpace};
use dhr::metrics::PyramidOracle;
use dhr::scenario::sample_w;
use dhr::Error;

fn state() -> GeneratorState<f32> {
    GeneratorState::toy(ToyConfig::default()).unwrap()
}

#[test]
fn zero_steps_from_the_mean_latent_has_zero_loss() {
    let s = state();
    let cfg = CoarseConfig {
        steps: 0,
        ..CoarseConfig::default()
    };
    let target = s
        .synthesize(&s.mean_latent(cfg.mean_samples, cfg.seed).unwrap())
        .unwrap();
    let r = coarse_invert(&s, &target, &cfg, &PyramidOracle::default()).unwrap();
    assert_eq!(r.loss_trace.len(), 1);
    assert!(r.loss_trace[0].abs() < 1e-6);
    assert_eq!(r.coarse_image.data(), target.data());
}

#[test]
fn forty_steps_reduce_the_loss() {
    let s = state();
    let target = s.synthesize(&sample_w(&s, 3).unwrap()).unwrap();
    let r = coarse_invert(&s, &target, &CoarseConfig::default(), &PyramidOracle::default()).unwrap();
    assert_eq!(r.loss_trace.len(), 41);
    assert!(r.loss_trace[40] < r.loss_trace[0]);
    assert!(r.loss_trace.iter().cloned().fold(f64::INFINITY, f64::min) <= r.loss_trace[0]);
    assert_eq!(r.coarse_image.data(), s.synthesize(&r.latent).unwrap().data());
    assert_eq!(r.latent.space(), LatentSpace::W);
}

#[test]
fn constant_schedule_traces_are_prefixes() {
    let s = state();
    let target = s.synthesize(&sample_w(&s, 4).unwrap()).unwrap();
    let cfg = |steps| CoarseConfig {
        steps,
        rampdown: 0.0,
        ..CoarseConfig::default()
    };
    let o = PyramidOracle::default();
    let short = coarse_invert(&s, &target, &cfg(10), &o).unwrap();
    let long = coarse_invert(&s, &target, &cfg(20), &o).unwrap();
    assert_eq!(short.loss_trace[..], long.loss_trace[..11]);
}

#[test]
fn coarse_inversion_leaves_the_deviation_alone() {
    let mut s = state();
    let n = s.delta().len();
    s.set_delta((0..n).map(|i| (i % 7) as f32 * 1e-4).collect()).unwrap();
    let before = s.delta_checksum();
    let target = s.synthesize(&sample_w(&s, 5).unwrap()).unwrap();
    let cfg = CoarseConfig {
        steps: 5,
        ..CoarseConfig::default()
    };
    coarse_invert(&s, &target, &cfg, &PyramidOracle::default()).unwrap();
    assert_eq!(s.delta_checksum(), before);
}

#[test]
fn coarse_inversion_is_deterministic() {
    let s = state();
    let target = s.synthesize(&sample_w(&s, 6).unwrap()).unwrap();
    let cfg = CoarseConfig {
        steps: 8,
        ..CoarseConfig::default()
    };
    let o = PyramidOracle::default();
    let a = coarse_invert(&s, &target, &cfg, &o).unwrap();
    let b = coarse_invert(&s, &target, &cfg, &o).unwrap();
    assert_eq!(a.latent, b.latent);
    assert_eq!(a.loss_trace, b.loss_trace);
}

#[test]
fn resolution_mismatch_is_an_argument_error() {
    let s = state();
    let small = dhr::tensor::Image::filled(16, 16, 0.0);
    let r = coarse_invert(&s, &small, &CoarseConfig::default(), &PyramidOracle::default());
    assert!(matches!(r, Err(Error::Argument(_))));
}

#[test]
fn stub_encoder_output_is_returned_unchanged() {
    let s = state();
    let rows = s.n_layers();
    let values = (0..rows * s.d_latent()).map(|i| (i as f32 * 0.01).sin()).collect();
    let code = LatentCode::wplus(rows, s.d_latent(), values).unwrap();
    let target = s.synthesize(&code).unwrap();
    let enc = FixedEncoder(code.clone());
    let got = embed(
        Some(&enc),
        &s,
        &target,
        &CoarseConfig::default(),
        &PyramidOracle::default(),
    )
    .unwrap();
    assert_eq!(got, code);
}

#[test]
fn absent_encoder_replicates_the_coarse_row() {
    let s = state();
    let target = s.synthesize(&sample_w(&s, 8).unwrap()).unwrap();
    let cfg = CoarseConfig {
        steps: 5,
        ..CoarseConfig::default()
    };
    let o = PyramidOracle::default();
    let coarse = coarse_invert(&s, &target, &cfg, &o).unwrap();
    let got = embed(None, &s, &target, &cfg, &o).unwrap();
    assert_eq!(got.space(), LatentSpace::Wplus);
    assert_eq!(got.rows(), s.n_layers());
    for r in 0..got.rows() {
        assert_eq!(got.row(r), coarse.latent.values());
    }
}

#[test]
fn wrong_row_count_is_a_configuration_error() {
    let s = state();
    let d = s.d_latent();
    let code = LatentCode::wplus(3, d, vec![0.0; 3 * d]).unwrap();
    let target = s.synthesize(&sample_w(&s, 1).unwrap()).unwrap();
    let r = embed(
        Some(&FixedEncoder(code)),
        &s,
        &target,
        &CoarseConfig::default(),
        &PyramidOracle::default(),
    );
    assert!(matches!(r, Err(Error::Config(_))));
}
