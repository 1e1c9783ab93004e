//! Generator behaviour: determinism, identities of the injection path and
//! analytic gradients against central finite differences in f64.

use std::sync::Arc;

use dhr::generator::{blend, sample_z, GeneratorState, MappingHead, ToyConfig, ToyGenerator, TuneScope, Wants};
use dhr::latent::LatentCode;
use dhr::tensor::{DomainMask, FeatureMap, Image, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn state32() -> GeneratorState<f32> {
    GeneratorState::toy(ToyConfig::default()).unwrap()
}

fn random_w<T: dhr::real::Real>(state: &GeneratorState<T>, seed: u64) -> LatentCode<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = sample_z::<T>(&mut rng, state.d_latent());
    state.to_w(&LatentCode::z(z)).unwrap()
}

fn random_mask(h: usize, w: usize, seed: u64) -> DomainMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DomainMask::from_fn(h, w, |_, _| rng.gen_bool(0.5))
}

#[test]
fn synthesis_is_deterministic() {
    let s = state32();
    let w = random_w(&s, 1);
    let a = s.synthesize(&w).unwrap();
    let b = s.synthesize(&w).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    let other = state32();
    assert_eq!(other.synthesize(&w).unwrap().checksum(), a.checksum());
}

#[test]
fn zero_deviation_matches_fresh_state() {
    let mut tuned = state32();
    let w = random_w(&tuned, 2);
    let mut delta = tuned.delta().to_vec();
    let conv = tuned.tunable_ranges()[0].clone();
    delta[conv.start] = 0.5;
    tuned.set_delta(delta).unwrap();
    assert!(tuned.synthesize(&w).unwrap() != state32().synthesize(&w).unwrap());
    tuned.reset_delta();
    assert_eq!(
        tuned.synthesize(&w).unwrap().checksum(),
        state32().synthesize(&w).unwrap().checksum()
    );
}

#[test]
fn dimension_mismatch_is_a_configuration_error() {
    let s = state32();
    let err = s.synthesize(&LatentCode::w(vec![0.0; 10])).unwrap_err();
    assert!(matches!(err, dhr::Error::Config(_)));
    let wplus = LatentCode::wplus(3, 64, vec![0.0; 192]).unwrap();
    assert!(matches!(s.synthesize(&wplus).unwrap_err(), dhr::Error::Config(_)));
}

#[test]
fn all_ones_injection_is_the_base_output() {
    let s = state32();
    let w = random_w(&s, 3);
    let f = s.tap_feature(&w).unwrap();
    let mut other = f.clone();
    other.tensor.data.iter_mut().for_each(|v| *v = 123.0);
    let res = s.inject_resolution();
    let out = s
        .synthesize_with_injection(&w, &other, &DomainMask::ones(res, res))
        .unwrap();
    assert_eq!(out.checksum(), s.synthesize(&w).unwrap().checksum());
}

#[test]
fn injecting_own_feature_with_zero_mask_is_the_base_output() {
    let s = state32();
    let w = random_w(&s, 4);
    let f = s.tap_feature(&w).unwrap();
    let res = s.inject_resolution();
    let out = s
        .synthesize_with_injection(&w, &f, &DomainMask::zeros(res, res))
        .unwrap();
    assert_eq!(out.checksum(), s.synthesize(&w).unwrap().checksum());
}

#[test]
fn two_by_two_blend_example() {
    let own = Tensor::from_vec(1, 2, 2, vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
    let inj = Tensor::from_vec(1, 2, 2, vec![5.0f32, 6.0, 7.0, 8.0]).unwrap();
    let m = DomainMask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
    assert_eq!(blend(&own, &inj, &m).data, vec![1.0, 6.0, 7.0, 4.0]);
}

#[test]
fn injection_shape_errors() {
    let s = state32();
    let w = random_w(&s, 5);
    let f = s.tap_feature(&w).unwrap();
    let wrong_layer = FeatureMap {
        layer: 2,
        tensor: f.tensor.clone(),
    };
    let res = s.inject_resolution();
    let m = DomainMask::ones(res, res);
    assert!(matches!(
        s.synthesize_with_injection(&w, &wrong_layer, &m).unwrap_err(),
        dhr::Error::Config(_)
    ));
    assert!(matches!(
        s.synthesize_with_injection(&w, &f, &DomainMask::ones(res / 2, res / 2))
            .unwrap_err(),
        dhr::Error::Config(_)
    ));
}

#[test]
fn taps_are_deterministic_and_detached() {
    let s = state32();
    let w = random_w(&s, 6);
    let a = s.tap_feature(&w).unwrap();
    let b = s.tap_feature(&w).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.layer, s.inject_layer());
    assert_eq!(a.height(), 16);
}

#[test]
fn mean_latent_single_sample_is_mapped_seed_draw() {
    let s = state32();
    let m = s.mean_latent(1, 42).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let z = sample_z::<f32>(&mut rng, 64);
    assert_eq!(m.values(), s.to_w(&LatentCode::z(z)).unwrap().values());
    assert!(matches!(s.mean_latent(0, 1).unwrap_err(), dhr::Error::Argument(_)));
}

#[test]
fn mean_latent_of_identity_head_is_near_zero() {
    let config = ToyConfig {
        mapping: MappingHead::Identity,
        ..ToyConfig::default()
    };
    let s = GeneratorState::<f32>::toy(config).unwrap();
    let n = 2000;
    let m = s.mean_latent(n, 9).unwrap();
    let bound = 3.0 / (n as f32).sqrt();
    // each coordinate is a mean of n unit normals; allow the rare 3-sigma excursion
    let outside = m.values().iter().filter(|v| v.abs() > bound).count();
    assert!(outside <= 2, "{outside} coordinates outside 3 sigma");
    assert!(m.values().iter().all(|v| v.abs() < 4.5 / (n as f32).sqrt()));
}

#[test]
fn blended_feature_out_of_domain_slice_ignores_the_latent() {
    let s = state32();
    let w0 = random_w(&s, 10);
    let f = s.tap_feature(&random_w(&s, 11)).unwrap();
    let res = s.inject_resolution();
    let m = random_mask(res, res, 12);
    let a = s.blended_feature(&w0, &f, &m).unwrap();
    for seed in 13..18 {
        let b = s.blended_feature(&random_w(&s, seed), &f, &m).unwrap();
        for c in 0..a.channels() {
            for (i, (&x, &y)) in a.tensor.plane(c).iter().zip(b.tensor.plane(c)).enumerate() {
                if m.data()[i] == 0 {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }
}

#[test]
fn tune_scope_controls_tunable_ranges() {
    let conv = state32();
    let both = state32().with_scope(TuneScope::ConvolutionsAndStyles);
    let count = |s: &GeneratorState<f32>| s.tunable_ranges().iter().map(|r| r.len()).sum::<usize>();
    assert!(count(&both) > count(&conv));
    let entries = conv.generator().entries();
    for r in conv.tunable_ranges() {
        let e = entries.iter().find(|e| e.offset == r.start).unwrap();
        assert!(e.name.contains("conv"));
    }
}

// ---------------------------------------------------------------------------
// Finite differences (f64)

fn state64() -> GeneratorState<f64> {
    let g = ToyGenerator::<f64>::new(ToyConfig::default()).unwrap();
    let mut s = GeneratorState::new(Arc::new(g), 4).unwrap();
    // non-zero deviation so the check does not sit at the base point
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let delta: Vec<f64> = s.delta().iter().map(|_| rng.gen_range(-0.01..0.01)).collect();
    s.set_delta(delta).unwrap();
    s
}

fn probe(seed: u64, h: usize, w: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(3, h, w, (0..3 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn scalar(img: &Image<f64>, r: &Tensor<f64>) -> f64 {
    img.data().iter().zip(&r.data).map(|(a, b)| a * b).sum()
}

fn rel_close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= 1e-3 * analytic.abs().max(numeric.abs()) + 1e-8
}

const STEP: f64 = 1e-4;

#[test]
fn latent_gradient_matches_finite_differences() {
    let s = state64();
    let r = probe(1, 32, 32);
    for wplus in [false, true] {
        let mut w = random_w(&s, 20);
        if wplus {
            w = w.lift_to_wplus(s.n_layers()).unwrap();
        }
        let trace = s.trace(&w, None).unwrap();
        let g = s
            .backprop(
                &trace,
                &r,
                Wants {
                    latent: true,
                    ..Wants::default()
                },
            )
            .latent
            .unwrap();
        assert_eq!(g.len(), w.values().len());
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..12 {
            let i = rng.gen_range(0..g.len());
            let eval = |delta: f64| {
                let mut v = w.clone();
                v.values_mut()[i] += delta;
                scalar(&s.synthesize(&v).unwrap(), &r)
            };
            let fd = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            assert!(rel_close(g[i], fd), "latent[{i}] analytic {} fd {fd}", g[i]);
        }
    }
}

#[test]
fn weight_gradient_matches_finite_differences() {
    let s = state64();
    let r = probe(2, 32, 32);
    let w = random_w(&s, 22);
    let res = s.inject_resolution();
    let f = {
        let mut f = s.tap_feature(&random_w(&s, 23)).unwrap();
        f.tensor.data.iter_mut().for_each(|v| *v *= 0.9);
        f
    };
    let m = random_mask(res, res, 24);
    for injection in [None, Some((&f, &m))] {
        let trace = s.trace(&w, injection).unwrap();
        let g = s
            .backprop(
                &trace,
                &r,
                Wants {
                    params: true,
                    ..Wants::default()
                },
            )
            .params
            .unwrap();
        let ranges = s.clone().with_scope(TuneScope::ConvolutionsAndStyles).tunable_ranges();
        let idx: Vec<usize> = ranges.iter().flat_map(|r| r.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for _ in 0..20 {
            let i = idx[rng.gen_range(0..idx.len())];
            let eval = |delta: f64| {
                let mut t = s.clone();
                let mut d = t.delta().to_vec();
                d[i] += delta;
                t.set_delta(d).unwrap();
                let img = match injection {
                    None => t.synthesize(&w).unwrap(),
                    Some((f, m)) => t.synthesize_with_injection(&w, f, m).unwrap(),
                };
                scalar(&img, &r)
            };
            let fd = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            assert!(rel_close(g[i], fd), "param[{i}] analytic {} fd {fd}", g[i]);
        }
    }
}

#[test]
fn feature_gradient_matches_finite_differences() {
    let s = state64();
    let r = probe(3, 32, 32);
    let w = random_w(&s, 30);
    let res = s.inject_resolution();
    let f = s.tap_feature(&random_w(&s, 31)).unwrap();
    let m = random_mask(res, res, 32);
    let trace = s.trace(&w, Some((&f, &m))).unwrap();
    let g = s
        .backprop(
            &trace,
            &r,
            Wants {
                feature: true,
                ..Wants::default()
            },
        )
        .feature
        .unwrap();
    let plane = res * res;
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut checked_in = 0;
    for _ in 0..30 {
        let i = rng.gen_range(0..g.data.len());
        let eval = |delta: f64| {
            let mut v = f.clone();
            v.tensor.data[i] += delta;
            scalar(&s.synthesize_with_injection(&w, &v, &m).unwrap(), &r)
        };
        let fd = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
        if m.data()[i % plane] == 1 {
            // in-domain cells never reach the output
            assert_eq!(g.data[i], 0.0);
            assert_eq!(fd, 0.0);
            checked_in += 1;
        } else {
            assert!(rel_close(g.data[i], fd), "feature[{i}] analytic {} fd {fd}", g.data[i]);
        }
    }
    assert!(checked_in > 0);
}
