//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the criteria execute in
//! order on one thread and their runtimes are measured without interference.

mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{brute_force_scores, components_per_label, corpus, toy_state};
use dhr::bench::{benchmark, toy_instances};
use dhr::config::RunConfig;
use dhr::editing::{EditDirection, RefinedArtifacts};
use dhr::generator::{sample_z, GeneratorState};
use dhr::latent::LatentCode;
use dhr::metrics::{mse, PerceptualOracle, PointwiseOracle, PyramidOracle};
use dhr::pipeline::{run_invert, Pipeline};
use dhr::refine::{gradient_split_check, refine, RefineConfig, Refined, RefinementSession, SplitCheckConfig};
use dhr::scenario::{patched_target, PatchedTarget};
use dhr::segmentation::{
    loss_map, partition_scores, segment, slic_superpixels, CategorySet, SegmentConfig, UniformParser,
};
use dhr::tensor::{DomainMask, FeatureMap, Image, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn report(n: usize, title: &str, elapsed: Duration, outcome: Outcome) -> bool {
    let status = if outcome.passed { "PASS" } else { "FAIL" };
    println!(
        "{status} criterion {n}: {title} [{:.1} s] {}",
        elapsed.as_secs_f64(),
        outcome.detail
    );
    outcome.passed
}

fn timed(f: impl FnOnce() -> Outcome) -> (Duration, Outcome) {
    let start = Instant::now();
    let o = f();
    (start.elapsed(), o)
}

fn random_w(state: &GeneratorState<f32>, rng: &mut ChaCha8Rng) -> LatentCode<f32> {
    let z = sample_z::<f32>(rng, state.d_latent());
    state.to_w(&LatentCode::z(z)).unwrap()
}

fn criterion_1(state: &GeneratorState<f32>) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = state.inject_resolution();
    let c = state.tap_feature(&random_w(state, &mut rng)).unwrap().channels();
    let (mut identity_ok, mut slice_ok) = (0, 0);
    for _ in 0..100 {
        let w = random_w(state, &mut rng);
        let f = FeatureMap {
            layer: state.inject_layer(),
            tensor: Tensor::from_vec(c, r, r, (0..c * r * r).map(|_| rng.gen_range(-3.0f32..3.0)).collect()).unwrap(),
        };
        let base = state.synthesize(&w).unwrap();
        let injected = state
            .synthesize_with_injection(&w, &f, &DomainMask::ones(r, r))
            .unwrap();
        identity_ok += (base.data() == injected.data()) as usize;
        let m = DomainMask::from_fn(r, r, |_, _| rng.gen_bool(0.5));
        let blended = state.blended_feature(&w, &f, &m).unwrap();
        let mut same = true;
        for ch in 0..c {
            for y in 0..r {
                for x in 0..r {
                    if !m.is_in(y, x) {
                        same &= blended.tensor.at(ch, y, x).to_bits() == f.tensor.at(ch, y, x).to_bits();
                    }
                }
            }
        }
        slice_ok += same as usize;
    }
    Outcome {
        passed: identity_ok == 100 && slice_ok == 100,
        detail: format!("m=1 identity {identity_ok}/100, out-of-domain slice {slice_ok}/100"),
    }
}

fn criterion_2(state: &GeneratorState<f32>) -> Outcome {
    let t = patched_target(state, 0, 0.2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = random_w(state, &mut rng).lift_to_wplus(state.n_layers()).unwrap();
    let session = RefinementSession::new(
        state.cast::<f64>(),
        w.cast::<f64>(),
        t.target.cast::<f64>(),
        t.patch.as_out_mask(32, 32),
        RefineConfig {
            lambda: 0.0,
            ..RefineConfig::default()
        },
        Arc::new(PyramidOracle::default()),
    )
    .unwrap();
    let check = SplitCheckConfig {
        coordinates: 30,
        seed: 2,
        ..SplitCheckConfig::default()
    };
    let r = gradient_split_check(&session, &check).unwrap();
    Outcome {
        passed: r.passed() && r.coordinates_checked >= 50,
        detail: format!(
            "feature isolated {}, weight isolated {}, {} coordinates, max rel error {:.2e}, {} mismatches",
            r.feature_isolated,
            r.theta_isolated,
            r.coordinates_checked,
            r.max_rel_error,
            r.mismatches.len()
        ),
    }
}

/// Instance A1 for `seed`: patched target, domain-seg mask, coarse pivot.
struct Instance {
    target: PatchedTarget,
    mask: DomainMask,
    pivot: LatentCode<f32>,
}

fn instance(state: &GeneratorState<f32>, seed: u64) -> Instance {
    let target = patched_target(state, seed, 0.2).unwrap();
    let parser = UniformParser::skin(CategorySet::default());
    let seg = segment(
        &target.target,
        state,
        &SegmentConfig::default(),
        &PyramidOracle::default(),
        &PyramidOracle::robust(),
        &parser,
    )
    .unwrap();
    let pivot = seg.coarse.latent.lift_to_wplus(state.n_layers()).unwrap();
    Instance {
        target,
        mask: seg.mask,
        pivot,
    }
}

fn l2() -> Arc<dyn PerceptualOracle<f32>> {
    Arc::new(PointwiseOracle::default())
}

fn hybrid(state: &GeneratorState<f32>, a: &Instance) -> Refined<f32> {
    let config = RefineConfig {
        lambda: 0.0,
        ..RefineConfig::default()
    };
    let s = RefinementSession::new(
        state.clone(),
        a.pivot.clone(),
        a.target.target.clone(),
        a.mask.clone(),
        config,
        l2(),
    )
    .unwrap();
    refine(s).unwrap()
}

fn weight_only(state: &GeneratorState<f32>, a: &Instance) -> Refined<f32> {
    let config = RefineConfig {
        lambda: 0.0,
        steps_theta: 100,
        ..RefineConfig::default()
    };
    let s = RefinementSession::new(
        state.clone(),
        a.pivot.clone(),
        a.target.target.clone(),
        DomainMask::ones(32, 32),
        config,
        l2(),
    )
    .unwrap();
    refine(s).unwrap()
}

fn render(r: &Refined<f32>, w: &LatentCode<f32>) -> Image<f32> {
    r.state.synthesize_with_injection(w, &r.feature, &r.mask_feat).unwrap()
}

fn criterion_3(state: &GeneratorState<f32>) -> (Outcome, Instance, Refined<f32>) {
    let a1 = instance(state, 0);
    let r = hybrid(state, &a1);
    let l_in0 = r.history[0].l_in.unwrap();
    let (l_in, l_out) = (r.final_losses.0.unwrap(), r.final_losses.1.unwrap());
    let patch_out = a1.target.patch.area() as f64;
    let outcome = Outcome {
        passed: l_out < 1e-3 && l_in <= 0.5 * l_in0,
        detail: format!(
            "L_out {l_out:.2e} (< 1e-3), L_in {l_in0:.4} -> {l_in:.4} (ratio {:.3}, <= 0.5), mask out {} px for a {patch_out} px patch",
            l_in / l_in0,
            a1.mask.count_out()
        ),
    };
    (outcome, a1, r)
}

fn criterion_4(state: &GeneratorState<f32>) -> Outcome {
    let mut wins = 0;
    let mut cells = Vec::new();
    for seed in 0..10 {
        let a = instance(state, seed);
        let h = mse(&render(&hybrid(state, &a), &a.pivot), &a.target.target).unwrap();
        let w = mse(&render(&weight_only(state, &a), &a.pivot), &a.target.target).unwrap();
        wins += (h <= w) as usize;
        cells.push(format!("{seed}:{h:.1e}/{w:.1e}"));
    }
    Outcome {
        passed: wins >= 9,
        detail: format!(
            "hybrid <= weight-only on {wins}/10 (seed:hybrid/weight-only {})",
            cells.join(" ")
        ),
    }
}

fn criterion_5(state: &GeneratorState<f32>, a1: &Instance, r: &Refined<f32>) -> Outcome {
    let artifacts = RefinedArtifacts {
        state: r.state.clone(),
        latent: a1.pivot.clone(),
        feature: r.feature.clone(),
        mask_feat: r.mask_feat.clone(),
    };
    let m = &artifacts.mask_feat;
    let mut identical = 0;
    let mut total = 0;
    for k in 0..5u64 {
        let d = EditDirection::two_point(format!("dir{k}"), state, 100 + 2 * k, 101 + 2 * k).unwrap();
        let base = artifacts.blended_feature(&d, 0.0).unwrap();
        for alpha in [-3.0, 3.0] {
            let f = artifacts.blended_feature(&d, alpha).unwrap();
            let mut same = true;
            for c in 0..f.channels() {
                for y in 0..f.height() {
                    for x in 0..f.width() {
                        if !m.is_in(y, x) {
                            same &= f.tensor.at(c, y, x).to_bits() == base.tensor.at(c, y, x).to_bits();
                        }
                    }
                }
            }
            identical += same as usize;
            total += 1;
        }
    }
    Outcome {
        passed: identical == total && m.count_out() > 0,
        detail: format!(
            "out-of-domain slice identical in {identical}/{total} edits ({} of {} feature cells out)",
            m.count_out(),
            m.height() * m.width()
        ),
    }
}

fn criterion_6(state: &GeneratorState<f32>) -> Outcome {
    let oracle = PyramidOracle::robust();
    let slic = SegmentConfig::default().slic;
    let images = corpus(state, 24);
    let mut worst_score = 0.0f64;
    let mut partitions_ok = true;
    for img in &images {
        let part = slic_superpixels(img, &slic).unwrap();
        partitions_ok &= components_per_label(&part).iter().all(|&c| c == 1)
            && part.sizes().iter().sum::<usize>() == img.height() * img.width();
        let lmap = loss_map(
            img,
            &state.synthesize(&LatentCode::w(vec![0.0; state.d_latent()])).unwrap(),
            &oracle,
        )
        .unwrap();
        let fast = partition_scores(&lmap, &part).unwrap();
        for (a, b) in fast.iter().zip(brute_force_scores(&lmap, &part)) {
            worst_score = worst_score.max((a - b).abs());
        }
    }
    let parser = UniformParser::skin(CategorySet::default());
    let cfg = SegmentConfig::default();
    let (mut min_hit, mut max_false) = (1.0f64, 0.0f64);
    for seed in 0..24 {
        let t = patched_target(state, seed, 0.2).unwrap();
        let seg = |img: &Image<f32>| {
            segment(img, state, &cfg, &PyramidOracle::default(), &oracle, &parser)
                .unwrap()
                .mask
        };
        let clean = seg(&t.clean);
        max_false = max_false.max(clean.count_out() as f64 / (32.0 * 32.0));
        let patched = seg(&t.target);
        let mut hit = 0;
        for y in 0..32 {
            for x in 0..32 {
                hit += (t.patch.contains(y, x) && !patched.is_in(y, x)) as usize;
            }
        }
        min_hit = min_hit.min(hit as f64 / t.patch.area() as f64);
    }
    Outcome {
        passed: worst_score < 1e-6 && partitions_ok && min_hit >= 0.8 && max_false <= 0.05,
        detail: format!(
            "{} corpus images: scores max |diff| {worst_score:.1e}, partitions cover+connected {partitions_ok}; 24 seeds: patch out min {:.1}% (>= 80%), clean false-out max {:.1}% (<= 5%)",
            images.len(),
            100.0 * min_hit,
            100.0 * max_false
        ),
    }
}

fn criterion_7() -> Outcome {
    let p = Pipeline::new(RunConfig::default()).unwrap();
    let instances = toy_instances(&p, 0..3, 0.2).unwrap();
    let table = benchmark(&p, &[10, 50, 100], &instances).unwrap();
    let cells: Vec<String> = table
        .rows
        .iter()
        .map(|r| format!("{}:{:.2}dB/{:.1}s", r.steps, r.psnr.unwrap_or(f64::NAN), r.wall_time))
        .collect();
    Outcome {
        passed: table.rows.len() == 3 && table.is_monotone(0.2) && table.rows.iter().all(|r| r.failures.is_empty()),
        detail: format!("3 instances, steps:psnr/time {}", cells.join(" ")),
    }
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(RunConfig::default()).unwrap();
    let t = patched_target(&p.state, 0, 0.2).unwrap();
    let image = dir.path().join("a1.png");
    dhr::io::save_image16(&t.target, &image).unwrap();
    run_invert(&p, &image, &dir.path().join("first")).unwrap();
    run_invert(&p, &image, &dir.path().join("second")).unwrap();
    let a = common::bundle_snapshot(&dir.path().join("first"));
    let b = common::bundle_snapshot(&dir.path().join("second"));
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    Outcome {
        passed: a.len() == b.len() && differing.is_empty() && a.len() >= 16,
        detail: format!(
            "{} bundle files compared (eval wall_time excluded), differing: {:?}",
            a.len(),
            differing
        ),
    }
}

fn main() {
    let state = toy_state();
    let mut all = true;

    let (t, o) = timed(|| criterion_1(&state));
    all &= report(
        1,
        "mask/blending algebra, 100 cases, < 10 s",
        t,
        Outcome {
            passed: o.passed && t.as_secs_f64() < 10.0,
            ..o
        },
    );

    let (t, o) = timed(|| criterion_2(&state));
    all &= report(
        2,
        "gradient separation and finite differences, < 2 min",
        t,
        Outcome {
            passed: o.passed && t.as_secs_f64() < 120.0,
            ..o
        },
    );

    let start = Instant::now();
    let (o, a1, r) = criterion_3(&state);
    let t = start.elapsed();
    all &= report(
        3,
        "hybrid refinement convergence on A1, < 2 min",
        t,
        Outcome {
            passed: o.passed && t.as_secs_f64() < 120.0,
            ..o
        },
    );

    let (t, o) = timed(|| criterion_4(&state));
    all &= report(4, "hybrid beats weight-only in >= 9 of 10 trials", t, o);

    let (t, o) = timed(|| criterion_5(&state, &a1, &r));
    all &= report(
        5,
        "editing leaves the out-of-domain feature slice unchanged, < 30 s",
        t,
        Outcome {
            passed: o.passed && t.as_secs_f64() < 30.0,
            ..o
        },
    );

    let (t, o) = timed(|| criterion_6(&state));
    all &= report(
        6,
        "domain segmentation correctness, < 1 min",
        t,
        Outcome {
            passed: o.passed && t.as_secs_f64() < 60.0,
            ..o
        },
    );

    let (t, o) = timed(criterion_7);
    all &= report(7, "benchmark PSNR monotone in budget within 0.2 dB", t, o);

    let (t, o) = timed(criterion_8);
    all &= report(8, "invert rerun is bit-identical", t, o);

    if !all {
        std::process::exit(1);
    }
}
