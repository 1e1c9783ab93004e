//! End-to-end bundles: stage errors, self-sufficiency, caching and batches.

mod common;

use std::fs;
use std::path::Path;

use dhr::config::{EncoderSpec, RunConfig};
use dhr::editing::EditDirection;
use dhr::embedding::write_encoder_output;
use dhr::io::save_image16;
use dhr::pipeline::{files, run_batch, run_invert, Pipeline, RunBundle, StageCache};
use dhr::scenario::{patched_target, sample_w};
use dhr::Error;

fn quick_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.coarse.steps = 10;
    c.coarse.mean_samples = 256;
    c.refine.steps_feature = 8;
    c.refine.steps_theta = 4;
    c
}

fn write_target(dir: &Path, name: &str, seed: u64) -> std::path::PathBuf {
    let p = Pipeline::new(quick_config()).unwrap();
    let t = patched_target(&p.state, seed, 0.2).unwrap();
    let path = dir.join(name);
    save_image16(&t.target, &path).unwrap();
    path
}

#[test]
fn missing_image_is_a_tagged_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(quick_config()).unwrap();
    let out = dir.path().join("bundle");
    let err = run_invert(&p, &dir.path().join("nope.png"), &out).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "input", .. }), "{err}");
    assert!(err.to_string().starts_with("input stage"));
    let bundle = RunBundle::open(&out).unwrap();
    assert!(bundle.is_failed());
    assert!(bundle.path(files::CONFIG).exists());
}

#[test]
fn bundles_are_complete_and_self_sufficient() {
    let dir = tempfile::tempdir().unwrap();
    let image = write_target(dir.path(), "a.png", 0);
    let p = Pipeline::new(quick_config()).unwrap();
    let record = run_invert(&p, &image, &dir.path().join("bundle")).unwrap();
    let moved = dir.path().join("moved");
    fs::rename(dir.path().join("bundle"), &moved).unwrap();
    fs::remove_file(&image).unwrap();

    let bundle = RunBundle::open(&moved).unwrap();
    assert!(!bundle.is_failed());
    for name in [
        files::INPUT,
        files::LATENT,
        files::COARSE,
        files::MASK,
        files::SUPERPIXEL_MASK,
        files::PARSING,
        files::PARSING_MANIFEST,
        files::MASK_FEAT,
        files::REFINED,
        files::THETA_DELTA,
        files::FEATURE,
        files::GENERATOR,
        files::HISTORY,
        files::EVAL,
        files::CONFIG,
        files::FINGERPRINT,
    ] {
        assert!(bundle.path(name).exists(), "{name} missing");
    }
    assert_eq!(bundle.history().unwrap().len(), 8);
    assert_eq!(bundle.eval_records().unwrap(), vec![record.clone()]);
    assert_eq!(bundle.config().unwrap(), quick_config());

    let artifacts = bundle.artifacts().unwrap();
    let rendered = artifacts.render().unwrap();
    let stored = bundle.refined().unwrap();
    let q = rendered
        .data()
        .iter()
        .zip(stored.data())
        .map(|(a, b)| (a.clamp(-1.0, 1.0) - b).abs())
        .fold(0.0f32, f32::max);
    assert!(q <= 2.0 / 65535.0, "{q}");
    let d = EditDirection::two_point("x", &artifacts.state, 1, 2).unwrap();
    assert_eq!(artifacts.edit(&d, 0.0).unwrap().data(), rendered.data());
    let again = dhr::metrics::mse(&stored, &bundle.input().unwrap()).unwrap();
    assert_eq!(again, record.mse);
}

#[test]
fn reruns_are_bit_identical_with_and_without_cache() {
    let dir = tempfile::tempdir().unwrap();
    let image = write_target(dir.path(), "a.png", 1);
    let cache = StageCache::new(dir.path().join("cache"));
    let cached = Pipeline::new(quick_config()).unwrap().with_cache(Some(cache));
    let plain = Pipeline::new(quick_config()).unwrap();
    run_invert(&cached, &image, &dir.path().join("cold")).unwrap();
    run_invert(&cached, &image, &dir.path().join("warm")).unwrap();
    run_invert(&plain, &image, &dir.path().join("plain")).unwrap();
    assert!(fs::read_dir(dir.path().join("cache/coarse")).unwrap().count() == 1);
    let cold = common::bundle_snapshot(&dir.path().join("cold"));
    assert_eq!(cold, common::bundle_snapshot(&dir.path().join("warm")));
    assert_eq!(cold, common::bundle_snapshot(&dir.path().join("plain")));
}

#[test]
fn batch_records_failures_and_means() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    fs::create_dir(&images).unwrap();
    write_target(&images, "a.png", 2);
    write_target(&images, "b.png", 3);
    fs::write(images.join("c.png"), b"not a png").unwrap();
    let p = Pipeline::new(quick_config()).unwrap();
    let out = dir.path().join("out");
    let summary = run_batch(&p, &images, &out, 2).unwrap();
    assert_eq!(summary.rows.len(), 2);
    assert_eq!(summary.failures.len(), 1);
    assert_eq!(summary.failures[0].0, "c");
    assert!(RunBundle::open(out.join("c")).unwrap().is_failed());
    let (mse, _, _) = summary.means().unwrap();
    assert_eq!(mse, (summary.rows[0].mse + summary.rows[1].mse) / 2.0);
    let table = fs::read_to_string(out.join("summary.tsv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 2 + 1 + 1);
}

#[test]
fn empty_batch_directory_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(quick_config()).unwrap();
    assert!(run_batch(&p, dir.path(), &dir.path().join("out"), 1).is_err());
}

#[cfg(unix)]
#[test]
fn exec_encoder_output_becomes_the_pivot() {
    use std::os::unix::fs::PermissionsExt;
    let dir = tempfile::tempdir().unwrap();
    let image = write_target(dir.path(), "a.png", 4);
    let mut config = quick_config();
    let state = Pipeline::new(config.clone()).unwrap().state;
    let code = sample_w(&state, 8).unwrap();
    let stored = dir.path().join("fixed.latent");
    write_encoder_output(&code, &stored).unwrap();
    let script = dir.path().join("encoder.sh");
    fs::write(&script, format!("#!/bin/sh\ncp '{}' \"$2\"\n", stored.display())).unwrap();
    fs::set_permissions(&script, fs::Permissions::from_mode(0o755)).unwrap();
    config.encoder = EncoderSpec::Exec(script);
    let p = Pipeline::new(config).unwrap();
    run_invert(&p, &image, &dir.path().join("bundle")).unwrap();
    let latent = RunBundle::open(dir.path().join("bundle")).unwrap().latent().unwrap();
    assert_eq!(latent, code.lift_to_wplus(state.n_layers()).unwrap());
}
