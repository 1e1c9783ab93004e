//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use dhr::generator::{GeneratorState, ToyConfig};
use dhr::scenario::patched_target;
use dhr::segmentation::{LossMap, SuperpixelPartition};
use dhr::tensor::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toy_state() -> GeneratorState<f32> {
    GeneratorState::toy(ToyConfig::default()).unwrap()
}

pub fn noise_image(h: usize, w: usize, seed: u64) -> Image<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(h, w, |_, _, _| rng.gen_range(-1.0f32..=1.0))
}

/// Clean toy samples, their patched versions and a few synthetic patterns.
pub fn corpus(state: &GeneratorState<f32>, seeds: u64) -> Vec<Image<f32>> {
    let mut out = Vec::new();
    for s in 0..seeds {
        let t = patched_target(state, s, 0.2).unwrap();
        out.push(t.clean);
        out.push(t.target);
    }
    let r = state.output_resolution();
    out.push(Image::filled(r, r, 0.25));
    out.push(noise_image(r, r, 99));
    out.push(Image::from_fn(r, r, |c, y, x| {
        ((x + y) as f32 / r as f32) - 1.0 + 0.1 * c as f32
    }));
    out.push(Image::from_fn(
        r,
        r,
        |_, y, x| if (x / 8 + y / 8) % 2 == 0 { -0.8 } else { 0.8 },
    ));
    out
}

/// Component count per label by breadth-first flood fill.
pub fn components_per_label(part: &SuperpixelPartition) -> Vec<usize> {
    let (h, w) = (part.height(), part.width());
    let labels = part.labels();
    let mut seen = vec![false; h * w];
    let mut comps = vec![0usize; part.count()];
    for start in 0..h * w {
        if seen[start] {
            continue;
        }
        let l = labels[start];
        comps[l as usize] += 1;
        seen[start] = true;
        let mut q = VecDeque::from([start]);
        while let Some(i) = q.pop_front() {
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if !seen[j] && labels[j] == l {
                    seen[j] = true;
                    q.push_back(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
    }
    comps
}

/// Double-loop partition means.
pub fn brute_force_scores(lmap: &LossMap, part: &SuperpixelPartition) -> Vec<f64> {
    (0..part.count())
        .map(|i| {
            let (mut sum, mut n) = (0.0, 0usize);
            for y in 0..part.height() {
                for x in 0..part.width() {
                    if part.label(y, x) == i {
                        sum += lmap.at(y, x);
                        n += 1;
                    }
                }
            }
            sum / n as f64
        })
        .collect()
}

/// Every file's bytes, with eval records stripped of their wall time.
pub fn bundle_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            let name = e.file_name().to_string_lossy().into_owned();
            let mut bytes = fs::read(e.path()).unwrap();
            if name == dhr::pipeline::files::EVAL {
                let text: String = String::from_utf8(bytes)
                    .unwrap()
                    .lines()
                    .map(|l| {
                        let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                        v.as_object_mut().unwrap().remove("wall_time");
                        v.to_string() + "\n"
                    })
                    .collect();
                bytes = text.into_bytes();
            }
            (name, bytes)
        })
        .collect();
    out.sort();
    out
}
