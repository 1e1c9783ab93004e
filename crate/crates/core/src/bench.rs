//! Time-versus-quality benchmark over refinement step budgets.

use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{mse, psnr_from_mse};
use crate::pipeline::Pipeline;
use crate::scenario::patched_target;
use crate::tensor::Image;

/// One budget's averages over the instances that succeeded.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    /// Feature steps; weight steps are half of this.
    pub steps: usize,
    /// Mean seconds per instance, segmentation included.
    pub wall_time: f64,
    /// PSNR of the mean MSE; `None` when every instance failed.
    pub psnr: Option<f64>,
    pub mse: Option<f64>,
    pub failures: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
}

struct Sample {
    wall_time: f64,
    result: Result<f64>,
}

/// Runs the pipeline on every instance once per budget.
///
/// Embedding and segmentation run once per instance and their time is added
/// to every budget's row. Per-instance failures are recorded, not fatal.
pub fn benchmark(pipeline: &Pipeline, budgets: &[usize], instances: &[Image<f32>]) -> Result<BenchTable> {
    if budgets.is_empty() {
        return Ok(BenchTable::default());
    }
    if instances.is_empty() {
        return Err(Error::Argument("benchmark needs at least one instance".into()));
    }
    let per_instance: Vec<Vec<Sample>> = instances
        .par_iter()
        .map(|image| run_instance(pipeline, budgets, image))
        .collect();
    let rows = budgets
        .iter()
        .enumerate()
        .map(|(b, &steps)| {
            let samples: Vec<&Sample> = per_instance.iter().map(|s| &s[b]).collect();
            let ok: Vec<f64> = samples.iter().filter_map(|s| s.result.as_ref().ok().copied()).collect();
            let failures = samples
                .iter()
                .enumerate()
                .filter_map(|(i, s)| s.result.as_ref().err().map(|e| format!("instance {i}: {e}")))
                .collect();
            let wall_time = samples.iter().map(|s| s.wall_time).sum::<f64>() / samples.len() as f64;
            let mean_mse = (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64);
            BenchRow {
                steps,
                wall_time,
                psnr: mean_mse.map(psnr_from_mse),
                mse: mean_mse,
                failures,
            }
        })
        .collect();
    Ok(BenchTable { rows })
}

fn run_instance(pipeline: &Pipeline, budgets: &[usize], image: &Image<f32>) -> Vec<Sample> {
    let start = Instant::now();
    let prepared = pipeline.coarse(image).and_then(|coarse| {
        let latent = pipeline.embed(image, &coarse)?;
        let seg = pipeline.segment(image, coarse)?;
        Ok((latent, seg.mask))
    });
    let prep_time = start.elapsed().as_secs_f64();
    let (latent, mask) = match prepared {
        Ok(v) => v,
        Err(e) => {
            let msg = e.stage("segment").to_string();
            return budgets
                .iter()
                .map(|_| Sample {
                    wall_time: prep_time,
                    result: Err(Error::Internal(msg.clone())),
                })
                .collect();
        }
    };
    budgets
        .iter()
        .map(|&steps| {
            let start = Instant::now();
            let mut config = pipeline.config.refine;
            config.steps_feature = steps;
            config.steps_theta = steps / 2;
            let result = (|| {
                let session = crate::refine::RefinementSession::new(
                    pipeline.state.clone(),
                    latent.clone(),
                    image.clone(),
                    mask.clone(),
                    config,
                    pipeline.config.oracle_refine.build::<f32>(),
                )?;
                let r = crate::refine::refine(session)?;
                let out = r.state.synthesize_with_injection(&latent, &r.feature, &r.mask_feat)?;
                mse(&out, image)
            })();
            Sample {
                wall_time: prep_time + start.elapsed().as_secs_f64(),
                result: result.map_err(|e| e.stage("refine")),
            }
        })
        .collect()
}

/// Toy benchmark instances: generator samples with a pasted noise square.
pub fn toy_instances(
    pipeline: &Pipeline,
    seeds: impl IntoIterator<Item = u64>,
    fraction: f64,
) -> Result<Vec<Image<f32>>> {
    seeds
        .into_iter()
        .map(|s| patched_target(&pipeline.state, s, fraction).map(|t| t.target))
        .collect()
}

impl BenchTable {
    /// `steps  wall_time  psnr  mse  failures`, tab-separated.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>, prec: usize| v.map_or_else(|| "-".into(), |v| format!("{v:.prec$}"));
        let mut s = String::from("steps\twall_time\tpsnr\tmse\tfailures\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{:.3}\t{}\t{}\t{}\n",
                r.steps,
                r.wall_time,
                opt(r.psnr, 4),
                r.mse.map_or_else(|| "-".into(), |v| format!("{v:e}")),
                r.failures.len()
            ));
        }
        s
    }

    /// PSNR is nondecreasing in budget, allowing at most one drop of at most `slack` dB.
    pub fn is_monotone(&self, slack: f64) -> bool {
        let psnr: Option<Vec<f64>> = self.rows.iter().map(|r| r.psnr).collect();
        let Some(psnr) = psnr else { return false };
        let drops: Vec<f64> = psnr.windows(2).map(|w| w[0] - w[1]).filter(|&d| d > 0.0).collect();
        drops.len() <= 1 && drops.iter().all(|&d| d <= slack)
    }

    /// PSNR against wall time as a line plot on a white canvas.
    pub fn render_curve(&self, height: usize, width: usize) -> Image<f32> {
        let mut img = Image::filled(height, width, 1.0f32);
        let pts: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter_map(|r| r.psnr.filter(|p| p.is_finite()).map(|p| (r.wall_time, p)))
            .collect();
        let margin = 8usize;
        if height <= 2 * margin || width <= 2 * margin {
            return img;
        }
        let (x0, x1) = (margin, width - 1 - margin);
        let (y0, y1) = (margin, height - 1 - margin);
        for x in x0..=x1 {
            put(&mut img, y1, x, [-1.0; 3]);
        }
        for y in y0..=y1 {
            put(&mut img, y, x0, [-1.0; 3]);
        }
        if pts.is_empty() {
            return img;
        }
        let range = |v: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, hi + 0.5)
            }
        };
        let (tlo, thi) = range(&mut pts.iter().map(|p| p.0));
        let (plo, phi) = range(&mut pts.iter().map(|p| p.1));
        let to_px = |(t, p): (f64, f64)| {
            let x = x0 as f64 + (t - tlo) / (thi - tlo) * (x1 - x0) as f64;
            let y = y1 as f64 - (p - plo) / (phi - plo) * (y1 - y0) as f64;
            (y.round() as i64, x.round() as i64)
        };
        let red = [1.0, -1.0, -1.0];
        for w in pts.windows(2) {
            line(&mut img, to_px(w[0]), to_px(w[1]), red);
        }
        for &p in &pts {
            let (y, x) = to_px(p);
            for dy in -2..=2 {
                for dx in -2..=2 {
                    put_i(&mut img, y + dy, x + dx, [-1.0, -1.0, 1.0]);
                }
            }
        }
        img
    }
}

fn put(img: &mut Image<f32>, y: usize, x: usize, rgb: [f32; 3]) {
    for (c, v) in rgb.into_iter().enumerate() {
        img.set(c, y, x, v);
    }
}

fn put_i(img: &mut Image<f32>, y: i64, x: i64, rgb: [f32; 3]) {
    if y >= 0 && x >= 0 && (y as usize) < img.height() && (x as usize) < img.width() {
        put(img, y as usize, x as usize, rgb);
    }
}

/// Bresenham segment.
fn line(img: &mut Image<f32>, (ya, xa): (i64, i64), (yb, xb): (i64, i64), rgb: [f32; 3]) {
    let (dx, dy) = ((xb - xa).abs(), -(yb - ya).abs());
    let (sx, sy) = ((xb - xa).signum(), (yb - ya).signum());
    let (mut x, mut y, mut err) = (xa, ya, dx + dy);
    loop {
        put_i(img, y, x, rgb);
        if x == xb && y == yb {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Parses `10,50,100`.
pub fn parse_budgets(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| Error::Argument(format!("bad budget `{s}`: {e}"))))
        .collect()
}
