//! `dhr`: embed, segment, refine, invert, edit, evaluate and benchmark.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use dhr::archive::{latent_archive, latent_from_archive, Archive};
use dhr::bench::{benchmark, parse_budgets, toy_instances};
use dhr::config::RunConfig;
use dhr::editing::EditDirection;
use dhr::io::{load_image, load_mask, save_image16, save_mask};
use dhr::metrics::EvalRecord;
use dhr::pipeline::{
    files, image_id, list_images, run_batch, run_invert, BatchSummary, Pipeline, RunBundle, StageCache,
};
use dhr::scenario::{patched_target, sample_w};
use dhr::selfcheck::{mask_algebra_check, split_check};
use dhr::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dhr",
    version,
    about = "Generator inversion with domain-specific hybrid refinement"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration file (`key = value` lines); defaults apply otherwise.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Disables the stage cache (root: `$DHR_CACHE_DIR`, else the temp dir).
    #[arg(long, global = true)]
    no_cache: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Prints the effective configuration.
    Config,
    /// Coarse inversion (or the configured encoder): writes latent.bin and coarse.png.
    Embed {
        #[arg(long)]
        image: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        coarse_steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Domain mask from superpixel reconstruction scores and parsing.
    Segment {
        #[arg(long)]
        image: PathBuf,
        /// Output directory: masks, parsing, latent.bin and coarse.png.
        #[arg(long)]
        out: PathBuf,
        /// Target superpixel count [default: 100].
        #[arg(long)]
        k: Option<usize>,
        /// Threshold for in-domain parsing categories [default: 0.7].
        #[arg(long)]
        tau1: Option<f64>,
        /// Threshold for out-of-domain parsing categories [default: 0.8].
        #[arg(long)]
        tau2: Option<f64>,
        /// Coarse inversion steps [default: 40].
        #[arg(long)]
        coarse_steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Hybrid refinement from a latent and a mask; writes a bundle.
    Refine {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        latent: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Bundle directory.
        #[arg(long)]
        out: PathBuf,
        /// Feature steps [default: 100].
        #[arg(long)]
        steps_f: Option<usize>,
        /// Weight steps [default: 50].
        #[arg(long)]
        steps_w: Option<usize>,
        /// Weight learning rate [default: 0.0015].
        #[arg(long)]
        lr_w: Option<f64>,
        /// Feature learning rate [default: 0.09].
        #[arg(long)]
        lr_f: Option<f64>,
        /// Weight of the perceptual term [default: 1.0].
        #[arg(long)]
        lambda: Option<f64>,
        /// Injection layer [default: half depth].
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Embed, segment, refine and render. A directory input runs a batch.
    Invert {
        /// An image file, or a directory of PNG files.
        #[arg(long)]
        image: PathBuf,
        /// Bundle directory (batch: one sub-bundle per image plus summary.tsv).
        #[arg(long)]
        out: PathBuf,
        /// Parallel images in batch mode.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Renders a latent edit through a bundle's frozen weights and feature.
    Edit {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        direction: PathBuf,
        /// Edit strength [default: edit.alpha, 3.0].
        #[arg(long, allow_negative_numbers = true)]
        alpha: Option<f64>,
        /// Output PNG [default: <bundle>/edit_<name>_<alpha>.png].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes a generator sample as a PNG, optionally with a pasted noise square.
    Sample {
        #[arg(long)]
        seed: u64,
        /// Area fraction of the noise square; 0 leaves the sample clean.
        #[arg(long, default_value_t = 0.0)]
        patch: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes a direction file between two toy samples.
    Direction {
        #[arg(long)]
        seed_a: u64,
        #[arg(long)]
        seed_b: u64,
        #[arg(long, default_value = "direction")]
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores predictions against targets with matching file names, or a bundle.
    Eval {
        #[arg(long, requires = "target_dir", conflicts_with = "bundle")]
        pred_dir: Option<PathBuf>,
        #[arg(long, requires = "pred_dir")]
        target_dir: Option<PathBuf>,
        /// Re-scores refined.png against input.png with the bundle's own config.
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Also writes the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time-versus-PSNR table over refinement budgets on toy instances.
    Bench {
        #[arg(long, default_value = "10,50,100")]
        budgets: String,
        #[arg(long, default_value_t = 3)]
        instances: u64,
        /// Area fraction of the pasted noise patch.
        #[arg(long, default_value_t = 0.2)]
        fraction: f64,
        /// Writes bench.tsv and bench.png here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Blending identities and the gradient split on the configured generator.
    Selfcheck {
        #[arg(long, default_value_t = 100)]
        cases: usize,
        /// Finite-difference coordinates per branch.
        #[arg(long, default_value_t = 30)]
        coordinates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Config file, then `--set`, then subcommand flags.
fn load_config(global: &Global, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut config = match &global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &global.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Argument(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        config.set(k.trim(), v)?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            config.set(k, v)?;
        }
    }
    config.validate()?;
    Ok(config)
}

fn pipeline(global: &Global, config: RunConfig) -> Result<Pipeline> {
    let cache = (!global.no_cache).then(StageCache::from_env);
    Ok(Pipeline::new(config)?.with_cache(cache))
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(T::to_string)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let g = &cli.global;
    match &cli.command {
        Command::Config => {
            print!("{}", load_config(g, &[])?.to_text());
        }
        Command::Embed {
            image,
            out,
            coarse_steps,
            seed,
        } => {
            let config = load_config(g, &[("coarse.steps", s(coarse_steps)), ("seed", s(seed))])?;
            let p = pipeline(g, config)?;
            let img = load_image(image).map_err(|e| e.stage("input"))?;
            let coarse = p.coarse(&img).map_err(|e| e.stage("embed"))?;
            let latent = p.embed(&img, &coarse).map_err(|e| e.stage("embed"))?;
            create_dir(out)?;
            let fp = p.state.generator().fingerprint();
            latent_archive(&latent, &fp).save(out.join(files::LATENT))?;
            save_image16(&coarse.coarse_image, out.join(files::COARSE))?;
            let last = coarse.loss_trace.last().copied().unwrap_or(f64::NAN);
            println!("coarse loss {last:.6e}; wrote {}", out.display());
        }
        Command::Segment {
            image,
            out,
            k,
            tau1,
            tau2,
            coarse_steps,
            seed,
        } => {
            let config = load_config(
                g,
                &[
                    ("slic.k", s(k)),
                    ("tau1", s(tau1)),
                    ("tau2", s(tau2)),
                    ("coarse.steps", s(coarse_steps)),
                    ("seed", s(seed)),
                ],
            )?;
            let p = pipeline(g, config)?;
            let img = load_image(image).map_err(|e| e.stage("input"))?;
            let coarse = p.coarse(&img).map_err(|e| e.stage("embed"))?;
            let latent = p.embed(&img, &coarse).map_err(|e| e.stage("embed"))?;
            let seg = p.segment(&img, coarse).map_err(|e| e.stage("segment"))?;
            let bundle = RunBundle::create(out)?;
            let fp = p.state.generator().fingerprint();
            bundle.write_embedding(&latent, &seg.coarse.coarse_image, &fp)?;
            bundle.write_segmentation(&seg)?;
            let out_px = seg.mask.count_out();
            let n = out_px + seg.mask.count_in();
            println!(
                "{} superpixels; {out_px}/{n} pixels out of domain; wrote {}",
                seg.partition.count(),
                out.display()
            );
        }
        Command::Refine {
            image,
            latent,
            mask,
            out,
            steps_f,
            steps_w,
            lr_w,
            lr_f,
            lambda,
            layer,
            seed,
        } => {
            let config = load_config(
                g,
                &[
                    ("refine.steps_feature", s(steps_f)),
                    ("refine.steps_theta", s(steps_w)),
                    ("refine.lr_theta", s(lr_w)),
                    ("refine.lr_feature", s(lr_f)),
                    ("refine.lambda", s(lambda)),
                    ("inject_layer", s(layer)),
                    ("seed", s(seed)),
                ],
            )?;
            let p = pipeline(g, config)?;
            let bundle = RunBundle::create(out)?;
            let record = keep_partial(&bundle, || refine_into(&p, image, latent, mask, &bundle))?;
            println!("{}", record.to_line());
        }
        Command::Invert {
            image,
            out,
            workers,
            seed,
        } => {
            let p = pipeline(g, load_config(g, &[("seed", s(seed))])?)?;
            if image.is_dir() {
                let summary = run_batch(&p, image, out, *workers)?;
                print!("{}", summary.to_table());
                for (id, msg) in &summary.failures {
                    eprintln!("failed: {id}: {msg}");
                }
                if !summary.failures.is_empty() {
                    return Ok(ExitCode::FAILURE);
                }
            } else {
                let record = run_invert(&p, image, out)?;
                println!("{}", record.to_line());
            }
        }
        Command::Edit {
            bundle,
            direction,
            alpha,
            out,
        } => {
            let b = RunBundle::open(bundle)?;
            let config = b.config()?;
            let alpha = alpha.unwrap_or(config.alpha);
            let dir = EditDirection::load(direction)?;
            let img = b.artifacts()?.edit(&dir, alpha)?;
            let out = out
                .clone()
                .unwrap_or_else(|| b.path(&format!("edit_{}_{alpha}.png", dir.name)));
            save_image16(&img, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Sample { seed, patch, out } => {
            let p = Pipeline::new(load_config(g, &[])?)?;
            let img = if *patch > 0.0 {
                patched_target(&p.state, *seed, *patch)?.target
            } else {
                p.state.synthesize(&sample_w(&p.state, *seed)?)?
            };
            save_image16(&img, out)?;
            println!("wrote {}", out.display());
        }
        Command::Direction {
            seed_a,
            seed_b,
            name,
            out,
        } => {
            let p = Pipeline::new(load_config(g, &[])?)?;
            let d = EditDirection::two_point(name.as_str(), &p.state, *seed_a, *seed_b)?;
            d.save(out)?;
            println!("wrote {} (norm {:.4})", out.display(), d.norm());
        }
        Command::Eval {
            pred_dir,
            target_dir,
            bundle,
            out,
        } => {
            let summary = match (pred_dir, target_dir, bundle) {
                (_, _, Some(b)) => eval_bundle(&RunBundle::open(b)?)?,
                (Some(p), Some(t), None) => eval_dirs(&load_config(g, &[])?, p, t)?,
                _ => {
                    return Err(Error::Argument(
                        "eval needs --bundle or --pred-dir with --target-dir".into(),
                    ))
                }
            };
            let table = summary.to_table();
            print!("{table}");
            if let Some(out) = out {
                fs::write(out, &table).map_err(|e| Error::io(out, e))?;
            }
            if summary.rows.is_empty() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Bench {
            budgets,
            instances,
            fraction,
            out,
        } => {
            let p = pipeline(g, load_config(g, &[])?)?;
            let budgets = parse_budgets(budgets)?;
            let images = toy_instances(&p, 0..*instances, *fraction)?;
            let table = benchmark(&p, &budgets, &images)?;
            print!("{}", table.to_text());
            if let Some(dir) = out {
                create_dir(dir)?;
                let path = dir.join("bench.tsv");
                fs::write(&path, table.to_text()).map_err(|e| Error::io(path, e))?;
                save_image16(&table.render_curve(240, 320), dir.join("bench.png"))?;
            }
        }
        Command::Selfcheck {
            cases,
            coordinates,
            seed,
        } => {
            let p = Pipeline::new(load_config(g, &[])?)?;
            let masks = mask_algebra_check(&p.state, *cases, *seed)?;
            print!("{masks}");
            let split = split_check(&p.state, *seed, *coordinates)?;
            print!("{split}");
            let ok = masks.passed() && split.passed();
            println!("{}", if ok { "selfcheck passed" } else { "selfcheck FAILED" });
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Leaves a `FAILED` marker in `bundle` when `f` errors.
fn keep_partial<T>(bundle: &RunBundle, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let r = f();
    if let Err(e) = &r {
        bundle.mark_failed(e)?;
    }
    r
}

fn refine_into(p: &Pipeline, image: &Path, latent: &Path, mask: &Path, bundle: &RunBundle) -> Result<EvalRecord> {
    bundle.write_setup(p).map_err(|e| e.stage("write"))?;
    let img = load_image(image).map_err(|e| e.stage("input"))?;
    bundle.write_input(image).map_err(|e| e.stage("input"))?;
    let w = Archive::load(latent)
        .and_then(|a| latent_from_archive(&a))
        .map_err(|e| e.stage("input"))?;
    let m = load_mask(mask).map_err(|e| e.stage("input"))?;
    let fp = p.state.generator().fingerprint();
    latent_archive(&w, &fp)
        .save(bundle.path(files::LATENT))
        .map_err(|e| e.stage("write"))?;
    save_mask(&m, bundle.path(files::MASK)).map_err(|e| e.stage("write"))?;
    let start = Instant::now();
    let refined = p.refine(&img, &w, &m).map_err(|e| e.stage("refine"))?;
    let output = refined
        .state
        .synthesize_with_injection(&w, &refined.feature, &refined.mask_feat)
        .map_err(|e| e.stage("synthesize"))?;
    let wall_time = start.elapsed().as_secs_f64();
    bundle
        .write_refinement(&refined, &output)
        .map_err(|e| e.stage("refine"))?;
    let stored = bundle.refined().map_err(|e| e.stage("eval"))?;
    let record = p
        .evaluate(&image_id(image), &stored, &img, wall_time)
        .map_err(|e| e.stage("eval"))?;
    bundle
        .write_eval(std::slice::from_ref(&record))
        .map_err(|e| e.stage("eval"))?;
    Ok(record)
}

fn eval_bundle(b: &RunBundle) -> Result<BatchSummary> {
    let config = b.config()?;
    let id = b
        .eval_records()
        .ok()
        .and_then(|r| r.first().map(|r| r.image_id.clone()))
        .unwrap_or_else(|| image_id(&b.dir));
    let wall_time = b
        .eval_records()
        .ok()
        .and_then(|r| r.first().map(|r| r.wall_time))
        .unwrap_or(0.0);
    let oracle = config.oracle_eval.build::<f32>();
    let record = EvalRecord::evaluate(
        id,
        &b.refined()?,
        &b.input()?,
        oracle.as_ref(),
        wall_time,
        config.fingerprint(),
    )?;
    Ok(BatchSummary {
        rows: vec![record],
        failures: vec![],
    })
}

fn eval_dirs(config: &RunConfig, pred_dir: &Path, target_dir: &Path) -> Result<BatchSummary> {
    let preds = list_images(pred_dir)?;
    if preds.is_empty() {
        return Err(Error::Argument(format!("no PNG images in {}", pred_dir.display())));
    }
    let oracle = config.oracle_eval.build::<f32>();
    let mut summary = BatchSummary::default();
    for pred in preds {
        let id = image_id(&pred);
        let target = target_dir.join(pred.file_name().expect("listed file"));
        let r = load_image(&pred).and_then(|p| {
            let t = load_image(&target)?;
            EvalRecord::evaluate(id.as_str(), &p, &t, oracle.as_ref(), 0.0, config.fingerprint())
        });
        match r {
            Ok(rec) => summary.rows.push(rec),
            Err(e) => summary.failures.push((id, e.to_string())),
        }
    }
    Ok(summary)
}
