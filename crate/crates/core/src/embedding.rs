//! Initial latent codes: coarse W-space optimization and pluggable encoders.

use std::path::PathBuf;
use std::process::Command;

use crate::archive::{latent_archive, latent_from_archive, Archive};
use crate::error::{Error, Result};
use crate::generator::{GeneratorState, Wants};
use crate::latent::{LatentCode, LatentSpace};
use crate::metrics::PerceptualOracle;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Image;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoarseConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Z samples averaged for the starting point.
    pub mean_samples: usize,
    /// Fraction of the run spent warming the learning rate up from zero.
    pub rampup: f64,
    /// Fraction of the run over which it decays to zero.
    pub rampdown: f64,
}

impl Default for CoarseConfig {
    fn default() -> Self {
        Self {
            steps: 40,
            lr: 0.05,
            seed: 0,
            mean_samples: 4096,
            rampup: 0.0,
            rampdown: 0.25,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddingResult {
    pub latent: LatentCode<f32>,
    pub coarse_image: Image<f32>,
    /// `loss_trace[i]` is the loss after `i` updates, so a run of `steps`
    /// updates records `steps + 1` values and the last one belongs to
    /// `coarse_image`.
    pub loss_trace: Vec<f64>,
}

/// Optimizes a W code from the mean latent toward `target` under `oracle`.
///
/// The generator weights are never touched.
pub fn coarse_invert(
    state: &GeneratorState<f32>,
    target: &Image<f32>,
    config: &CoarseConfig,
    oracle: &dyn PerceptualOracle<f32>,
) -> Result<EmbeddingResult> {
    check_resolution(state, target)?;
    let mut w = state.mean_latent(config.mean_samples, config.seed)?;
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr), w.dim());
    let mut loss_trace = Vec::with_capacity(config.steps + 1);
    for step in 0..=config.steps {
        let trace = state.trace(&w, None)?;
        let output = trace.output();
        if step == config.steps {
            loss_trace.push(oracle.distance(&output, target) as f64);
            return Ok(EmbeddingResult {
                latent: w,
                coarse_image: output,
                loss_trace,
            });
        }
        let (loss, d_out) = oracle.distance_grad(&output, target);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                branch: "coarse",
                value: loss as f64,
            });
        }
        loss_trace.push(loss as f64);
        let grads = state.backprop(
            &trace,
            &d_out,
            Wants {
                latent: true,
                ..Wants::default()
            },
        );
        let g = grads.latent.expect("W code has a latent gradient");
        adam.set_lr(config.lr * lr_ramp(step as f64 / config.steps as f64, config.rampup, config.rampdown));
        adam.step(w.values_mut(), &g);
    }
    unreachable!("loop returns on its last iteration")
}

/// Learning-rate multiplier at progress `t` in `[0, 1)`: linear warm-up over
/// the first `rampup` fraction, cosine decay over the last `rampdown`.
pub fn lr_ramp(t: f64, rampup: f64, rampdown: f64) -> f64 {
    let down = if rampdown > 0.0 {
        ((1.0 - t) / rampdown).min(1.0)
    } else {
        1.0
    };
    let down = 0.5 - 0.5 * (down * std::f64::consts::PI).cos();
    let up = if rampup > 0.0 { (t / rampup).min(1.0) } else { 1.0 };
    down * up
}

fn check_resolution(state: &GeneratorState<f32>, target: &Image<f32>) -> Result<()> {
    let res = state.output_resolution();
    if target.height() != res || target.width() != res {
        return Err(Error::Argument(format!(
            "target is {}x{}, generator renders {res}x{res}",
            target.height(),
            target.width()
        )));
    }
    Ok(())
}

/// An image-to-latent encoder.
pub trait EncoderOracle: Send + Sync {
    fn name(&self) -> &str;
    fn encode(&self, image: &Image<f32>) -> Result<LatentCode<f32>>;
}

/// Checks an encoder's output against the generator and lifts W codes to W+.
pub fn validate_encoded(state: &GeneratorState<f32>, code: LatentCode<f32>) -> Result<LatentCode<f32>> {
    if code.space() == LatentSpace::Z {
        return Err(Error::Config("encoder returned a Z code; expected W or W+".into()));
    }
    if code.dim() != state.d_latent() {
        return Err(Error::Config(format!(
            "encoder returned dimension {}, generator expects {}",
            code.dim(),
            state.d_latent()
        )));
    }
    code.lift_to_wplus(state.n_layers())
}

/// W+ code for `target`: the encoder's prediction when one is given,
/// otherwise the coarse inversion result replicated across layers.
pub fn embed(
    encoder: Option<&dyn EncoderOracle>,
    state: &GeneratorState<f32>,
    target: &Image<f32>,
    config: &CoarseConfig,
    oracle: &dyn PerceptualOracle<f32>,
) -> Result<LatentCode<f32>> {
    match encoder {
        Some(e) => {
            check_resolution(state, target)?;
            validate_encoded(state, e.encode(target)?)
        }
        None => coarse_invert(state, target, config, oracle)?
            .latent
            .lift_to_wplus(state.n_layers()),
    }
}

/// Runs an external program as `<program> <input.png> <output.latent>`.
///
/// The program reads a 16-bit PNG and writes a latent archive.
#[derive(Clone, Debug)]
pub struct ExecEncoder {
    program: PathBuf,
    generator: String,
}

impl ExecEncoder {
    pub fn new(program: impl Into<PathBuf>, generator_fingerprint: impl Into<String>) -> Self {
        Self {
            program: program.into(),
            generator: generator_fingerprint.into(),
        }
    }
}

impl EncoderOracle for ExecEncoder {
    fn name(&self) -> &str {
        "exec"
    }

    fn encode(&self, image: &Image<f32>) -> Result<LatentCode<f32>> {
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let input = dir.path().join("input.png");
        let output = dir.path().join("output.latent");
        crate::io::save_image16(image, &input)?;
        let status = Command::new(&self.program)
            .arg(&input)
            .arg(&output)
            .status()
            .map_err(|e| Error::io(&self.program, e))?;
        if !status.success() {
            return Err(Error::Config(format!(
                "encoder {} exited with {status}",
                self.program.display()
            )));
        }
        let archive = Archive::load(&output)?;
        if let Ok(fp) = archive.meta_str("generator") {
            if !fp.is_empty() && fp != self.generator {
                return Err(Error::Config(
                    "encoder output was produced for a different generator".into(),
                ));
            }
        }
        latent_from_archive(&archive)
    }
}

/// Encoder that always returns the same code; useful as a stand-in.
#[derive(Clone, Debug)]
pub struct FixedEncoder(pub LatentCode<f32>);

impl EncoderOracle for FixedEncoder {
    fn name(&self) -> &str {
        "fixed"
    }

    fn encode(&self, _image: &Image<f32>) -> Result<LatentCode<f32>> {
        Ok(self.0.clone())
    }
}

/// Writes `code` in the format [`ExecEncoder`] programs must produce.
pub fn write_encoder_output(code: &LatentCode<f32>, path: impl AsRef<std::path::Path>) -> Result<()> {
    latent_archive(code, "").save(path)
}
