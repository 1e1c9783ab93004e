//! Run configuration as a flat `key = value` document.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::embedding::CoarseConfig;
use crate::error::{Error, Result};
use crate::generator::{MappingHead, ToyConfig, TuneScope};
use crate::metrics::{PerceptualOracle, PointwiseOracle, PyramidOracle};
use crate::real::Real;
use crate::refine::RefineConfig;
use crate::segmentation::{CategorySet, SlicConfig};

/// A named perceptual oracle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleKind {
    Pyramid,
    RobustPyramid,
    Pointwise,
}

impl OracleKind {
    pub fn tag(self) -> &'static str {
        match self {
            OracleKind::Pyramid => "pyramid",
            OracleKind::RobustPyramid => "robust-pyramid",
            OracleKind::Pointwise => "pointwise",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "pyramid" => Ok(OracleKind::Pyramid),
            "robust-pyramid" => Ok(OracleKind::RobustPyramid),
            "pointwise" => Ok(OracleKind::Pointwise),
            other => Err(Error::Argument(format!(
                "unknown oracle `{other}` (expected pyramid, robust-pyramid or pointwise)"
            ))),
        }
    }

    pub fn build<T: Real>(self) -> Arc<dyn PerceptualOracle<T>> {
        match self {
            OracleKind::Pyramid => Arc::new(PyramidOracle::default()),
            OracleKind::RobustPyramid => Arc::new(PyramidOracle::robust()),
            OracleKind::Pointwise => Arc::new(PointwiseOracle::default()),
        }
    }
}

/// Where the generator comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum GeneratorSource {
    /// Built from the `toy.*` keys.
    Toy,
    Checkpoint(PathBuf),
}

/// Where latent codes come from before refinement.
#[derive(Clone, Debug, PartialEq)]
pub enum EncoderSpec {
    /// Coarse optimization only.
    None,
    /// An external program called as `<program> <image.png> <output.latent>`.
    Exec(PathBuf),
}

impl EncoderSpec {
    fn render(&self) -> String {
        match self {
            EncoderSpec::None => "none".into(),
            EncoderSpec::Exec(p) => format!("exec:{}", p.display()),
        }
    }

    fn parse(v: &str) -> Result<Self> {
        if v == "none" {
            Ok(EncoderSpec::None)
        } else if let Some(p) = v.strip_prefix("exec:") {
            Ok(EncoderSpec::Exec(PathBuf::from(p)))
        } else {
            Err(Error::Argument(format!(
                "encoder must be `none` or `exec:<path>`, got `{v}`"
            )))
        }
    }
}

/// Where parsing masks come from.
#[derive(Clone, Debug, PartialEq)]
pub enum ParsingSource {
    /// Every pixel is skin.
    Skin,
    /// A label raster (with optional sidecar) applied to every image.
    Raster(PathBuf),
}

/// Every tunable of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub generator: GeneratorSource,
    pub toy: ToyConfig,
    /// `None` picks half depth.
    pub inject_layer: Option<usize>,
    pub tune_scope: TuneScope,
    pub encoder: EncoderSpec,
    pub coarse: CoarseConfig,
    pub slic: SlicConfig,
    pub parsing: ParsingSource,
    pub tau1: f64,
    pub tau2: f64,
    pub refine: RefineConfig,
    pub oracle_coarse: OracleKind,
    pub oracle_map: OracleKind,
    pub oracle_refine: OracleKind,
    pub oracle_eval: OracleKind,
    pub alpha: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            generator: GeneratorSource::Toy,
            toy: ToyConfig::default(),
            inject_layer: None,
            tune_scope: TuneScope::default(),
            encoder: EncoderSpec::None,
            coarse: CoarseConfig::default(),
            slic: SlicConfig::default(),
            parsing: ParsingSource::Skin,
            tau1: 0.7,
            tau2: 0.8,
            refine: RefineConfig::default(),
            oracle_coarse: OracleKind::Pyramid,
            oracle_map: OracleKind::RobustPyramid,
            oracle_refine: OracleKind::Pyramid,
            oracle_eval: OracleKind::Pyramid,
            alpha: crate::editing::DEFAULT_ALPHA,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| Error::Argument(format!("`{key}`: cannot parse `{v}`: {e}")))
}

impl RunConfig {
    /// Every key in serialization order.
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "generator",
        "toy.seed",
        "toy.d_latent",
        "toy.channels",
        "toy.stages",
        "toy.mapping",
        "toy.style_strength",
        "toy.mapping_gain",
        "inject_layer",
        "tune_scope",
        "encoder",
        "coarse.steps",
        "coarse.lr",
        "coarse.mean_samples",
        "coarse.rampup",
        "coarse.rampdown",
        "slic.k",
        "slic.compactness",
        "slic.iters",
        "slic.smoothing",
        "parsing",
        "tau1",
        "tau2",
        "refine.steps_feature",
        "refine.steps_theta",
        "refine.lr_theta",
        "refine.lr_feature",
        "refine.lambda",
        "oracle.coarse",
        "oracle.map",
        "oracle.refine",
        "oracle.eval",
        "edit.alpha",
    ];

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "seed" => self.seed.to_string(),
            "generator" => match &self.generator {
                GeneratorSource::Toy => "toy".into(),
                GeneratorSource::Checkpoint(p) => p.display().to_string(),
            },
            "toy.seed" => self.toy.seed.to_string(),
            "toy.d_latent" => self.toy.d_latent.to_string(),
            "toy.channels" => self.toy.channels.to_string(),
            "toy.stages" => self.toy.stages.to_string(),
            "toy.mapping" => match self.toy.mapping {
                MappingHead::Mlp => "mlp".into(),
                MappingHead::Identity => "identity".into(),
            },
            "toy.style_strength" => self.toy.style_strength.to_string(),
            "toy.mapping_gain" => self.toy.mapping_gain.to_string(),
            "inject_layer" => self.inject_layer.map_or("auto".into(), |l| l.to_string()),
            "tune_scope" => match self.tune_scope {
                TuneScope::Convolutions => "convolutions".into(),
                TuneScope::ConvolutionsAndStyles => "convolutions+styles".into(),
            },
            "encoder" => self.encoder.render(),
            "coarse.steps" => self.coarse.steps.to_string(),
            "coarse.lr" => self.coarse.lr.to_string(),
            "coarse.mean_samples" => self.coarse.mean_samples.to_string(),
            "coarse.rampup" => self.coarse.rampup.to_string(),
            "coarse.rampdown" => self.coarse.rampdown.to_string(),
            "slic.k" => self.slic.k_target.to_string(),
            "slic.compactness" => self.slic.compactness.to_string(),
            "slic.iters" => self.slic.iters.to_string(),
            "slic.smoothing" => self.slic.smoothing.to_string(),
            "parsing" => match &self.parsing {
                ParsingSource::Skin => "skin".into(),
                ParsingSource::Raster(p) => p.display().to_string(),
            },
            "tau1" => self.tau1.to_string(),
            "tau2" => self.tau2.to_string(),
            "refine.steps_feature" => self.refine.steps_feature.to_string(),
            "refine.steps_theta" => self.refine.steps_theta.to_string(),
            "refine.lr_theta" => self.refine.lr_theta.to_string(),
            "refine.lr_feature" => self.refine.lr_feature.to_string(),
            "refine.lambda" => self.refine.lambda.to_string(),
            "oracle.coarse" => self.oracle_coarse.tag().into(),
            "oracle.map" => self.oracle_map.tag().into(),
            "oracle.refine" => self.oracle_refine.tag().into(),
            "oracle.eval" => self.oracle_eval.tag().into(),
            "edit.alpha" => self.alpha.to_string(),
            other => return Err(Error::Argument(format!("unknown config key `{other}`"))),
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => {
                self.seed = num(key, v)?;
                self.coarse.seed = self.seed;
            }
            "generator" => {
                self.generator = if v == "toy" {
                    GeneratorSource::Toy
                } else {
                    GeneratorSource::Checkpoint(PathBuf::from(v))
                }
            }
            "toy.seed" => self.toy.seed = num(key, v)?,
            "toy.d_latent" => self.toy.d_latent = num(key, v)?,
            "toy.channels" => self.toy.channels = num(key, v)?,
            "toy.stages" => self.toy.stages = num(key, v)?,
            "toy.mapping" => {
                self.toy.mapping = match v {
                    "mlp" => MappingHead::Mlp,
                    "identity" => MappingHead::Identity,
                    _ => return Err(Error::Argument(format!("`{key}` must be mlp or identity"))),
                }
            }
            "toy.style_strength" => self.toy.style_strength = num(key, v)?,
            "toy.mapping_gain" => self.toy.mapping_gain = num(key, v)?,
            "inject_layer" => self.inject_layer = if v == "auto" { None } else { Some(num(key, v)?) },
            "tune_scope" => {
                self.tune_scope = match v {
                    "convolutions" => TuneScope::Convolutions,
                    "convolutions+styles" => TuneScope::ConvolutionsAndStyles,
                    _ => {
                        return Err(Error::Argument(format!(
                            "`{key}` must be convolutions or convolutions+styles"
                        )))
                    }
                }
            }
            "encoder" => self.encoder = EncoderSpec::parse(v)?,
            "coarse.steps" => self.coarse.steps = num(key, v)?,
            "coarse.lr" => self.coarse.lr = num(key, v)?,
            "coarse.mean_samples" => self.coarse.mean_samples = num(key, v)?,
            "coarse.rampup" => self.coarse.rampup = num(key, v)?,
            "coarse.rampdown" => self.coarse.rampdown = num(key, v)?,
            "slic.k" => self.slic.k_target = num(key, v)?,
            "slic.compactness" => self.slic.compactness = num(key, v)?,
            "slic.iters" => self.slic.iters = num(key, v)?,
            "slic.smoothing" => self.slic.smoothing = num(key, v)?,
            "parsing" => {
                self.parsing = if v == "skin" {
                    ParsingSource::Skin
                } else {
                    ParsingSource::Raster(PathBuf::from(v))
                }
            }
            "tau1" => self.tau1 = num(key, v)?,
            "tau2" => self.tau2 = num(key, v)?,
            "refine.steps_feature" => self.refine.steps_feature = num(key, v)?,
            "refine.steps_theta" => self.refine.steps_theta = num(key, v)?,
            "refine.lr_theta" => self.refine.lr_theta = num(key, v)?,
            "refine.lr_feature" => self.refine.lr_feature = num(key, v)?,
            "refine.lambda" => self.refine.lambda = num(key, v)?,
            "oracle.coarse" => self.oracle_coarse = OracleKind::from_tag(v)?,
            "oracle.map" => self.oracle_map = OracleKind::from_tag(v)?,
            "oracle.refine" => self.oracle_refine = OracleKind::from_tag(v)?,
            "oracle.eval" => self.oracle_eval = OracleKind::from_tag(v)?,
            "edit.alpha" => self.alpha = num(key, v)?,
            other => return Err(Error::Argument(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            writeln!(out, "{key} = {}", self.get(key).expect("known key")).expect("string write");
        }
        out
    }

    /// Starts from the defaults; `#` starts a comment. Unknown keys and
    /// repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |message: String| Error::Parse { line: n + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(bad(format!("key `{key}` given twice")));
            }
            config.set(key, value).map_err(|e| bad(e.to_string()))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.refine.validate()?;
        if !(self.tau1.is_finite() && self.tau2.is_finite()) {
            return Err(Error::Config("thresholds must be finite".into()));
        }
        if self.slic.k_target == 0 {
            return Err(Error::Config("slic.k must be positive".into()));
        }
        if self.coarse.lr.is_nan() || self.coarse.lr <= 0.0 {
            return Err(Error::Config("coarse.lr must be positive".into()));
        }
        let ramp = |v: f64| (0.0..=1.0).contains(&v);
        if !(ramp(self.coarse.rampup) && ramp(self.coarse.rampdown)) {
            return Err(Error::Config(
                "coarse.rampup and coarse.rampdown must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn categories(&self) -> CategorySet {
        CategorySet::faces(self.tau1, self.tau2)
    }

    /// Short hash of the serialized document.
    pub fn fingerprint(&self) -> String {
        fingerprint_of(&self.to_text())
    }

    /// Hash of a subset of keys, used to key stage caches.
    pub fn subset_fingerprint(&self, keys: &[&str]) -> Result<String> {
        let mut text = String::new();
        for k in keys {
            writeln!(text, "{k} = {}", self.get(k)?).expect("string write");
        }
        Ok(fingerprint_of(&text))
    }
}

pub(crate) fn fingerprint_of(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    hex::encode(&digest[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_and_repeated_keys_are_rejected() {
        assert!(matches!(
            RunConfig::parse("bogus = 1"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("seed 1").is_err());
    }

    #[test]
    fn seed_drives_the_coarse_run() {
        let c = RunConfig::parse("seed = 9 # comment\nencoder = exec:/bin/enc\n").unwrap();
        assert_eq!(c.coarse.seed, 9);
        assert_eq!(c.encoder, EncoderSpec::Exec("/bin/enc".into()));
    }

    #[test]
    fn steps_theta_above_steps_feature_is_invalid() {
        assert!(RunConfig::parse("refine.steps_feature = 10\nrefine.steps_theta = 20").is_err());
    }
}
