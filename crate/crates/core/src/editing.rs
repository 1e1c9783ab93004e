//! Latent-direction editing over frozen refinement results.

use std::path::Path;

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::generator::GeneratorState;
use crate::latent::{LatentCode, LatentSpace};
use crate::scenario::sample_w;
use crate::tensor::{DomainMask, FeatureMap, Image};

/// Edit strength used when none is given.
pub const DEFAULT_ALPHA: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct EditDirection {
    pub name: String,
    /// A W row or a full W+ block; stored as given, never normalized.
    pub vector: LatentCode<f32>,
}

impl EditDirection {
    pub fn new(name: impl Into<String>, vector: LatentCode<f32>) -> Result<Self> {
        if vector.space() == LatentSpace::Z {
            return Err(Error::Argument("edit directions live in W or W+".into()));
        }
        if vector.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("edit direction has non-finite entries".into()));
        }
        Ok(Self {
            name: name.into(),
            vector,
        })
    }

    pub fn space(&self) -> LatentSpace {
        self.vector.space()
    }

    pub fn norm(&self) -> f64 {
        self.vector
            .values()
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() < 1e-4
    }

    pub fn to_archive(&self) -> Archive {
        let v = &self.vector;
        let mut a = Archive::new("direction")
            .with_meta("name", self.name.as_str())
            .with_meta("space", v.space().tag())
            .with_meta("d_latent", v.dim() as u64)
            .with_meta("unit_norm", self.is_unit());
        a.push("direction", vec![v.rows(), v.dim()], v.values().to_vec())
            .expect("consistent shape");
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        a.expect_kind("direction")?;
        let space = LatentSpace::from_tag(a.meta_str("space")?)?;
        let (shape, data) = a.array("direction")?;
        if shape.len() != 2 || shape[1] as u64 != a.meta_u64("d_latent")? {
            return Err(Error::Archive("direction shape disagrees with its manifest".into()));
        }
        Self::new(
            a.meta_str("name")?,
            LatentCode::new(space, shape[0], shape[1], data.to_vec())?,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    /// `sample_w(b) - sample_w(a)`, a W direction between two toy samples.
    pub fn two_point(name: impl Into<String>, state: &GeneratorState<f32>, seed_a: u64, seed_b: u64) -> Result<Self> {
        let a = sample_w(state, seed_a)?;
        let b = sample_w(state, seed_b)?;
        let values = b.values().iter().zip(a.values()).map(|(x, y)| x - y).collect();
        Self::new(name, LatentCode::w(values))
    }
}

/// The frozen outputs of one refinement: `θ*`, `w`, `f*` and the feature-resolution mask.
#[derive(Clone, Debug)]
pub struct RefinedArtifacts {
    pub state: GeneratorState<f32>,
    pub latent: LatentCode<f32>,
    pub feature: FeatureMap<f32>,
    pub mask_feat: DomainMask,
}

impl RefinedArtifacts {
    /// The stored inversion result.
    pub fn render(&self) -> Result<Image<f32>> {
        self.state
            .synthesize_with_injection(&self.latent, &self.feature, &self.mask_feat)
    }

    /// `w + α·d`, broadcast to W+ when the direction is a single row.
    pub fn shifted_latent(&self, direction: &EditDirection, alpha: f64) -> Result<LatentCode<f32>> {
        let w = &self.latent;
        let d = &direction.vector;
        if d.dim() != w.dim() {
            return Err(Error::Argument(format!(
                "direction has dimension {}, latent has {}",
                d.dim(),
                w.dim()
            )));
        }
        let rows = w.rows();
        let d = match (d.space(), w.space()) {
            (LatentSpace::W, _) => d.lift_to_wplus(rows)?,
            (LatentSpace::Wplus, LatentSpace::Wplus) if d.rows() == rows => d.clone(),
            _ => {
                return Err(Error::Argument(format!(
                    "a {} direction with {} rows cannot edit a {} latent with {rows} rows",
                    d.space().tag(),
                    d.rows(),
                    w.space().tag()
                )))
            }
        };
        let w = w.lift_to_wplus(rows)?;
        if alpha == 0.0 {
            return Ok(w);
        }
        let a = alpha as f32;
        let values = w.values().iter().zip(d.values()).map(|(x, y)| x + a * y).collect();
        LatentCode::wplus(rows, w.dim(), values)
    }

    /// Renders the edited latent through the frozen weights, feature and mask.
    pub fn edit(&self, direction: &EditDirection, alpha: f64) -> Result<Image<f32>> {
        let w = self.shifted_latent(direction, alpha)?;
        self.state.synthesize_with_injection(&w, &self.feature, &self.mask_feat)
    }

    /// The blended feature at the injection layer for an edited latent.
    pub fn blended_feature(&self, direction: &EditDirection, alpha: f64) -> Result<FeatureMap<f32>> {
        let w = self.shifted_latent(direction, alpha)?;
        self.state.blended_feature(&w, &self.feature, &self.mask_feat)
    }
}

/// Free-function form of [`RefinedArtifacts::edit`].
pub fn edit(artifacts: &RefinedArtifacts, direction: &EditDirection, alpha: f64) -> Result<Image<f32>> {
    artifacts.edit(direction, alpha)
}
