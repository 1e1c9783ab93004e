//! Latent codes in Z, W and W+.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LatentSpace {
    Z,
    W,
    #[serde(rename = "W+")]
    Wplus,
}

impl LatentSpace {
    pub fn tag(self) -> &'static str {
        match self {
            LatentSpace::Z => "Z",
            LatentSpace::W => "W",
            LatentSpace::Wplus => "W+",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "Z" | "z" => Ok(LatentSpace::Z),
            "W" | "w" => Ok(LatentSpace::W),
            "W+" | "w+" | "Wplus" | "wplus" => Ok(LatentSpace::Wplus),
            other => Err(Error::Argument(format!("unknown latent space `{other}`"))),
        }
    }
}

/// A point in one of the generator's latent spaces.
///
/// Z and W codes hold a single row of `dim` values; W+ codes hold one row per
/// style-consuming layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<T = f32> {
    space: LatentSpace,
    rows: usize,
    dim: usize,
    values: Vec<T>,
}

impl<T: Real> LatentCode<T> {
    pub fn new(space: LatentSpace, rows: usize, dim: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != rows * dim {
            return Err(Error::Shape(format!(
                "latent has {} values, expected {rows}x{dim}",
                values.len()
            )));
        }
        if space != LatentSpace::Wplus && rows != 1 {
            return Err(Error::Shape(format!(
                "{} codes have exactly one row, got {rows}",
                space.tag()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Argument("latent code has non-finite entries".into()));
        }
        Ok(Self {
            space,
            rows,
            dim,
            values,
        })
    }

    pub fn z(values: Vec<T>) -> Self {
        let dim = values.len();
        Self {
            space: LatentSpace::Z,
            rows: 1,
            dim,
            values,
        }
    }

    pub fn w(values: Vec<T>) -> Self {
        let dim = values.len();
        Self {
            space: LatentSpace::W,
            rows: 1,
            dim,
            values,
        }
    }

    pub fn wplus(rows: usize, dim: usize, values: Vec<T>) -> Result<Self> {
        Self::new(LatentSpace::Wplus, rows, dim, values)
    }

    pub fn space(&self) -> LatentSpace {
        self.space
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.values[r * self.dim..(r + 1) * self.dim]
    }

    /// Lifts a W code to W+ by replicating its row `n_layers` times.
    pub fn lift_to_wplus(&self, n_layers: usize) -> Result<Self> {
        match self.space {
            LatentSpace::Wplus => {
                if self.rows != n_layers {
                    return Err(Error::Config(format!(
                        "W+ code has {} rows, generator has {n_layers} layers",
                        self.rows
                    )));
                }
                Ok(self.clone())
            }
            LatentSpace::W => {
                let mut values = Vec::with_capacity(n_layers * self.dim);
                for _ in 0..n_layers {
                    values.extend_from_slice(&self.values);
                }
                Ok(Self {
                    space: LatentSpace::Wplus,
                    rows: n_layers,
                    dim: self.dim,
                    values,
                })
            }
            LatentSpace::Z => Err(Error::Config("Z codes must be mapped to W before lifting to W+".into())),
        }
    }

    pub fn cast<U: Real>(&self) -> LatentCode<U> {
        LatentCode {
            space: self.space,
            rows: self.rows,
            dim: self.dim,
            values: crate::real::cast_slice(&self.values),
        }
    }

    pub fn checksum(&self) -> String {
        crate::real::checksum(&self.values)
    }
}
