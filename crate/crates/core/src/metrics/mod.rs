//! Reconstruction quality metrics and evaluation records.

pub mod perceptual;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Image;

pub use perceptual::{Penalty, PerceptualOracle, PointwiseOracle, PyramidOracle};

fn unit(v: f64) -> f64 {
    ((v + 1.0) * 0.5).clamp(0.0, 1.0)
}

/// Mean squared difference after mapping both images from `[-1, 1]` to `[0, 1]`
/// (with clamping).
pub fn mse(a: &Image<f32>, b: &Image<f32>) -> Result<f64> {
    a.ensure_same_size(b, "mse")?;
    let n = a.data().len();
    if n == 0 {
        return Err(Error::Argument("mse of empty images".into()));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = unit(x as f64) - unit(y as f64);
            d * d
        })
        .sum();
    Ok(sum / n as f64)
}

/// PSNR in dB from an MSE on the `[0, 1]` scale; `+inf` when the MSE is zero.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr(a: &Image<f32>, b: &Image<f32>) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// One evaluated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: String,
    pub mse: f64,
    /// `None` encodes the +infinity sentinel of identical images.
    pub psnr: Option<f64>,
    pub perceptual: f64,
    pub wall_time: f64,
    pub config_fingerprint: String,
}

impl EvalRecord {
    pub fn evaluate(
        image_id: impl Into<String>,
        prediction: &Image<f32>,
        target: &Image<f32>,
        oracle: &dyn PerceptualOracle<f32>,
        wall_time: f64,
        config_fingerprint: impl Into<String>,
    ) -> Result<Self> {
        let mse = mse(prediction, target)?;
        let psnr = psnr_from_mse(mse);
        Ok(Self {
            image_id: image_id.into(),
            mse,
            psnr: psnr.is_finite().then_some(psnr),
            perceptual: oracle.distance(&prediction.clamped(), &target.clamped()) as f64,
            wall_time,
            config_fingerprint: config_fingerprint.into(),
        })
    }

    pub fn psnr_db(&self) -> f64 {
        self.psnr.unwrap_or(f64::INFINITY)
    }

    /// One JSON object per line.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Argument(format!("bad eval record: {e}")))
    }
}
