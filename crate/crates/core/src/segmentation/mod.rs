//! Domain segmentation: decides which pixels the generator can reproduce.
//!
//! A coarse inversion exposes hard regions through its residual. The
//! residual's spatial map is averaged over superpixels, each superpixel is
//! thresholded with the threshold of its dominant parsing category, and the
//! result is intersected with the parsing mask's own in/out assignment.

mod parsing;
mod slic;

pub use parsing::{Category, CategorySet, Domain, ParsingMask, ParsingOracle, RasterParser, UniformParser};
pub use slic::{gaussian_blur, slic_superpixels, to_lab, SlicConfig, SuperpixelPartition};

use crate::embedding::{coarse_invert, CoarseConfig, EmbeddingResult};
use crate::error::{Error, Result};
use crate::generator::GeneratorState;
use crate::metrics::PerceptualOracle;
use crate::tensor::{DomainMask, Image};

/// Per-pixel reconstruction error.
#[derive(Clone, Debug, PartialEq)]
pub struct LossMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    normalized: bool,
}

impl LossMap {
    /// A raw (unnormalized) field; values must be finite and nonnegative.
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "loss map has {} values for {height}x{width}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Argument("loss map values must be finite and nonnegative".into()));
        }
        Ok(Self {
            height,
            width,
            values,
            normalized: false,
        })
    }

    /// Min-max normalization to `[0, 1]`; a constant field becomes all zeros.
    pub fn normalized(mut self) -> Self {
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        for v in &mut self.values {
            *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
        }
        self.normalized = true;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// The oracle's distance map between `target` and `coarse`, resampled to
/// image resolution and min-max normalized.
pub fn loss_map(target: &Image<f32>, coarse: &Image<f32>, oracle: &dyn PerceptualOracle<f32>) -> Result<LossMap> {
    target.ensure_same_size(coarse, "loss map")?;
    let map = oracle.full_resolution_map(target, coarse);
    let values = map.data.iter().map(|&v| (v as f64).max(0.0)).collect();
    Ok(LossMap::new(target.height(), target.width(), values)?.normalized())
}

/// Mean loss of each partition.
pub fn partition_scores(lmap: &LossMap, part: &SuperpixelPartition) -> Result<Vec<f64>> {
    if lmap.height() != part.height() || lmap.width() != part.width() {
        return Err(Error::Shape("loss map and partition sizes differ".into()));
    }
    let mut sum = vec![0.0f64; part.count()];
    let mut count = vec![0usize; part.count()];
    for (&l, &v) in part.labels().iter().zip(lmap.values()) {
        sum[l as usize] += v;
        count[l as usize] += 1;
    }
    sum.iter()
        .zip(&count)
        .enumerate()
        .map(|(i, (&s, &n))| {
            if n == 0 {
                Err(Error::Internal(format!("partition {i} is empty")))
            } else {
                Ok(s / n as f64)
            }
        })
        .collect()
}

/// The most frequent parsing label inside each partition (ties: lowest label).
pub fn majority_labels(part: &SuperpixelPartition, parsing: &ParsingMask) -> Result<Vec<u8>> {
    if parsing.height() != part.height() || parsing.width() != part.width() {
        return Err(Error::Shape("parsing mask and partition sizes differ".into()));
    }
    let n_cat = parsing.categories().len();
    let mut votes = vec![0usize; part.count() * n_cat];
    for (&l, &c) in part.labels().iter().zip(parsing.labels()) {
        votes[l as usize * n_cat + c as usize] += 1;
    }
    Ok(votes
        .chunks(n_cat)
        .map(|v| {
            let best = v.iter().copied().max().unwrap_or(0);
            v.iter().position(|&c| c == best).unwrap_or(0) as u8
        })
        .collect())
}

/// `m_s`: partition `i` is out-of-domain iff `scores[i] ≥ τ_i`.
pub fn binarize(scores: &[f64], part: &SuperpixelPartition, parsing: &ParsingMask) -> Result<DomainMask> {
    if scores.len() != part.count() {
        return Err(Error::Shape(format!(
            "{} scores for {} partitions",
            scores.len(),
            part.count()
        )));
    }
    let majority = majority_labels(part, parsing)?;
    let out: Vec<bool> = scores
        .iter()
        .zip(&majority)
        .map(|(&v, &c)| {
            let tau = parsing.categories().get(c).expect("validated label").tau;
            v >= tau
        })
        .collect();
    Ok(DomainMask::from_fn(part.height(), part.width(), |y, x| {
        !out[part.label(y, x)]
    }))
}

/// `m = m_p · m_s`.
pub fn fuse(m_s: &DomainMask, parsing: &ParsingMask) -> Result<DomainMask> {
    intersect(m_s, &parsing.domain_mask())
}

/// Elementwise product of two masks.
pub fn intersect(a: &DomainMask, b: &DomainMask) -> Result<DomainMask> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape("mask sizes differ".into()));
    }
    DomainMask::new(
        a.height(),
        a.width(),
        a.data().iter().zip(b.data()).map(|(x, y)| x & y).collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct SegmentConfig {
    pub slic: SlicConfig,
    pub coarse: CoarseConfig,
}

/// Every intermediate of one segmentation run.
#[derive(Clone, Debug)]
pub struct Segmentation {
    pub mask: DomainMask,
    pub superpixel_mask: DomainMask,
    pub coarse: EmbeddingResult,
    pub loss_map: LossMap,
    pub partition: SuperpixelPartition,
    pub scores: Vec<f64>,
    pub parsing: ParsingMask,
}

/// Coarse inversion, loss map, superpixels, scoring, binarization, fusion.
///
/// `coarse_oracle` drives the coarse inversion; `map_oracle` produces the
/// loss map from its residual.
pub fn segment(
    image: &Image<f32>,
    state: &GeneratorState<f32>,
    config: &SegmentConfig,
    coarse_oracle: &dyn PerceptualOracle<f32>,
    map_oracle: &dyn PerceptualOracle<f32>,
    parser: &dyn ParsingOracle,
) -> Result<Segmentation> {
    let coarse = coarse_invert(state, image, &config.coarse, coarse_oracle)?;
    segment_with_coarse(image, coarse, &config.slic, map_oracle, parser)
}

/// [`segment`] given an existing coarse inversion of `image`.
pub fn segment_with_coarse(
    image: &Image<f32>,
    coarse: EmbeddingResult,
    slic: &SlicConfig,
    map_oracle: &dyn PerceptualOracle<f32>,
    parser: &dyn ParsingOracle,
) -> Result<Segmentation> {
    let lmap = loss_map(image, &coarse.coarse_image, map_oracle)?;
    let partition = slic_superpixels(image, slic)?;
    let parsing = parser.parse(image)?;
    let (superpixel_mask, scores, mask) = domain_mask(&lmap, &partition, &parsing)?;
    Ok(Segmentation {
        mask,
        superpixel_mask,
        coarse,
        loss_map: lmap,
        partition,
        scores,
        parsing,
    })
}

/// The mask as a function of the three intermediates only.
///
/// Returns `(m_s, scores, m)`.
pub fn domain_mask(
    lmap: &LossMap,
    partition: &SuperpixelPartition,
    parsing: &ParsingMask,
) -> Result<(DomainMask, Vec<f64>, DomainMask)> {
    let scores = partition_scores(lmap, partition)?;
    let m_s = binarize(&scores, partition, parsing)?;
    let m = fuse(&m_s, parsing)?;
    Ok((m_s, scores, m))
}
