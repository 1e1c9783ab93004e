//! Perceptual distance oracles.
//!
//! An oracle compares two images and returns a non-negative spatial distance
//! map whose mean is the scalar distance. Refinement masks that map per
//! pixel, so every oracle also provides the vector-Jacobian product of its map
//! with respect to the first image.
//!
//! Two hermetic oracles ship with the crate:
//!
//! * [`PyramidOracle`]: a per-pixel penalty averaged over several pooling
//!   scales and resampled to full resolution. It stands in for LPIPS-style
//!   metrics, whose maps are smooth because they come from deep features with
//!   large receptive fields. The penalty is either the squared error or a
//!   bounded (Welsch) error; the bounded form saturates on content the
//!   generator cannot match at all, the way distances between normalized deep
//!   features do.
//! * [`PointwiseOracle`]: a per-pixel Charbonnier distance with a receptive
//!   field of one pixel, which keeps in/out gradient isolation exact.

use crate::real::Real;
use crate::tensor::{Image, Tensor};

pub trait PerceptualOracle<T: Real>: Send + Sync {
    fn name(&self) -> &str;

    /// Single-channel distance map (any resolution).
    fn distance_map(&self, a: &Image<T>, b: &Image<T>) -> Tensor<T>;

    /// Gradient of `<distance_map(a, b), d_map>` with respect to `a`.
    fn map_vjp(&self, a: &Image<T>, b: &Image<T>, d_map: &Tensor<T>) -> Tensor<T>;

    /// Mean of the distance map.
    fn distance(&self, a: &Image<T>, b: &Image<T>) -> T {
        let map = self.distance_map(a, b);
        mean(&map.data)
    }

    /// Scalar distance and its gradient with respect to `a`.
    fn distance_grad(&self, a: &Image<T>, b: &Image<T>) -> (T, Tensor<T>) {
        let map = self.distance_map(a, b);
        let n = map.data.len();
        let value = mean(&map.data);
        let d_map = Tensor::filled(1, map.height, map.width, T::one() / T::lit(n as f64));
        (value, self.map_vjp(a, b, &d_map))
    }

    /// Distance map resampled bilinearly to the images' resolution.
    fn full_resolution_map(&self, a: &Image<T>, b: &Image<T>) -> Tensor<T> {
        self.distance_map(a, b).resize_bilinear(a.height(), a.width())
    }
}

fn mean<T: Real>(v: &[T]) -> T {
    if v.is_empty() {
        return T::zero();
    }
    let sum: T = v.iter().copied().sum();
    sum / T::lit(v.len() as f64)
}

/// Channel-mean squared difference, `1 × H × W`.
pub fn squared_error_field<T: Real>(a: &Image<T>, b: &Image<T>) -> Tensor<T> {
    let (h, w) = (a.height(), a.width());
    let mut out = Tensor::zeros(1, h, w);
    let third = T::one() / T::lit(3.0);
    for c in 0..3 {
        let pa = a.tensor().plane(c);
        let pb = b.tensor().plane(c);
        for ((o, &x), &y) in out.data.iter_mut().zip(pa).zip(pb) {
            let d = x - y;
            *o += d * d * third;
        }
    }
    out
}

/// Back-propagates a per-pixel weight on [`squared_error_field`] to `a`.
pub fn squared_error_field_vjp<T: Real>(a: &Image<T>, b: &Image<T>, d_field: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(3, a.height(), a.width());
    let two_thirds = T::lit(2.0 / 3.0);
    for c in 0..3 {
        let pa = a.tensor().plane(c);
        let pb = b.tensor().plane(c);
        for (((o, &x), &y), &g) in out.plane_mut(c).iter_mut().zip(pa).zip(pb).zip(&d_field.data) {
            *o = if g == T::zero() {
                T::zero()
            } else {
                two_thirds * (x - y) * g
            };
        }
    }
    out
}

/// Per-pixel, per-channel error before channel averaging.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Penalty {
    /// `d²`
    Squared,
    /// `1 − exp(−d² / scale)`, bounded by 1.
    Welsch { scale: f64 },
}

impl Penalty {
    /// Channel-mean penalty field, `1 × H × W`.
    pub fn field<T: Real>(self, a: &Image<T>, b: &Image<T>) -> Tensor<T> {
        match self {
            Penalty::Squared => squared_error_field(a, b),
            Penalty::Welsch { scale } => {
                let inv = T::one() / T::lit(scale);
                let third = T::one() / T::lit(3.0);
                let mut out = Tensor::zeros(1, a.height(), a.width());
                for c in 0..3 {
                    for ((o, &x), &y) in out.data.iter_mut().zip(a.tensor().plane(c)).zip(b.tensor().plane(c)) {
                        let d = x - y;
                        *o += (T::one() - (-d * d * inv).exp()) * third;
                    }
                }
                out
            }
        }
    }

    /// Back-propagates a per-pixel weight on [`Penalty::field`] to `a`.
    pub fn field_vjp<T: Real>(self, a: &Image<T>, b: &Image<T>, d_field: &Tensor<T>) -> Tensor<T> {
        match self {
            Penalty::Squared => squared_error_field_vjp(a, b, d_field),
            Penalty::Welsch { scale } => {
                let inv = T::one() / T::lit(scale);
                let k = T::lit(2.0 / 3.0) * inv;
                let mut out = Tensor::zeros(3, a.height(), a.width());
                for c in 0..3 {
                    let pa = a.tensor().plane(c);
                    let pb = b.tensor().plane(c);
                    for (((o, &x), &y), &g) in out.plane_mut(c).iter_mut().zip(pa).zip(pb).zip(&d_field.data) {
                        let d = x - y;
                        *o = if g == T::zero() {
                            T::zero()
                        } else {
                            k * d * (-d * d * inv).exp() * g
                        };
                    }
                }
                out
            }
        }
    }
}

/// A per-pixel penalty pooled at several scales and resampled to full resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidOracle {
    factors: Vec<usize>,
    penalty: Penalty,
}

impl PyramidOracle {
    /// Squared error pooled with each factor in `factors`. A factor that does
    /// not divide the image sides is reduced to the largest one that does.
    pub fn new(factors: Vec<usize>) -> Self {
        Self::with_penalty(factors, Penalty::Squared)
    }

    pub fn with_penalty(factors: Vec<usize>, penalty: Penalty) -> Self {
        assert!(!factors.is_empty() && factors.iter().all(|&f| f >= 1));
        if let Penalty::Welsch { scale } = penalty {
            assert!(scale > 0.0 && scale.is_finite());
        }
        Self { factors, penalty }
    }

    /// Bounded penalty at full and half resolution; the default for loss maps.
    pub fn robust() -> Self {
        Self::with_penalty(vec![1, 2], Penalty::Welsch { scale: 0.012 })
    }

    pub fn factors(&self) -> &[usize] {
        &self.factors
    }

    pub fn penalty(&self) -> Penalty {
        self.penalty
    }

    /// Each factor reduced to the largest value that divides both sides.
    fn effective_factors(&self, h: usize, w: usize) -> impl Iterator<Item = usize> + '_ {
        self.factors.iter().map(move |&f| {
            (1..=f)
                .rev()
                .find(|&g| h.is_multiple_of(g) && w.is_multiple_of(g))
                .unwrap_or(1)
        })
    }
}

impl Default for PyramidOracle {
    /// Three levels: 2×2, 4×4 and 8×8 pooling.
    fn default() -> Self {
        Self::new(vec![2, 4, 8])
    }
}

impl<T: Real> PerceptualOracle<T> for PyramidOracle {
    fn name(&self) -> &str {
        match self.penalty {
            Penalty::Squared => "pyramid",
            Penalty::Welsch { .. } => "robust-pyramid",
        }
    }

    fn distance_map(&self, a: &Image<T>, b: &Image<T>) -> Tensor<T> {
        let (h, w) = (a.height(), a.width());
        let err = self.penalty.field(a, b);
        let mut out = Tensor::zeros(1, h, w);
        let scale = T::one() / T::lit(self.factors.len() as f64);
        for f in self.effective_factors(h, w) {
            let level = err.avg_pool(f).resize_bilinear(h, w);
            for (o, v) in out.data.iter_mut().zip(level.data) {
                *o += v * scale;
            }
        }
        out
    }

    fn map_vjp(&self, a: &Image<T>, b: &Image<T>, d_map: &Tensor<T>) -> Tensor<T> {
        let (h, w) = (a.height(), a.width());
        let scale = T::one() / T::lit(self.factors.len() as f64);
        let mut d_err = Tensor::zeros(1, h, w);
        for f in self.effective_factors(h, w) {
            let pooled = d_map.resize_bilinear_adjoint(h / f, w / f).avg_pool_adjoint(f);
            for (o, v) in d_err.data.iter_mut().zip(pooled.data) {
                *o += v * scale;
            }
        }
        self.penalty.field_vjp(a, b, &d_err)
    }
}

/// Per-pixel Charbonnier distance `sqrt(d² + ε²) − ε`, channel-averaged.
#[derive(Clone, Debug, PartialEq)]
pub struct PointwiseOracle {
    pub eps: f64,
}

impl Default for PointwiseOracle {
    fn default() -> Self {
        Self { eps: 1e-3 }
    }
}

impl<T: Real> PerceptualOracle<T> for PointwiseOracle {
    fn name(&self) -> &str {
        "pointwise"
    }

    fn distance_map(&self, a: &Image<T>, b: &Image<T>) -> Tensor<T> {
        let eps = T::lit(self.eps);
        let third = T::one() / T::lit(3.0);
        let mut out = Tensor::zeros(1, a.height(), a.width());
        for c in 0..3 {
            for ((o, &x), &y) in out.data.iter_mut().zip(a.tensor().plane(c)).zip(b.tensor().plane(c)) {
                let d = x - y;
                *o += ((d * d + eps * eps).sqrt() - eps) * third;
            }
        }
        out
    }

    fn map_vjp(&self, a: &Image<T>, b: &Image<T>, d_map: &Tensor<T>) -> Tensor<T> {
        let eps = T::lit(self.eps);
        let third = T::one() / T::lit(3.0);
        let mut out = Tensor::zeros(3, a.height(), a.width());
        for c in 0..3 {
            let pa = a.tensor().plane(c);
            let pb = b.tensor().plane(c);
            for (((o, &x), &y), &g) in out.plane_mut(c).iter_mut().zip(pa).zip(pb).zip(&d_map.data) {
                let d = x - y;
                *o = if g == T::zero() {
                    T::zero()
                } else {
                    g * third * d / (d * d + eps * eps).sqrt()
                };
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> (Image<f64>, Image<f64>) {
        let a = Image::from_fn(16, 16, |c, y, x| ((c * 13 + y * 5 + x * 3) as f64 * 0.21).sin());
        let b = Image::from_fn(16, 16, |c, y, x| ((c * 7 + y * 11 + x) as f64 * 0.17).cos() * 0.5);
        (a, b)
    }

    fn check_vjp(oracle: &dyn PerceptualOracle<f64>) {
        let (a, b) = pair();
        let d_map = {
            let m = oracle.distance_map(&a, &b);
            let mut t = Tensor::zeros(1, m.height, m.width);
            for (i, v) in t.data.iter_mut().enumerate() {
                *v = ((i * 37 % 11) as f64) / 11.0;
            }
            t
        };
        let grad = oracle.map_vjp(&a, &b, &d_map);
        let f = |img: &Image<f64>| -> f64 {
            let m = oracle.distance_map(img, &b);
            m.data.iter().zip(&d_map.data).map(|(x, y)| x * y).sum()
        };
        for &(c, y, x) in &[(0, 0, 0), (1, 5, 9), (2, 15, 15), (0, 7, 8), (2, 3, 12)] {
            let h = 1e-5;
            let mut p = a.clone();
            p.set(c, y, x, a.at(c, y, x) + h);
            let mut m = a.clone();
            m.set(c, y, x, a.at(c, y, x) - h);
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let an = grad.at(c, y, x);
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                "{c},{y},{x}: fd {fd} vs {an}"
            );
        }
    }

    #[test]
    fn pyramid_vjp_matches_finite_differences() {
        check_vjp(&PyramidOracle::default());
    }

    #[test]
    fn robust_pyramid_vjp_matches_finite_differences() {
        check_vjp(&PyramidOracle::robust());
        check_vjp(&PyramidOracle::with_penalty(
            vec![2, 4, 8],
            Penalty::Welsch { scale: 0.5 },
        ));
    }

    #[test]
    fn pointwise_vjp_matches_finite_differences() {
        check_vjp(&PointwiseOracle::default());
    }

    #[test]
    fn oracles_are_symmetric_and_zero_on_identical_inputs() {
        let (a, b) = pair();
        let oracles: [&dyn PerceptualOracle<f64>; 3] = [
            &PyramidOracle::default(),
            &PyramidOracle::robust(),
            &PointwiseOracle::default(),
        ];
        for o in oracles {
            assert_eq!(o.distance(&a, &a), 0.0);
            let ab = o.distance(&a, &b);
            let ba = o.distance(&b, &a);
            assert!(ab > 0.0);
            assert!((ab - ba).abs() < 1e-12);
            let map = o.distance_map(&a, &b);
            let mean: f64 = map.data.iter().sum::<f64>() / map.data.len() as f64;
            assert!((mean - ab).abs() < 1e-12);
        }
    }
}
