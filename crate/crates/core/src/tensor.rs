//! Dense channel-major rasters: the generic [`Tensor`], the RGB [`Image`],
//! generator [`FeatureMap`]s and the binary [`DomainMask`].

use crate::error::{Error, Result};
use crate::real::Real;

/// A `channels × height × width` grid stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "tensor data has {} values, expected {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_shape(&self, other: &Tensor<T>) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: crate::real::cast_slice(&self.data),
        }
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample_nearest2(&self) -> Tensor<T> {
        let (h, w) = (self.height, self.width);
        let mut out = Tensor::zeros(self.channels, 2 * h, 2 * w);
        for c in 0..self.channels {
            let src = self.plane(c);
            let dst = out.plane_mut(c);
            for y in 0..2 * h {
                let row = &src[(y / 2) * w..(y / 2 + 1) * w];
                let drow = &mut dst[y * 2 * w..(y + 1) * 2 * w];
                for (x, d) in drow.iter_mut().enumerate() {
                    *d = row[x / 2];
                }
            }
        }
        out
    }

    /// Adjoint of [`Tensor::upsample_nearest2`]: sums each 2×2 block.
    pub fn upsample_nearest2_adjoint(&self) -> Tensor<T> {
        let (h, w) = (self.height / 2, self.width / 2);
        let mut out = Tensor::zeros(self.channels, h, w);
        for c in 0..self.channels {
            let src = self.plane(c);
            let dst = out.plane_mut(c);
            for y in 0..2 * h {
                for x in 0..2 * w {
                    dst[(y / 2) * w + x / 2] += src[y * 2 * w + x];
                }
            }
        }
        out
    }

    /// Mean over channels, producing a single-channel tensor.
    pub fn channel_mean(&self) -> Tensor<T> {
        let mut out = Tensor::zeros(1, self.height, self.width);
        let scale = T::one() / T::lit(self.channels as f64);
        for c in 0..self.channels {
            for (o, &v) in out.data.iter_mut().zip(self.plane(c)) {
                *o += v;
            }
        }
        for o in &mut out.data {
            *o *= scale;
        }
        out
    }

    /// Average pooling with a square window of `factor` (must divide both sides).
    pub fn avg_pool(&self, factor: usize) -> Tensor<T> {
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = Tensor::zeros(self.channels, h, w);
        let scale = T::one() / T::lit((factor * factor) as f64);
        for c in 0..self.channels {
            let src = self.plane(c);
            let dst = out.plane_mut(c);
            for y in 0..h * factor {
                for x in 0..w * factor {
                    dst[(y / factor) * w + x / factor] += src[y * self.width + x];
                }
            }
            for d in dst.iter_mut() {
                *d *= scale;
            }
        }
        out
    }

    /// Adjoint of [`Tensor::avg_pool`].
    pub fn avg_pool_adjoint(&self, factor: usize) -> Tensor<T> {
        let (h, w) = (self.height * factor, self.width * factor);
        let mut out = Tensor::zeros(self.channels, h, w);
        let scale = T::one() / T::lit((factor * factor) as f64);
        for c in 0..self.channels {
            let src = self.plane(c);
            let dst = out.plane_mut(c);
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = src[(y / factor) * self.width + x / factor] * scale;
                }
            }
        }
        out
    }

    /// Bilinear resize with half-pixel centres and edge clamping.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Tensor<T> {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let ys = bilinear_taps(self.height, height);
        let xs = bilinear_taps(self.width, width);
        let mut out = Tensor::zeros(self.channels, height, width);
        for c in 0..self.channels {
            let src = self.plane(c);
            let dst = out.plane_mut(c);
            for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let fy = T::lit(fy);
                    let fx = T::lit(fx);
                    let top = src[y0 * self.width + x0] * (T::one() - fx) + src[y0 * self.width + x1] * fx;
                    let bot = src[y1 * self.width + x0] * (T::one() - fx) + src[y1 * self.width + x1] * fx;
                    dst[y * width + x] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        out
    }

    /// Adjoint of [`Tensor::resize_bilinear`] from `self`'s shape back to `height × width`.
    pub fn resize_bilinear_adjoint(&self, height: usize, width: usize) -> Tensor<T> {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let ys = bilinear_taps(height, self.height);
        let xs = bilinear_taps(width, self.width);
        let mut out = Tensor::zeros(self.channels, height, width);
        for c in 0..self.channels {
            let src = self.plane(c);
            let dst = out.plane_mut(c);
            for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let g = src[y * self.width + x];
                    let fy = T::lit(fy);
                    let fx = T::lit(fx);
                    dst[y0 * width + x0] += g * (T::one() - fy) * (T::one() - fx);
                    dst[y0 * width + x1] += g * (T::one() - fy) * fx;
                    dst[y1 * width + x0] += g * fy * (T::one() - fx);
                    dst[y1 * width + x1] += g * fy * fx;
                }
            }
        }
        out
    }
}

fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// An RGB raster with values nominally in `[-1, 1]`. Values are only clamped on export.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T = f32> {
    tensor: Tensor<T>,
}

impl<T: Real> Image<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        if tensor.channels != 3 {
            return Err(Error::Shape(format!("image needs 3 channels, got {}", tensor.channels)));
        }
        Ok(Self { tensor })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            tensor: Tensor::filled(3, height, width, value),
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut tensor = Tensor::zeros(3, height, width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    tensor.data[(c * height + y) * width + x] = f(c, y, x);
                }
            }
        }
        Self { tensor }
    }

    pub fn height(&self) -> usize {
        self.tensor.height
    }

    pub fn width(&self) -> usize {
        self.tensor.width
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<T> {
        &mut self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    pub fn data(&self) -> &[T] {
        &self.tensor.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.tensor.at(c, y, x)
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let (h, w) = (self.tensor.height, self.tensor.width);
        self.tensor.data[(c * h + y) * w + x] = v;
    }

    /// Copy with every value clamped into `[-1, 1]`.
    pub fn clamped(&self) -> Self {
        let mut out = self.clone();
        for v in &mut out.tensor.data {
            *v = v.max(-T::one()).min(T::one());
        }
        out
    }

    pub fn cast<U: Real>(&self) -> Image<U> {
        Image {
            tensor: self.tensor.cast(),
        }
    }

    pub fn checksum(&self) -> String {
        crate::real::checksum(&self.tensor.data)
    }

    pub fn ensure_same_size(&self, other: &Image<T>, what: &str) -> Result<()> {
        if self.height() != other.height() || self.width() != other.width() {
            return Err(Error::Argument(format!(
                "{what}: resolution mismatch {}x{} vs {}x{}",
                self.height(),
                self.width(),
                other.height(),
                other.width()
            )));
        }
        Ok(())
    }
}

/// An intermediate generator activation at a given layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f32> {
    pub layer: usize,
    pub tensor: Tensor<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn channels(&self) -> usize {
        self.tensor.channels
    }

    pub fn height(&self) -> usize {
        self.tensor.height
    }

    pub fn width(&self) -> usize {
        self.tensor.width
    }

    pub fn checksum(&self) -> String {
        crate::real::checksum(&self.tensor.data)
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            layer: self.layer,
            tensor: self.tensor.cast(),
        }
    }
}

/// Binary `H × W` map: 1 = in-domain, 0 = out-of-domain.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DomainMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl DomainMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Argument(format!("mask value {bad} is not binary")));
        }
        Ok(Self { height, width, data })
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn is_in(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn count_in(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn count_out(&self) -> usize {
        self.data.len() - self.count_in()
    }

    pub fn inverted(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }
}
