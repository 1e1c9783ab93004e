//! A small, deterministic style-based generator with hand-written reverse-mode
//! gradients.
//!
//! Layout for the default four stages:
//!
//! ```text
//! const 4x4xC
//! layer 0  conv3x3                 4x4
//! layer 1  upsample x2, conv3x3    8x8
//! layer 2  conv3x3                 8x8
//! layer 3  upsample x2, conv3x3    16x16
//! layer 4  conv3x3                 16x16
//! layer 5  upsample x2, conv3x3    32x32
//! layer 6  conv3x3                 32x32
//! layer 7  to-RGB conv1x1          32x32x3
//! ```
//!
//! Every layer consumes one style row: `s = A w + b`, which scales the
//! layer's input channels before the convolution. Convolution layers are
//! followed by SiLU; the to-RGB layer is linear.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{DomainMask, Tensor};

/// Resolution of the learned constant input.
pub const CONST_RESOLUTION: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MappingHead {
    /// Two affine layers with a leaky-ReLU in between.
    Mlp,
    /// `w = z`.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub seed: u64,
    pub d_latent: usize,
    pub channels: usize,
    pub stages: usize,
    pub mapping: MappingHead,
    /// Standard deviation of `A w` for unit-scale `w`.
    pub style_strength: f64,
    /// Scale of the mapping head's output layer. Together with
    /// `style_strength` it sets how far apart W codes of different images
    /// lie; only their product affects the image distribution.
    pub mapping_gain: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            d_latent: 64,
            channels: 48,
            stages: 4,
            mapping: MappingHead::Mlp,
            style_strength: 1.5,
            mapping_gain: 0.17,
        }
    }
}

impl ToyConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn n_layers(&self) -> usize {
        2 * self.stages
    }

    pub fn output_resolution(&self) -> usize {
        CONST_RESOLUTION << (self.stages - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Mapping,
    Const,
    Style,
    Conv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    pub group: ParamGroup,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub upsample: bool,
    pub activate: bool,
    pub resolution: usize,
    pub style_w: usize,
    pub style_b: usize,
    pub conv_w: usize,
    pub conv_b: usize,
}

/// The immutable base network: architecture, parameter layout and weights.
#[derive(Clone, Debug)]
pub struct ToyGenerator<T = f32> {
    config: ToyConfig,
    pub(crate) layers: Vec<LayerSpec>,
    entries: Vec<ParamEntry>,
    weights: Vec<T>,
    mapping: [usize; 4],
    constant: usize,
}

fn build_layout(config: &ToyConfig) -> (Vec<ParamEntry>, Vec<LayerSpec>, [usize; 4], usize) {
    let d = config.d_latent;
    let c = config.channels;
    let mut entries = Vec::new();
    let mut offset = 0usize;
    let mut push = |name: String, shape: Vec<usize>, group: ParamGroup| {
        let len = shape.iter().product();
        entries.push(ParamEntry {
            name,
            shape,
            offset,
            len,
            group,
        });
        offset += len;
        offset - len
    };
    let mapping = [
        push("mapping.0.weight".into(), vec![d, d], ParamGroup::Mapping),
        push("mapping.0.bias".into(), vec![d], ParamGroup::Mapping),
        push("mapping.1.weight".into(), vec![d, d], ParamGroup::Mapping),
        push("mapping.1.bias".into(), vec![d], ParamGroup::Mapping),
    ];
    let constant = push(
        "synthesis.const".into(),
        vec![c, CONST_RESOLUTION, CONST_RESOLUTION],
        ParamGroup::Const,
    );
    let n_layers = config.n_layers();
    let mut layers = Vec::with_capacity(n_layers);
    let mut resolution = CONST_RESOLUTION;
    for l in 0..n_layers {
        let to_rgb = l == n_layers - 1;
        let upsample = !to_rgb && l % 2 == 1;
        if upsample {
            resolution *= 2;
        }
        let (out_ch, kernel) = if to_rgb { (3, 1) } else { (c, 3) };
        let style_w = push(format!("synthesis.{l}.style.weight"), vec![c, d], ParamGroup::Style);
        let style_b = push(format!("synthesis.{l}.style.bias"), vec![c], ParamGroup::Style);
        let conv_w = push(
            format!("synthesis.{l}.conv.weight"),
            vec![out_ch, c, kernel, kernel],
            ParamGroup::Conv,
        );
        let conv_b = push(format!("synthesis.{l}.conv.bias"), vec![out_ch], ParamGroup::Conv);
        layers.push(LayerSpec {
            in_ch: c,
            out_ch,
            kernel,
            upsample,
            activate: !to_rgb,
            resolution,
            style_w,
            style_b,
            conv_w,
            conv_b,
        });
    }
    (entries, layers, mapping, constant)
}

impl<T: Real> ToyGenerator<T> {
    /// Builds the generator with weights drawn deterministically from `config.seed`.
    pub fn new(config: ToyConfig) -> Result<Self> {
        validate_config(&config)?;
        let (entries, layers, mapping, constant) = build_layout(&config);
        let total = entries.last().map(|e| e.offset + e.len).unwrap_or(0);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut weights = vec![T::zero(); total];
        let n_layers = layers.len();
        let out_gain = |e: &ParamEntry| {
            if e.name.starts_with("mapping.1.") {
                config.mapping_gain
            } else {
                1.0
            }
        };
        for entry in &entries {
            let fan_in = match entry.group {
                ParamGroup::Mapping | ParamGroup::Style => config.d_latent,
                ParamGroup::Conv => entry.shape[1..].iter().product::<usize>().max(1),
                ParamGroup::Const => 1,
            } as f64;
            let is_bias = entry.name.ends_with("bias");
            let is_rgb = entry.name.starts_with(&format!("synthesis.{}.", n_layers - 1));
            let (mean, std) = match (entry.group, is_bias) {
                (ParamGroup::Mapping, false) => (0.0, out_gain(entry) / fan_in.sqrt()),
                (ParamGroup::Mapping, true) => (0.0, 0.1 * out_gain(entry)),
                (ParamGroup::Const, _) => (0.0, 1.0),
                (ParamGroup::Style, false) => (0.0, config.style_strength / fan_in.sqrt()),
                (ParamGroup::Style, true) => (1.0, 0.0),
                (ParamGroup::Conv, false) if is_rgb => (0.0, 1.0 / fan_in.sqrt()),
                (ParamGroup::Conv, false) => (0.0, 1.6 / fan_in.sqrt()),
                (ParamGroup::Conv, true) => (0.0, 0.1),
            };
            for v in &mut weights[entry.offset..entry.offset + entry.len] {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v = T::lit(mean + std * n);
            }
        }
        Ok(Self {
            config,
            layers,
            entries,
            weights,
            mapping,
            constant,
        })
    }

    /// Per-parameter step multipliers of an equalized-learning-rate
    /// parametrization: `1/sqrt(fan_in)` for convolution and style weights,
    /// 1 for biases and the constant.
    ///
    /// An optimizer step of size `lr` on a weight stored at unit scale moves
    /// the effective weight by `lr/sqrt(fan_in)`.
    pub fn lr_scales(&self) -> Vec<f64> {
        let mut scales = vec![1.0; self.weights.len()];
        for e in &self.entries {
            if e.name.ends_with("bias") {
                continue;
            }
            let fan_in = match e.group {
                ParamGroup::Conv => e.shape[1..].iter().product::<usize>().max(1),
                ParamGroup::Style | ParamGroup::Mapping => self.config.d_latent,
                ParamGroup::Const => 1,
            } as f64;
            scales[e.offset..e.offset + e.len].fill(1.0 / fan_in.sqrt());
        }
        scales
    }

    /// Reassembles a generator from a configuration and a flat weight vector.
    pub fn from_weights(config: ToyConfig, weights: Vec<T>) -> Result<Self> {
        validate_config(&config)?;
        let (entries, layers, mapping, constant) = build_layout(&config);
        let total = entries.last().map(|e| e.offset + e.len).unwrap_or(0);
        if weights.len() != total {
            return Err(Error::Config(format!(
                "weight vector has {} values, architecture needs {total}",
                weights.len()
            )));
        }
        Ok(Self {
            config,
            layers,
            entries,
            weights,
            mapping,
            constant,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn n_params(&self) -> usize {
        self.weights.len()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn d_latent(&self) -> usize {
        self.config.d_latent
    }

    pub fn layer_resolutions(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.resolution).collect()
    }

    pub fn layer_channels(&self, layer: usize) -> usize {
        self.layers[layer].out_ch
    }

    pub fn output_resolution(&self) -> usize {
        self.layers.last().map(|l| l.resolution).unwrap_or(0)
    }

    /// SHA-256 over the configuration and base weights.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.config).unwrap_or_default());
        hasher.update(crate::real::checksum(&self.weights).as_bytes());
        hex::encode(hasher.finalize())
    }

    pub fn cast<U: Real>(&self) -> ToyGenerator<U> {
        ToyGenerator {
            config: self.config.clone(),
            layers: self.layers.clone(),
            entries: self.entries.clone(),
            weights: crate::real::cast_slice(&self.weights),
            mapping: self.mapping,
            constant: self.constant,
        }
    }

    /// Mapping head: Z → W.
    pub fn map(&self, z: &[T]) -> Vec<T> {
        match self.config.mapping {
            MappingHead::Identity => z.to_vec(),
            MappingHead::Mlp => {
                let d = self.config.d_latent;
                let w = &self.weights;
                let hidden = affine(&w[self.mapping[0]..], &w[self.mapping[1]..], z, d, d);
                let hidden: Vec<T> = hidden
                    .into_iter()
                    .map(|v| if v >= T::zero() { v } else { v * T::lit(0.2) })
                    .collect();
                affine(&w[self.mapping[2]..], &w[self.mapping[3]..], &hidden, d, d)
            }
        }
    }

    pub(crate) fn constant<'a>(&self, weights: &'a [T]) -> &'a [T] {
        let c = self.config.channels;
        &weights[self.constant..self.constant + c * CONST_RESOLUTION * CONST_RESOLUTION]
    }

    /// Forward pass through the synthesis network.
    ///
    /// `weights` are the effective weights (base plus deviation), `rows` yields
    /// one W row per layer. With `injection`, the output of layer `l` is
    /// replaced by the blend of itself and the supplied feature before layer
    /// `l + 1` runs. With `stop_after`, the pass ends after that layer.
    pub(crate) fn forward(
        &self,
        weights: &[T],
        rows: &[&[T]],
        injection: Option<Injection<'_, T>>,
        stop_after: Option<usize>,
    ) -> ForwardPass<T> {
        let c = self.config.channels;
        let mut x = Tensor::from_vec(c, CONST_RESOLUTION, CONST_RESOLUTION, self.constant(weights).to_vec())
            .expect("const shape");
        let last = stop_after.unwrap_or(self.layers.len() - 1);
        let mut caches = Vec::with_capacity(last + 1);
        let mut inject = None;
        for (l, spec) in self.layers.iter().enumerate().take(last + 1) {
            let d = self.config.d_latent;
            let style = affine(
                &weights[spec.style_w..],
                &weights[spec.style_b..],
                rows[l],
                spec.in_ch,
                d,
            );
            let mut conv_in = x.clone();
            for (ch, &s) in style.iter().enumerate().take(spec.in_ch) {
                for v in conv_in.plane_mut(ch) {
                    *v *= s;
                }
            }
            if spec.upsample {
                conv_in = conv_in.upsample_nearest2();
            }
            let pre = conv2d(
                &conv_in,
                &weights[spec.conv_w..spec.conv_w + spec.out_ch * spec.in_ch * spec.kernel * spec.kernel],
                &weights[spec.conv_b..spec.conv_b + spec.out_ch],
                spec.out_ch,
                spec.kernel,
            );
            let mut out = pre.clone();
            if spec.activate {
                for v in &mut out.data {
                    *v = silu(*v);
                }
            }
            caches.push(LayerCache {
                input: x,
                style,
                conv_in,
                pre,
            });
            x = out;
            if let Some(inj) = injection.as_ref().filter(|inj| inj.layer == l) {
                let blended = blend(&x, inj.feature, inj.mask);
                inject = Some(InjectRecord {
                    layer: l,
                    own: std::mem::replace(&mut x, blended.clone()),
                    mask: inj.mask.clone(),
                });
            }
        }
        ForwardPass {
            caches,
            output: x,
            inject,
        }
    }

    /// Reverse pass. `d_out` is the gradient with respect to the pass output.
    pub(crate) fn backward(
        &self,
        weights: &[T],
        rows: &[&[T]],
        pass: &ForwardPass<T>,
        d_out: &Tensor<T>,
        wants: Wants,
    ) -> Gradients<T> {
        let d = self.config.d_latent;
        let mut params = wants.params.then(|| vec![T::zero(); weights.len()]);
        let mut latent = wants.latent.then(|| vec![T::zero(); rows.len() * d]);
        let mut feature = None;
        let needs_full = wants.params || wants.latent;
        let mut g = d_out.clone();
        for l in (0..pass.caches.len()).rev() {
            if let Some(rec) = pass.inject.as_ref().filter(|r| r.layer == l) {
                let (own, injected) = split_blend_grad(&g, &rec.mask);
                if wants.feature {
                    feature = Some(injected);
                }
                g = own;
                if !needs_full {
                    break;
                }
            }
            let spec = &self.layers[l];
            let cache = &pass.caches[l];
            if spec.activate {
                for (gv, &p) in g.data.iter_mut().zip(&cache.pre.data) {
                    *gv *= silu_grad(p);
                }
            }
            let kk = spec.kernel * spec.kernel;
            let conv_w = &weights[spec.conv_w..spec.conv_w + spec.out_ch * spec.in_ch * kk];
            if let Some(pg) = params.as_mut() {
                let (dw, db) = conv2d_weight_grad(&cache.conv_in, &g, spec.out_ch, spec.kernel);
                for (dst, v) in pg[spec.conv_w..].iter_mut().zip(dw) {
                    *dst += v;
                }
                for (dst, v) in pg[spec.conv_b..].iter_mut().zip(db) {
                    *dst += v;
                }
            }
            let mut du = conv2d_input_grad(&g, conv_w, spec.in_ch, spec.kernel);
            if spec.upsample {
                du = du.upsample_nearest2_adjoint();
            }
            // du is now d(x * s); split into dx and ds.
            let mut ds = vec![T::zero(); spec.in_ch];
            let mut dx = du;
            for (ch, dsc) in ds.iter_mut().enumerate() {
                let xs = cache.input.plane(ch);
                let s = cache.style[ch];
                let plane = dx.plane_mut(ch);
                let mut acc = T::zero();
                for (gv, &xv) in plane.iter_mut().zip(xs) {
                    acc += *gv * xv;
                    *gv *= s;
                }
                *dsc = acc;
            }
            let row = rows[l];
            if let Some(pg) = params.as_mut() {
                for ch in 0..spec.in_ch {
                    let base = spec.style_w + ch * d;
                    for j in 0..d {
                        pg[base + j] += ds[ch] * row[j];
                    }
                    pg[spec.style_b + ch] += ds[ch];
                }
            }
            if let Some(lg) = latent.as_mut() {
                let sw = &weights[spec.style_w..spec.style_w + spec.in_ch * d];
                let dst = &mut lg[l * d..(l + 1) * d];
                for ch in 0..spec.in_ch {
                    let arow = &sw[ch * d..(ch + 1) * d];
                    for j in 0..d {
                        dst[j] += arow[j] * ds[ch];
                    }
                }
            }
            g = dx;
        }
        if let Some(pg) = params.as_mut() {
            let n = g.data.len();
            for (dst, &v) in pg[self.constant..self.constant + n].iter_mut().zip(&g.data) {
                *dst += v;
            }
        }
        Gradients {
            params,
            latent,
            feature,
        }
    }
}

fn validate_config(config: &ToyConfig) -> Result<()> {
    if !(config.mapping_gain > 0.0 && config.style_strength > 0.0) {
        return Err(Error::Config("mapping_gain and style_strength must be positive".into()));
    }
    if config.stages < 1 || config.stages > 8 {
        return Err(Error::Config(format!("stages must be in 1..=8, got {}", config.stages)));
    }
    if config.d_latent == 0 || config.channels == 0 {
        return Err(Error::Config("d_latent and channels must be positive".into()));
    }
    Ok(())
}

pub(crate) struct Injection<'a, T> {
    pub layer: usize,
    pub feature: &'a Tensor<T>,
    pub mask: &'a DomainMask,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Wants {
    pub params: bool,
    pub latent: bool,
    pub feature: bool,
}

#[derive(Clone, Debug)]
pub struct Gradients<T> {
    /// Gradient over the full flat weight vector (mapping entries stay zero).
    pub params: Option<Vec<T>>,
    /// One row per layer, `n_layers × d_latent`.
    pub latent: Option<Vec<T>>,
    /// Gradient of the injected feature.
    pub feature: Option<Tensor<T>>,
}

pub(crate) struct LayerCache<T> {
    input: Tensor<T>,
    style: Vec<T>,
    conv_in: Tensor<T>,
    pre: Tensor<T>,
}

pub(crate) struct InjectRecord<T> {
    layer: usize,
    own: Tensor<T>,
    mask: DomainMask,
}

pub(crate) struct ForwardPass<T> {
    caches: Vec<LayerCache<T>>,
    pub output: Tensor<T>,
    inject: Option<InjectRecord<T>>,
}

impl<T: Real> ForwardPass<T> {
    /// The generator's own feature at the injection layer, before blending.
    pub fn own_feature(&self) -> Option<&Tensor<T>> {
        self.inject.as_ref().map(|r| &r.own)
    }
}

/// `f' = f_l ⊙ m + f ⊙ (1 − m)` for a binary mask broadcast over channels.
///
/// Implemented as a per-pixel selection, which equals the arithmetic form for
/// finite values and keeps both branches bit-exact.
pub fn blend<T: Real>(own: &Tensor<T>, injected: &Tensor<T>, mask: &DomainMask) -> Tensor<T> {
    let mut out = own.clone();
    let m = mask.data();
    for ch in 0..own.channels {
        let src = injected.plane(ch);
        for ((o, &keep), &s) in out.plane_mut(ch).iter_mut().zip(m).zip(src) {
            if keep == 0 {
                *o = s;
            }
        }
    }
    out
}

/// Routes the gradient of a blended feature to (own, injected).
fn split_blend_grad<T: Real>(g: &Tensor<T>, mask: &DomainMask) -> (Tensor<T>, Tensor<T>) {
    let mut own = g.clone();
    let mut injected = g.clone();
    let m = mask.data();
    for ch in 0..g.channels {
        for ((o, i), &keep) in own.plane_mut(ch).iter_mut().zip(injected.plane_mut(ch)).zip(m) {
            if keep == 1 {
                *i = T::zero();
            } else {
                *o = T::zero();
            }
        }
    }
    (own, injected)
}

fn affine<T: Real>(weight: &[T], bias: &[T], x: &[T], rows: usize, cols: usize) -> Vec<T> {
    (0..rows)
        .map(|r| {
            let row = &weight[r * cols..(r + 1) * cols];
            let mut acc = bias[r];
            for (a, b) in row.iter().zip(x) {
                acc += *a * *b;
            }
            acc
        })
        .collect()
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// Same-padded 2D convolution (cross-correlation), odd kernel.
fn conv2d<T: Real>(input: &Tensor<T>, weight: &[T], bias: &[T], out_ch: usize, k: usize) -> Tensor<T> {
    let (in_ch, h, w) = (input.channels, input.height, input.width);
    let n = h * w;
    let cols = im2col(input, k);
    let taps = in_ch * k * k;
    let mut out = Tensor::zeros(out_ch, h, w);
    out.data.par_chunks_mut(n).enumerate().for_each(|(o, plane)| {
        plane.iter_mut().for_each(|v| *v = bias[o]);
        for (j, col) in cols.chunks_exact(n).enumerate() {
            let wv = weight[o * taps + j];
            for (d, &s) in plane.iter_mut().zip(col) {
                *d += wv * s;
            }
        }
    });
    out
}

/// Stacks the `k × k` zero-padded shifts of every input plane, one plane per tap.
///
/// Tap `(i, ky, kx)` holds `input[i, y + ky - pad, x + kx - pad]` at `(y, x)`.
fn im2col<T: Real>(input: &Tensor<T>, k: usize) -> Vec<T> {
    let (in_ch, h, w) = (input.channels, input.height, input.width);
    let pad = k / 2;
    let n = h * w;
    let mut cols = vec![T::zero(); in_ch * k * k * n];
    cols.par_chunks_mut(n).enumerate().for_each(|(j, col)| {
        let (i, ky, kx) = (j / (k * k), (j / k) % k, j % k);
        shift_into(input.plane(i), col, h, w, ky, kx, pad);
    });
    cols
}

/// `dst[y, x] = src[y + ky - pad, x + kx - pad]` where that lands inside `src`.
#[inline]
fn shift_into<T: Real>(src: &[T], dst: &mut [T], h: usize, w: usize, ky: usize, kx: usize, pad: usize) {
    let (y0, y1) = valid_range(ky, pad, h);
    let (x0, x1) = valid_range(kx, pad, w);
    for y in y0..y1 {
        let sy = y + ky - pad;
        dst[y * w + x0..y * w + x1].copy_from_slice(&src[sy * w + x0 + kx - pad..sy * w + x1 + kx - pad]);
    }
}

/// Output rows/cols whose tap `kk` lands inside the input.
#[inline]
fn valid_range(kk: usize, pad: usize, n: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kk);
    let hi = (n + pad).saturating_sub(kk).min(n);
    (lo, hi.max(lo))
}

fn conv2d_weight_grad<T: Real>(input: &Tensor<T>, g: &Tensor<T>, out_ch: usize, k: usize) -> (Vec<T>, Vec<T>) {
    let n = input.height * input.width;
    let cols = im2col(input, k);
    let taps = input.channels * k * k;
    let mut dw = vec![T::zero(); out_ch * taps];
    dw.par_chunks_mut(taps).enumerate().for_each(|(o, chunk)| {
        let gp = g.plane(o);
        for (dst, col) in chunk.iter_mut().zip(cols.chunks_exact(n)) {
            let mut acc = T::zero();
            for (&a, &b) in gp.iter().zip(col) {
                acc += a * b;
            }
            *dst = acc;
        }
    });
    let db = (0..out_ch).map(|o| g.plane(o).iter().copied().sum()).collect();
    (dw, db)
}

fn conv2d_input_grad<T: Real>(g: &Tensor<T>, weight: &[T], in_ch: usize, k: usize) -> Tensor<T> {
    let (out_ch, h, w) = (g.channels, g.height, g.width);
    let n = h * w;
    let pad = k / 2;
    let kk = k * k;
    // Tap `(o, ky, kx)` holds `g[o, y - ky + pad, x - kx + pad]`: the flipped shift.
    let mut gcols = vec![T::zero(); out_ch * kk * n];
    gcols.par_chunks_mut(n).enumerate().for_each(|(j, col)| {
        let (o, ky, kx) = (j / kk, (j / k) % k, j % k);
        shift_into(g.plane(o), col, h, w, k - 1 - ky, k - 1 - kx, pad);
    });
    let mut out = Tensor::zeros(in_ch, h, w);
    out.data.par_chunks_mut(n).enumerate().for_each(|(i, plane)| {
        for (j, col) in gcols.chunks_exact(n).enumerate() {
            let (o, t) = (j / kk, j % kk);
            let wv = weight[(o * in_ch + i) * kk + t];
            for (d, &gv) in plane.iter_mut().zip(col) {
                *d += wv * gv;
            }
        }
    });
    out
}
