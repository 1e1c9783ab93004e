use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::toy::{ForwardPass, Gradients, Injection, ParamGroup, ToyGenerator, Wants};
use crate::error::{Error, Result};
use crate::latent::{LatentCode, LatentSpace};
use crate::real::Real;
use crate::tensor::{DomainMask, FeatureMap, Image, Tensor};

/// Which base weights a per-image deviation may touch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneScope {
    /// Synthesis convolutions (including to-RGB) only.
    #[default]
    Convolutions,
    /// Convolutions plus the per-layer style affines.
    ConvolutionsAndStyles,
}

impl TuneScope {
    fn covers(self, group: ParamGroup) -> bool {
        match self {
            TuneScope::Convolutions => group == ParamGroup::Conv,
            TuneScope::ConvolutionsAndStyles => matches!(group, ParamGroup::Conv | ParamGroup::Style),
        }
    }
}

/// Base generator plus a trainable weight deviation and an injection layer.
///
/// Effective weights are `base + delta`; the deviation starts at zero.
#[derive(Clone, Debug)]
pub struct GeneratorState<T = f32> {
    generator: Arc<ToyGenerator<T>>,
    delta: Vec<T>,
    inject_layer: usize,
    scope: TuneScope,
}

impl<T: Real> GeneratorState<T> {
    pub fn new(generator: Arc<ToyGenerator<T>>, inject_layer: usize) -> Result<Self> {
        let n = generator.n_layers();
        if inject_layer >= n {
            return Err(Error::Config(format!(
                "inject layer {inject_layer} out of range for {n} layers"
            )));
        }
        let res = generator.layer_resolutions()[inject_layer];
        if !generator.output_resolution().is_multiple_of(res) {
            return Err(Error::Config(format!(
                "inject layer resolution {res} does not divide output resolution"
            )));
        }
        let delta = vec![T::zero(); generator.n_params()];
        Ok(Self {
            generator,
            delta,
            inject_layer,
            scope: TuneScope::default(),
        })
    }

    /// Toy generator from a seed with the default injection layer (half depth).
    pub fn toy(config: super::ToyConfig) -> Result<Self> {
        let inject = config.n_layers() / 2;
        Self::new(Arc::new(ToyGenerator::new(config)?), inject)
    }

    pub fn with_scope(mut self, scope: TuneScope) -> Self {
        self.scope = scope;
        self
    }

    pub fn with_inject_layer(self, layer: usize) -> Result<Self> {
        let mut out = Self::new(self.generator, layer)?;
        out.delta = self.delta;
        out.scope = self.scope;
        Ok(out)
    }

    pub fn generator(&self) -> &Arc<ToyGenerator<T>> {
        &self.generator
    }

    pub fn inject_layer(&self) -> usize {
        self.inject_layer
    }

    pub fn scope(&self) -> TuneScope {
        self.scope
    }

    pub fn n_layers(&self) -> usize {
        self.generator.n_layers()
    }

    pub fn d_latent(&self) -> usize {
        self.generator.d_latent()
    }

    pub fn output_resolution(&self) -> usize {
        self.generator.output_resolution()
    }

    pub fn layer_resolutions(&self) -> Vec<usize> {
        self.generator.layer_resolutions()
    }

    /// Spatial size of the feature at the injection layer.
    pub fn inject_resolution(&self) -> usize {
        self.generator.layer_resolutions()[self.inject_layer]
    }

    pub fn delta(&self) -> &[T] {
        &self.delta
    }

    pub fn set_delta(&mut self, delta: Vec<T>) -> Result<()> {
        if delta.len() != self.delta.len() {
            return Err(Error::Shape(format!(
                "deviation has {} values, expected {}",
                delta.len(),
                self.delta.len()
            )));
        }
        self.delta = delta;
        Ok(())
    }

    pub fn delta_checksum(&self) -> String {
        crate::real::checksum(&self.delta)
    }

    pub fn reset_delta(&mut self) {
        self.delta.iter_mut().for_each(|v| *v = T::zero());
    }

    /// Index ranges of the flat weight vector the deviation may change.
    pub fn tunable_ranges(&self) -> Vec<std::ops::Range<usize>> {
        self.generator
            .entries()
            .iter()
            .filter(|e| self.scope.covers(e.group))
            .map(|e| e.offset..e.offset + e.len)
            .collect()
    }

    pub(crate) fn delta_mut(&mut self) -> &mut [T] {
        &mut self.delta
    }

    pub fn effective_weights(&self) -> Vec<T> {
        self.generator
            .weights()
            .iter()
            .zip(&self.delta)
            .map(|(&b, &d)| b + d)
            .collect()
    }

    /// Same generator, deviation and injection layer in another scalar type.
    pub fn cast<U: Real>(&self) -> GeneratorState<U> {
        GeneratorState {
            generator: Arc::new(self.generator.cast()),
            delta: crate::real::cast_slice(&self.delta),
            inject_layer: self.inject_layer,
            scope: self.scope,
        }
    }

    /// Validates `w` against the bound generator and returns one W row per layer.
    pub fn style_rows(&self, w: &LatentCode<T>) -> Result<Vec<Vec<T>>> {
        let d = self.d_latent();
        if w.dim() != d {
            return Err(Error::Config(format!(
                "latent dimension {} does not match generator dimension {d}",
                w.dim()
            )));
        }
        let n = self.n_layers();
        match w.space() {
            LatentSpace::Z => Ok(vec![self.generator.map(w.row(0)); n]),
            LatentSpace::W => Ok(vec![w.row(0).to_vec(); n]),
            LatentSpace::Wplus => {
                if w.rows() != n {
                    return Err(Error::Config(format!(
                        "W+ code has {} rows, generator has {n} style layers",
                        w.rows()
                    )));
                }
                Ok((0..n).map(|r| w.row(r).to_vec()).collect())
            }
        }
    }

    /// Maps a Z code to W; W and W+ codes pass through.
    pub fn to_w(&self, code: &LatentCode<T>) -> Result<LatentCode<T>> {
        match code.space() {
            LatentSpace::Z => {
                if code.dim() != self.d_latent() {
                    return Err(Error::Config("Z dimension mismatch".into()));
                }
                Ok(LatentCode::w(self.generator.map(code.row(0))))
            }
            _ => Ok(code.clone()),
        }
    }

    pub fn synthesize(&self, w: &LatentCode<T>) -> Result<Image<T>> {
        let rows = self.style_rows(w)?;
        let weights = self.effective_weights();
        let pass = self.generator.forward(&weights, &refs(&rows), None, None);
        Image::new(pass.output)
    }

    fn check_injection(&self, f: &FeatureMap<T>, m_feat: &DomainMask) -> Result<()> {
        let l = self.inject_layer;
        if f.layer != l {
            return Err(Error::Config(format!(
                "feature is from layer {}, state injects at layer {l}",
                f.layer
            )));
        }
        let res = self.inject_resolution();
        let ch = self.generator.layer_channels(l);
        if f.height() != res || f.width() != res || f.channels() != ch {
            return Err(Error::Config(format!(
                "feature shape {}x{}x{} does not match layer {l} ({ch}x{res}x{res})",
                f.channels(),
                f.height(),
                f.width()
            )));
        }
        if m_feat.height() != res || m_feat.width() != res {
            return Err(Error::Config(format!(
                "feature mask is {}x{}, feature is {res}x{res}",
                m_feat.height(),
                m_feat.width()
            )));
        }
        Ok(())
    }

    /// Runs the first layers, blends their output with `f` under `m_feat`
    /// (1 keeps the generator's own feature) and finishes the synthesis.
    pub fn synthesize_with_injection(
        &self,
        w: &LatentCode<T>,
        f: &FeatureMap<T>,
        m_feat: &DomainMask,
    ) -> Result<Image<T>> {
        self.check_injection(f, m_feat)?;
        let rows = self.style_rows(w)?;
        let weights = self.effective_weights();
        let pass = self.generator.forward(
            &weights,
            &refs(&rows),
            Some(Injection {
                layer: self.inject_layer,
                feature: &f.tensor,
                mask: m_feat,
            }),
            None,
        );
        Image::new(pass.output)
    }

    /// The generator's own output at the injection layer.
    pub fn tap_feature(&self, w: &LatentCode<T>) -> Result<FeatureMap<T>> {
        self.tap_layer(w, self.inject_layer)
    }

    pub fn tap_layer(&self, w: &LatentCode<T>, layer: usize) -> Result<FeatureMap<T>> {
        if layer >= self.n_layers() {
            return Err(Error::Config(format!("layer {layer} out of range")));
        }
        let rows = self.style_rows(w)?;
        let weights = self.effective_weights();
        let pass = self.generator.forward(&weights, &refs(&rows), None, Some(layer));
        Ok(FeatureMap {
            layer,
            tensor: pass.output,
        })
    }

    /// The blended feature `f'` that feeds the layers after the injection point.
    pub fn blended_feature(&self, w: &LatentCode<T>, f: &FeatureMap<T>, m_feat: &DomainMask) -> Result<FeatureMap<T>> {
        self.check_injection(f, m_feat)?;
        let own = self.tap_feature(w)?;
        Ok(FeatureMap {
            layer: self.inject_layer,
            tensor: super::toy::blend(&own.tensor, &f.tensor, m_feat),
        })
    }

    /// Empirical mean of `n_samples` mapped standard-normal Z samples.
    pub fn mean_latent(&self, n_samples: usize, seed: u64) -> Result<LatentCode<T>> {
        if n_samples == 0 {
            return Err(Error::Argument("mean_latent needs at least one sample".into()));
        }
        let d = self.d_latent();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = vec![0.0f64; d];
        for _ in 0..n_samples {
            let z = sample_z::<T>(&mut rng, d);
            for (a, v) in acc.iter_mut().zip(self.generator.map(&z)) {
                *a += v.as_f64();
            }
        }
        let n = n_samples as f64;
        Ok(LatentCode::w(acc.into_iter().map(|v| T::lit(v / n)).collect()))
    }

    /// Forward pass that keeps every intermediate needed by [`GeneratorState::backprop`].
    pub fn trace(&self, w: &LatentCode<T>, injection: Option<(&FeatureMap<T>, &DomainMask)>) -> Result<Trace<T>> {
        let rows = self.style_rows(w)?;
        let weights = self.effective_weights();
        let pass = self.forward_pass(&weights, &rows, injection)?;
        Ok(Trace {
            weights,
            rows,
            pass,
            latent: w.clone(),
        })
    }

    /// Vector-Jacobian product of a traced pass with `d_out` (shaped like the output image).
    ///
    /// The latent gradient has the shape of the traced code (W: one row,
    /// W+: one row per layer) and is `None` for Z codes. Parameter gradients
    /// cover the whole flat weight vector.
    pub fn backprop(&self, trace: &Trace<T>, d_out: &Tensor<T>, wants: Wants) -> Gradients<T> {
        let mut grads = self.backward(&trace.weights, &trace.rows, &trace.pass, d_out, wants);
        if let Some(g) = grads.latent.take() {
            if trace.latent.space() != LatentSpace::Z {
                grads.latent = Some(reduce_latent_grad(&trace.latent, &g));
            }
        }
        grads
    }

    /// Forward pass retaining intermediates for [`GeneratorState::backward`].
    pub(crate) fn forward_pass(
        &self,
        weights: &[T],
        rows: &[Vec<T>],
        injection: Option<(&FeatureMap<T>, &DomainMask)>,
    ) -> Result<ForwardPass<T>> {
        if let Some((f, m)) = injection {
            self.check_injection(f, m)?;
        }
        Ok(self.generator.forward(
            weights,
            &refs(rows),
            injection.map(|(f, m)| Injection {
                layer: self.inject_layer,
                feature: &f.tensor,
                mask: m,
            }),
            None,
        ))
    }

    pub(crate) fn backward(
        &self,
        weights: &[T],
        rows: &[Vec<T>],
        pass: &ForwardPass<T>,
        d_out: &Tensor<T>,
        wants: Wants,
    ) -> Gradients<T> {
        self.generator.backward(weights, &refs(rows), pass, d_out, wants)
    }

    /// Zeroes gradient entries the deviation is not allowed to change.
    pub(crate) fn restrict_to_tunable(&self, grad: &mut [T]) {
        let mut keep = vec![false; grad.len()];
        for r in self.tunable_ranges() {
            keep[r].iter_mut().for_each(|k| *k = true);
        }
        for (g, k) in grad.iter_mut().zip(keep) {
            if !k {
                *g = T::zero();
            }
        }
    }
}

/// A recorded forward pass.
pub struct Trace<T> {
    weights: Vec<T>,
    rows: Vec<Vec<T>>,
    pass: ForwardPass<T>,
    latent: LatentCode<T>,
}

impl<T: Real> Trace<T> {
    pub fn output(&self) -> Image<T> {
        Image::new(self.pass.output.clone()).expect("generator emits RGB")
    }

    /// The generator's own (unblended) feature at the injection layer.
    pub fn own_feature(&self) -> Option<&Tensor<T>> {
        self.pass.own_feature()
    }
}

/// Draws one standard-normal Z vector.
pub fn sample_z<T: Real>(rng: &mut ChaCha8Rng, d: usize) -> Vec<T> {
    (0..d)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::lit(v)
        })
        .collect()
}

fn refs<T>(rows: &[Vec<T>]) -> Vec<&[T]> {
    rows.iter().map(|r| r.as_slice()).collect()
}

/// Reduces per-layer latent gradients to the shape of `w`.
fn reduce_latent_grad<T: Real>(w: &LatentCode<T>, per_layer: &[T]) -> Vec<T> {
    let d = w.dim();
    match w.space() {
        LatentSpace::Wplus => per_layer.to_vec(),
        _ => {
            let mut out = vec![T::zero(); d];
            for row in per_layer.chunks(d) {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            out
        }
    }
}
