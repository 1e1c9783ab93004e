//! Hybrid refinement: generator weights are tuned on in-domain pixels while
//! the injected feature is optimized on out-of-domain pixels, both from one
//! shared forward pass per step.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::generator::{GeneratorState, Trace, Wants};
use crate::latent::LatentCode;
use crate::metrics::perceptual::{squared_error_field, squared_error_field_vjp};
use crate::metrics::PerceptualOracle;
use crate::optim::{Adam, AdamConfig};
use crate::real::Real;
use crate::tensor::{DomainMask, FeatureMap, Image, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineConfig {
    pub lr_theta: f64,
    pub lr_feature: f64,
    pub steps_feature: usize,
    /// Weight updates stop after this many steps.
    pub steps_theta: usize,
    /// Weight of the perceptual term in the per-pixel loss.
    pub lambda: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            lr_theta: 0.0015,
            lr_feature: 0.09,
            steps_feature: 100,
            steps_theta: 50,
            lambda: 1.0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_theta > self.steps_feature {
            return Err(Error::Config(format!(
                "steps_theta ({}) exceeds steps_feature ({})",
                self.steps_theta, self.steps_feature
            )));
        }
        if !(self.lr_theta > 0.0 && self.lr_feature > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    In,
    Out,
}

impl Region {
    pub fn name(self) -> &'static str {
        match self {
            Region::In => "in-domain",
            Region::Out => "out-of-domain",
        }
    }

    fn selects(self, mask_value: u8) -> bool {
        match self {
            Region::In => mask_value == 1,
            Region::Out => mask_value == 0,
        }
    }
}

/// Block vote: a cell is in-domain only if strictly more than half of its
/// pixels are; ties go out.
pub fn downsample_mask(mask: &DomainMask, h: usize, w: usize) -> Result<DomainMask> {
    if h == 0 || w == 0 || !mask.height().is_multiple_of(h) || !mask.width().is_multiple_of(w) {
        return Err(Error::Argument(format!(
            "cannot downsample a {}x{} mask to {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    let (fy, fx) = (mask.height() / h, mask.width() / w);
    Ok(DomainMask::from_fn(h, w, |y, x| {
        let mut count = 0;
        for yy in y * fy..(y + 1) * fy {
            for xx in x * fx..(x + 1) * fx {
                count += mask.is_in(yy, xx) as usize;
            }
        }
        2 * count > fy * fx
    }))
}

fn region_weights<T: Real>(mask: &DomainMask, region: Region) -> Result<(Tensor<T>, usize)> {
    let n = mask.data().iter().filter(|&&v| region.selects(v)).count();
    if n == 0 {
        return Err(Error::DegenerateRegion(region.name()));
    }
    let inv = T::one() / T::lit(n as f64);
    let mut t = Tensor::zeros(1, mask.height(), mask.width());
    for (o, &v) in t.data.iter_mut().zip(mask.data()) {
        if region.selects(v) {
            *o = inv;
        }
    }
    Ok((t, n))
}

/// Per-pixel loss field: channel-mean squared error plus `lambda` times the
/// oracle's map at image resolution.
pub fn loss_field<T: Real>(
    output: &Image<T>,
    target: &Image<T>,
    oracle: &dyn PerceptualOracle<T>,
    lambda: f64,
) -> Result<Tensor<T>> {
    output.ensure_same_size(target, "masked loss")?;
    let mut field = squared_error_field(output, target);
    if lambda != 0.0 {
        let map = oracle.full_resolution_map(output, target);
        let l = T::lit(lambda);
        for (f, m) in field.data.iter_mut().zip(map.data) {
            *f += l * m;
        }
    }
    Ok(field)
}

/// Mean of the loss field over the chosen region of `mask`.
pub fn masked_loss<T: Real>(
    output: &Image<T>,
    target: &Image<T>,
    mask: &DomainMask,
    region: Region,
    oracle: &dyn PerceptualOracle<T>,
    lambda: f64,
) -> Result<T> {
    check_mask(output, mask)?;
    let field = loss_field(output, target, oracle, lambda)?;
    let (weights, _) = region_weights::<T>(mask, region)?;
    Ok(weighted_sum(&field, &weights))
}

fn weighted_sum<T: Real>(field: &Tensor<T>, weights: &Tensor<T>) -> T {
    field
        .data
        .iter()
        .zip(&weights.data)
        .filter(|(_, &w)| w != T::zero())
        .map(|(&f, &w)| f * w)
        .sum()
}

fn check_mask<T: Real>(image: &Image<T>, mask: &DomainMask) -> Result<()> {
    if image.height() != mask.height() || image.width() != mask.width() {
        return Err(Error::Shape(format!(
            "mask is {}x{}, image is {}x{}",
            mask.height(),
            mask.width(),
            image.height(),
            image.width()
        )));
    }
    Ok(())
}

/// [`masked_loss`] and its gradient with respect to `output`. The gradient is
/// exactly zero at pixels outside the region whenever the oracle is pointwise
/// or `lambda` is zero.
pub fn masked_loss_grad<T: Real>(
    output: &Image<T>,
    target: &Image<T>,
    mask: &DomainMask,
    region: Region,
    oracle: &dyn PerceptualOracle<T>,
    lambda: f64,
) -> Result<(T, Tensor<T>)> {
    check_mask(output, mask)?;
    let field = loss_field(output, target, oracle, lambda)?;
    let (weights, _) = region_weights::<T>(mask, region)?;
    let value = weighted_sum(&field, &weights);
    let mut grad = squared_error_field_vjp(output, target, &weights);
    if lambda != 0.0 {
        let map_shape = oracle.distance_map(output, target);
        let d_map = if map_shape.height == weights.height && map_shape.width == weights.width {
            weights.clone()
        } else {
            weights.resize_bilinear_adjoint(map_shape.height, map_shape.width)
        };
        let g = oracle.map_vjp(output, target, &d_map);
        let l = T::lit(lambda);
        for (a, b) in grad.data.iter_mut().zip(g.data) {
            *a += l * b;
        }
    }
    Ok((value, grad))
}

/// Loss values and raw gradients of one step, before any optimizer update.
#[derive(Clone, Debug)]
pub struct StepGradients<T> {
    pub l_in: Option<T>,
    pub l_out: Option<T>,
    /// `∂L_in/∂θ` restricted to the tunable weights; `None` when the weight
    /// branch is inactive.
    pub theta: Option<Vec<T>>,
    /// `∂L_out/∂f`; `None` when the feature branch is inactive.
    pub feature: Option<Tensor<T>>,
}

/// One step's record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub l_in: Option<f64>,
    pub l_out: Option<f64>,
}

/// Everything one refinement owns.
pub struct RefinementSession<T: Real = f32> {
    pub state: GeneratorState<T>,
    pub feature: FeatureMap<T>,
    pub mask_image: DomainMask,
    pub mask_feat: DomainMask,
    w: LatentCode<T>,
    pub target: Image<T>,
    pub config: RefineConfig,
    pub oracle: Arc<dyn PerceptualOracle<T>>,
}

impl<T: Real> RefinementSession<T> {
    /// Taps the initial feature from `state` and derives the feature-resolution mask.
    pub fn new(
        state: GeneratorState<T>,
        w: LatentCode<T>,
        target: Image<T>,
        mask_image: DomainMask,
        config: RefineConfig,
        oracle: Arc<dyn PerceptualOracle<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let res = state.output_resolution();
        if target.height() != res || target.width() != res {
            return Err(Error::Argument(format!(
                "target is {}x{}, generator renders {res}x{res}",
                target.height(),
                target.width()
            )));
        }
        check_mask(&target, &mask_image)?;
        let r = state.inject_resolution();
        let mask_feat = downsample_mask(&mask_image, r, r)?;
        let feature = state.tap_feature(&w)?;
        Ok(Self {
            state,
            feature,
            mask_image,
            mask_feat,
            w,
            target,
            config,
            oracle,
        })
    }

    pub fn latent(&self) -> &LatentCode<T> {
        &self.w
    }

    fn trace(&self) -> Result<Trace<T>> {
        self.state.trace(&self.w, Some((&self.feature, &self.mask_feat)))
    }

    /// The current blended-injection output.
    pub fn render(&self) -> Result<Image<T>> {
        self.state
            .synthesize_with_injection(&self.w, &self.feature, &self.mask_feat)
    }

    fn branch_loss(&self, output: &Image<T>, region: Region, grad: bool) -> Result<Option<(T, Option<Tensor<T>>)>> {
        let oracle = self.oracle.as_ref();
        let lambda = self.config.lambda;
        let r = if grad {
            masked_loss_grad(output, &self.target, &self.mask_image, region, oracle, lambda).map(|(v, g)| (v, Some(g)))
        } else {
            masked_loss(output, &self.target, &self.mask_image, region, oracle, lambda).map(|v| (v, None))
        };
        match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::DegenerateRegion(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Losses and raw gradients at the current parameters. The weight
    /// gradient is computed only when `with_theta` is set.
    pub fn gradients(&self, with_theta: bool) -> Result<StepGradients<T>> {
        let trace = self.trace()?;
        let output = trace.output();
        let out = self.branch_loss(&output, Region::Out, true)?;
        let inn = self.branch_loss(&output, Region::In, with_theta)?;
        let feature = out.as_ref().map(|(_, g)| {
            let g = g.as_ref().expect("gradient requested");
            self.state
                .backprop(
                    &trace,
                    g,
                    Wants {
                        feature: true,
                        ..Wants::default()
                    },
                )
                .feature
                .expect("injected pass yields a feature gradient")
        });
        let theta = match (&inn, with_theta) {
            (Some((_, Some(g))), true) => {
                let mut p = self
                    .state
                    .backprop(
                        &trace,
                        g,
                        Wants {
                            params: true,
                            ..Wants::default()
                        },
                    )
                    .params
                    .expect("parameter gradient requested");
                self.state.restrict_to_tunable(&mut p);
                Some(p)
            }
            _ => None,
        };
        Ok(StepGradients {
            l_in: inn.map(|(v, _)| v),
            l_out: out.map(|(v, _)| v),
            theta,
            feature,
        })
    }

    /// Current `(L_in, L_out)`; `None` for an empty region.
    pub fn losses(&self) -> Result<(Option<T>, Option<T>)> {
        let output = self.render()?;
        let l_in = self.branch_loss(&output, Region::In, false)?.map(|(v, _)| v);
        let l_out = self.branch_loss(&output, Region::Out, false)?.map(|(v, _)| v);
        Ok((l_in, l_out))
    }
}

/// Result of [`refine`].
pub struct Refined<T: Real = f32> {
    pub state: GeneratorState<T>,
    pub feature: FeatureMap<T>,
    pub mask_feat: DomainMask,
    pub history: Vec<StepRecord>,
    /// `(L_in, L_out)` after the last update.
    pub final_losses: (Option<f64>, Option<f64>),
}

fn finite<T: Real>(value: Option<T>, step: usize, branch: &'static str) -> Result<Option<f64>> {
    match value {
        Some(v) if !v.is_finite() => Err(Error::NonFinite {
            step,
            branch,
            value: v.as_f64(),
        }),
        v => Ok(v.map(|v| v.as_f64())),
    }
}

/// Runs `steps_feature` iterations; weights are updated during the first
/// `steps_theta` of them. An empty region disables its branch.
pub fn refine<T: Real>(mut session: RefinementSession<T>) -> Result<Refined<T>> {
    let cfg = session.config;
    let mut adam_theta = Adam::new(AdamConfig::with_lr(cfg.lr_theta), session.state.delta().len());
    let mut adam_f = Adam::new(AdamConfig::with_lr(cfg.lr_feature), session.feature.tensor.data.len());
    let theta_scales = session.state.generator().lr_scales();
    let mut history = Vec::with_capacity(cfg.steps_feature);
    for step in 0..cfg.steps_feature {
        let g = session.gradients(step < cfg.steps_theta)?;
        let l_in = finite(g.l_in, step, "weight")?;
        let l_out = finite(g.l_out, step, "feature")?;
        history.push(StepRecord { step, l_in, l_out });
        if let Some(gt) = g.theta {
            adam_theta.step_scaled(session.state.delta_mut(), &gt, &theta_scales);
        }
        if let Some(gf) = g.feature {
            adam_f.step(&mut session.feature.tensor.data, &gf.data);
        }
    }
    let (l_in, l_out) = session.losses()?;
    let final_losses = (
        finite(l_in, cfg.steps_feature, "weight")?,
        finite(l_out, cfg.steps_feature, "feature")?,
    );
    Ok(Refined {
        state: session.state,
        feature: session.feature,
        mask_feat: session.mask_feat,
        history,
        final_losses,
    })
}

/// Outcome of [`gradient_split_check`].
#[derive(Clone, Debug, Default)]
pub struct SplitReport {
    /// Perturbing in-domain target pixels left the applied feature gradient bit-identical.
    pub feature_isolated: bool,
    /// Perturbing out-of-domain target pixels left the applied weight gradient bit-identical.
    pub theta_isolated: bool,
    pub coordinates_checked: usize,
    pub max_rel_error: f64,
    pub mismatches: Vec<String>,
}

impl SplitReport {
    pub fn passed(&self) -> bool {
        self.feature_isolated && self.theta_isolated && self.mismatches.is_empty()
    }
}

impl std::fmt::Display for SplitReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "feature gradient isolated from in-domain target: {}",
            self.feature_isolated
        )?;
        writeln!(
            f,
            "weight gradient isolated from out-of-domain target: {}",
            self.theta_isolated
        )?;
        writeln!(
            f,
            "finite-difference coordinates: {} (max relative error {:.3e})",
            self.coordinates_checked, self.max_rel_error
        )?;
        for m in &self.mismatches {
            writeln!(f, "  mismatch: {m}")?;
        }
        Ok(())
    }
}

/// Options for [`gradient_split_check`].
#[derive(Clone, Copy, Debug)]
pub struct SplitCheckConfig {
    /// Coordinates per branch.
    pub coordinates: usize,
    pub step: f64,
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for SplitCheckConfig {
    fn default() -> Self {
        Self {
            coordinates: 30,
            step: 1e-4,
            rel_tol: 1e-3,
            seed: 0,
        }
    }
}

fn same_bits<T: Real>(a: &[T], b: &[T]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
}

/// Verifies the two gradient flows on the session's first step.
///
/// Isolation is tested by perturbing target pixels of one region and checking
/// that the other branch's gradient does not change at all; this is exact when
/// `lambda` is zero or the oracle is pointwise. Applied gradients are compared
/// against fourth-order central differences of the masked losses.
pub fn gradient_split_check(session: &RefinementSession<f64>, check: &SplitCheckConfig) -> Result<SplitReport> {
    let mut report = SplitReport::default();
    let base = session.gradients(true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(check.seed);

    let perturbed = |region: Region, rng: &mut ChaCha8Rng| -> Result<StepGradients<f64>> {
        let mut target = session.target.clone();
        for y in 0..target.height() {
            for x in 0..target.width() {
                if region.selects(session.mask_image.is_in(y, x) as u8) {
                    for c in 0..3 {
                        let v = target.at(c, y, x);
                        target.set(c, y, x, v + rng.gen_range(-0.5..0.5));
                    }
                }
            }
        }
        let probe = RefinementSession {
            state: session.state.clone(),
            feature: session.feature.clone(),
            mask_image: session.mask_image.clone(),
            mask_feat: session.mask_feat.clone(),
            w: session.w.clone(),
            target,
            config: session.config,
            oracle: session.oracle.clone(),
        };
        probe.gradients(true)
    };
    let after_in = perturbed(Region::In, &mut rng)?;
    report.feature_isolated = match (&base.feature, &after_in.feature) {
        (Some(a), Some(b)) => same_bits(&a.data, &b.data),
        (None, None) => true,
        _ => false,
    };
    let after_out = perturbed(Region::Out, &mut rng)?;
    report.theta_isolated = match (&base.theta, &after_out.theta) {
        (Some(a), Some(b)) => same_bits(a, b),
        (None, None) => true,
        _ => false,
    };

    let h = check.step;
    let lambda = session.config.lambda;
    let oracle = session.oracle.as_ref();
    // Fourth-order central difference: f at +h, -h, +2h, -2h.
    let compare = |what: String, analytic: f64, f: [f64; 4], report: &mut SplitReport| {
        let fd = (8.0 * (f[0] - f[1]) - (f[2] - f[3])) / (12.0 * h);
        let err = (fd - analytic).abs();
        let scale = fd.abs().max(analytic.abs());
        let rel = if scale > 0.0 { err / scale } else { 0.0 };
        report.coordinates_checked += 1;
        if err > check.rel_tol * scale + 1e-10 {
            report
                .mismatches
                .push(format!("{what}: analytic {analytic:.6e}, finite difference {fd:.6e}"));
        } else {
            report.max_rel_error = report.max_rel_error.max(rel);
        }
    };

    if let Some(gf) = &base.feature {
        let candidates: Vec<usize> = (0..gf.data.len()).filter(|&i| gf.data[i] != 0.0).collect();
        for _ in 0..check.coordinates.min(candidates.len()) {
            let i = candidates[rng.gen_range(0..candidates.len())];
            let eval = |delta: f64| -> Result<f64> {
                let mut f = session.feature.clone();
                f.tensor.data[i] += delta;
                let out = session
                    .state
                    .synthesize_with_injection(&session.w, &f, &session.mask_feat)?;
                masked_loss(&out, &session.target, &session.mask_image, Region::Out, oracle, lambda)
            };
            compare(
                format!("feature[{i}]"),
                gf.data[i],
                [eval(h)?, eval(-h)?, eval(2.0 * h)?, eval(-2.0 * h)?],
                &mut report,
            );
        }
    }
    if let Some(gt) = &base.theta {
        let candidates: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] != 0.0).collect();
        for _ in 0..check.coordinates.min(candidates.len()) {
            let i = candidates[rng.gen_range(0..candidates.len())];
            let eval = |delta: f64| -> Result<f64> {
                let mut state = session.state.clone();
                state.delta_mut()[i] += delta;
                let out = state.synthesize_with_injection(&session.w, &session.feature, &session.mask_feat)?;
                masked_loss(&out, &session.target, &session.mask_image, Region::In, oracle, lambda)
            };
            compare(
                format!("theta[{i}]"),
                gt[i],
                [eval(h)?, eval(-h)?, eval(2.0 * h)?, eval(-2.0 * h)?],
                &mut report,
            );
        }
    }
    Ok(report)
}
