//! Built-in consistency suites: blending algebra and the gradient split.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::generator::{sample_z, GeneratorState};
use crate::latent::LatentCode;
use crate::metrics::PyramidOracle;
use crate::refine::{gradient_split_check, RefineConfig, RefinementSession, SplitCheckConfig, SplitReport};
use crate::scenario::patched_target;
use crate::tensor::{DomainMask, FeatureMap, Tensor};

/// Outcome of [`mask_algebra_check`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MaskAlgebraReport {
    pub cases: usize,
    /// Cases where an all-in mask reproduced the plain synthesis bit for bit.
    pub identity_ok: usize,
    /// Cases where the out-of-domain slice of the blend equalled the injected feature bit for bit.
    pub slice_ok: usize,
}

impl MaskAlgebraReport {
    pub fn passed(&self) -> bool {
        self.identity_ok == self.cases && self.slice_ok == self.cases
    }
}

impl fmt::Display for MaskAlgebraReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "all-in mask reproduces synthesis: {}/{}",
            self.identity_ok, self.cases
        )?;
        writeln!(
            f,
            "out-of-domain slice equals injected feature: {}/{}",
            self.slice_ok, self.cases
        )
    }
}

fn random_w(state: &GeneratorState<f32>, rng: &mut ChaCha8Rng) -> Result<LatentCode<f32>> {
    state.to_w(&LatentCode::z(sample_z::<f32>(rng, state.d_latent())))
}

/// Checks the blending identities on `cases` random latents, features and masks.
pub fn mask_algebra_check(state: &GeneratorState<f32>, cases: usize, seed: u64) -> Result<MaskAlgebraReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = state.inject_resolution();
    let c = state.generator().layer_channels(state.inject_layer());
    let mut report = MaskAlgebraReport {
        cases,
        ..Default::default()
    };
    for _ in 0..cases {
        let w = random_w(state, &mut rng)?;
        let values = (0..c * r * r).map(|_| rng.gen_range(-3.0f32..3.0)).collect();
        let f = FeatureMap {
            layer: state.inject_layer(),
            tensor: Tensor::from_vec(c, r, r, values)?,
        };
        let base = state.synthesize(&w)?;
        let injected = state.synthesize_with_injection(&w, &f, &DomainMask::ones(r, r))?;
        report.identity_ok += bits_equal(base.data(), injected.data()) as usize;
        let m = DomainMask::from_fn(r, r, |_, _| rng.gen_bool(0.5));
        let blended = state.blended_feature(&w, &f, &m)?;
        let slice_same = (0..c).all(|ch| {
            (0..r).all(|y| {
                (0..r)
                    .all(|x| m.is_in(y, x) || blended.tensor.at(ch, y, x).to_bits() == f.tensor.at(ch, y, x).to_bits())
            })
        });
        report.slice_ok += slice_same as usize;
    }
    Ok(report)
}

fn bits_equal(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Runs [`gradient_split_check`] in f64 on a patched toy target with `lambda = 0`.
pub fn split_check(state: &GeneratorState<f32>, seed: u64, coordinates: usize) -> Result<SplitReport> {
    let t = patched_target(state, seed, 0.2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_w(state, &mut rng)?.lift_to_wplus(state.n_layers())?;
    let res = state.output_resolution();
    let session = RefinementSession::new(
        state.cast::<f64>(),
        w.cast::<f64>(),
        t.target.cast::<f64>(),
        t.patch.as_out_mask(res, res),
        RefineConfig {
            lambda: 0.0,
            ..RefineConfig::default()
        },
        Arc::new(PyramidOracle::default()),
    )?;
    let check = SplitCheckConfig {
        coordinates,
        seed,
        ..SplitCheckConfig::default()
    };
    gradient_split_check(&session, &check)
}
