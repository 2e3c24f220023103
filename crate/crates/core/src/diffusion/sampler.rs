use super::process::reverse_step;
use super::schedule::NoiseSchedule;
use crate::conditioning::ConditioningEmbedding;
use crate::denoiser::{self, DenoiserParams};
use crate::error::{Error, Result};
use crate::image::{standard_normal_field, Image, SeededRng};
use crate::wavelet::WaveletPyramid;

/// Fixed reverse-process variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VarianceMode {
    /// `σ_t² = β_t`
    #[default]
    Beta,
    /// `σ_t² = β_t (1 - ᾱ_{t-1}) / (1 - ᾱ_t)`
    BetaTilde,
}

impl std::str::FromStr for VarianceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(Self::Beta),
            "beta_tilde" | "beta-tilde" => Ok(Self::BetaTilde),
            other => Err(Error::Parameter(format!("unknown variance mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SamplerConfig {
    pub seed: u64,
    pub variance_mode: VarianceMode,
}

/// Ancestral sampling with an arbitrary noise predictor `eps(x_t, t)`.
///
/// `x_T` is drawn from `cfg.seed` first; each step with `t > 1` then draws
/// its noise from the same stream.
pub fn sample_with<F>(
    width: usize,
    height: usize,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    mut eps: F,
) -> Result<Image>
where
    F: FnMut(&Image, usize) -> Result<Image>,
{
    let mut rng = SeededRng::new(cfg.seed);
    let mut x = standard_normal_field(&mut rng, width, height);
    for t in (1..=sched.steps()).rev() {
        let eps_pred = eps(&x, t)?;
        x = reverse_step(&x, t, &eps_pred, sched, cfg, &mut rng)?;
        if !x.is_finite() {
            return Err(Error::Divergence {
                step: t,
                detail: "non-finite sample".into(),
            });
        }
    }
    Ok(x)
}

/// Generates one image conditioned on `z_y` and the wavelet features `f`;
/// the output has `f`'s dimensions. No range clamping is applied.
pub fn sample(
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    z_y: &ConditioningEmbedding,
    f: &WaveletPyramid,
    cfg: &SamplerConfig,
) -> Result<Image> {
    let (w, h) = f.dims();
    sample_with(w, h, sched, cfg, |x, t| denoiser::forward(params, x, t, z_y, f))
}
