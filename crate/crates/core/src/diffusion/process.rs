use super::sampler::{SamplerConfig, VarianceMode};
use super::schedule::NoiseSchedule;
use crate::error::Result;
use crate::image::{standard_normal_field, Image, SeededRng};

/// One forward corruption step `x_t = √(1-β_t) x_{t-1} + √β_t ε`.
pub fn forward_step(x_prev: &Image, t: usize, sched: &NoiseSchedule, rng: &mut SeededRng) -> Result<Image> {
    sched.check_step(t)?;
    let eps = standard_normal_field(rng, x_prev.width(), x_prev.height());
    let (a, b) = ((1.0 - sched.beta(t)).sqrt(), sched.beta(t).sqrt());
    Ok(x_prev.zip_map(&eps, |x, e| a * x + b * e))
}

/// Closed-form marginal `x_t = √ᾱ_t x_0 + √(1-ᾱ_t) ε`.
pub fn forward_marginal(x0: &Image, t: usize, eps: &Image, sched: &NoiseSchedule) -> Result<Image> {
    sched.check_step(t)?;
    x0.check_same_dims(eps, "forward_marginal noise")?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(eps, |x, e| a * x + b * e))
}

/// Inverts the marginal: `x̂_0 = (x_t - √(1-ᾱ_t) ε̂) / √ᾱ_t`.
pub fn predict_x0(x_t: &Image, t: usize, eps_pred: &Image, sched: &NoiseSchedule) -> Result<Image> {
    sched.check_step(t)?;
    x_t.check_same_dims(eps_pred, "predict_x0 noise estimate")?;
    let ab = sched.alpha_bar(t);
    let (s, d) = ((1.0 - ab).sqrt(), ab.sqrt());
    Ok(x_t.zip_map(eps_pred, |x, e| (x - s * e) / d))
}

/// Reverse mean `μ = (x_t - β_t/√(1-ᾱ_t) ε̂) / √α_t`.
pub fn reverse_mean(x_t: &Image, t: usize, eps_pred: &Image, sched: &NoiseSchedule) -> Result<Image> {
    sched.check_step(t)?;
    x_t.check_same_dims(eps_pred, "reverse_step noise estimate")?;
    let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    Ok(x_t.zip_map(eps_pred, |x, e| inv_sqrt_alpha * (x - coef * e)))
}

/// `x_{t-1} = μ + σ ε`, with `σ² = β_t` or `β̃_t` per the sampler config.
///
/// No noise is added (and no variate is drawn) at `t = 1`.
pub fn reverse_step(
    x_t: &Image,
    t: usize,
    eps_pred: &Image,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut SeededRng,
) -> Result<Image> {
    let mean = reverse_mean(x_t, t, eps_pred, sched)?;
    if t == 1 {
        return Ok(mean);
    }
    let sigma = match cfg.variance_mode {
        VarianceMode::Beta => sched.beta(t),
        VarianceMode::BetaTilde => sched.beta_tilde(t),
    }
    .sqrt();
    let z = standard_normal_field(rng, x_t.width(), x_t.height());
    Ok(mean.zip_map(&z, |m, e| m + sigma * e))
}
