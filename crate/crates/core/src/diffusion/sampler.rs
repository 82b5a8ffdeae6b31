use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::letkf::EnsembleMatrix;
use crate::nn::{from_diffusion_scale, Checkpoint, DenoiserParams, Real};
use crate::observation::{to_condition, ConditioningVector, Observation};

pub const DEFAULT_DDIM_STEPS: usize = 100;
pub const DEFAULT_GUIDANCE_W: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub guidance_w: f64,
    pub stochasticity_eta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            num_steps: DEFAULT_DDIM_STEPS,
            guidance_w: DEFAULT_GUIDANCE_W,
            stochasticity_eta: 0.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.num_steps == 0 || self.num_steps > sched.timesteps() {
            return Err(Error::Config(format!(
                "DDIM steps must be in 1..={}, got {}",
                sched.timesteps(),
                self.num_steps
            )));
        }
        if !(0.0..=1.0).contains(&self.stochasticity_eta) {
            return Err(Error::Config("eta must lie in [0, 1]".into()));
        }
        if !self.guidance_w.is_finite() {
            return Err(Error::Config("guidance weight must be finite".into()));
        }
        Ok(())
    }
}

/// Classifier-free guidance `(1 + w) eps_cond - w eps_uncond`, evaluated as
/// `eps_cond + w (eps_cond - eps_uncond)` so equal branches pass through exactly.
pub fn guided_eps(eps_cond: &[f64], eps_uncond: &[f64], w: f64) -> Vec<f64> {
    assert_eq!(eps_cond.len(), eps_uncond.len(), "branch lengths differ");
    eps_cond
        .iter()
        .zip(eps_uncond)
        .map(|(&c, &u)| c + w * (c - u))
        .collect()
}

/// Deterministic part of the ancestral step:
/// `(x_t - beta_t / sqrt(1 - ab_t) * eps) / sqrt(1 - beta_t)`.
pub fn ddpm_mean(x_t: &[f64], t: usize, eps_tilde: &[f64], sched: &NoiseSchedule) -> Vec<f64> {
    let beta = sched.beta(t);
    let coef = beta / (1.0 - sched.alpha_bar(t)).sqrt();
    let scale = 1.0 / (1.0 - beta).sqrt();
    x_t.iter()
        .zip(eps_tilde)
        .map(|(&x, &e)| scale * (x - coef * e))
        .collect()
}

/// One ancestral step with `sigma_t = sqrt(beta_t)`; no noise is added at `t = 1`.
pub fn ddpm_step<R: Rng + ?Sized>(
    x_t: &[f64],
    t: usize,
    eps_tilde: &[f64],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    sched.check(t)?;
    if x_t.len() != eps_tilde.len() {
        return Err(Error::Shape("x_t and eps differ in length".into()));
    }
    let mut x = ddpm_mean(x_t, t, eps_tilde, sched);
    if t > 1 {
        let sigma = sched.beta(t).sqrt();
        for v in &mut x {
            let z: f64 = StandardNormal.sample(rng);
            *v += sigma * z;
        }
    }
    Ok(x)
}

/// Kept timesteps in ascending order: `1, 1 + s, 1 + 2s, ...` with `s = T / num_steps`.
pub fn ddim_timesteps(total: usize, num_steps: usize) -> Vec<usize> {
    let stride = (total / num_steps).max(1);
    (0..num_steps).map(|i| 1 + i * stride).collect()
}

/// `x0 = (x_t - sqrt(1 - ab) eps) / sqrt(ab)`.
pub fn predict_x0(x_t: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x_t.iter().zip(eps).map(|(&x, &e)| (x - b * e) / a).collect()
}

/// DDIM noise scale for a jump from `ab_t` to `ab_prev`.
pub fn ddim_sigma(alpha_bar_t: f64, alpha_bar_prev: f64, eta: f64) -> f64 {
    eta * ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t)).sqrt() * (1.0 - alpha_bar_t / alpha_bar_prev).sqrt()
}

/// Deterministic part of a DDIM step: `sqrt(ab_prev) x0 + sqrt(1 - ab_prev - sigma^2) eps`.
pub fn ddim_drift(x_t: &[f64], eps: &[f64], alpha_bar_t: f64, alpha_bar_prev: f64, eta: f64) -> Vec<f64> {
    let sigma = ddim_sigma(alpha_bar_t, alpha_bar_prev, eta);
    let dir = (1.0 - alpha_bar_prev - sigma * sigma).max(0.0).sqrt();
    let a_prev = alpha_bar_prev.sqrt();
    predict_x0(x_t, eps, alpha_bar_t)
        .iter()
        .zip(eps)
        .map(|(&x0, &e)| a_prev * x0 + dir * e)
        .collect()
}

/// Runs the guided DDIM chain for `members` starting points stacked in
/// `x_init` (row-major `[member, grid]`, diffusion scale). Returns the
/// final samples on the normalized `[0, 1]` scale.
///
/// Conditional and unconditional branches of all members share one batched
/// network evaluation per step.
pub fn ddim_sample_from<T: Real, R: Rng + ?Sized>(
    params: &DenoiserParams<T>,
    cond: &ConditioningVector,
    sched: &NoiseSchedule,
    scfg: &SamplerConfig,
    x_init: Vec<f64>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    scfg.validate(sched)?;
    let n = params.n();
    if cond.len() != n || !x_init.len().is_multiple_of(n) || x_init.is_empty() {
        return Err(Error::Shape(format!(
            "condition of {} and {} initial values for grid {n}",
            cond.len(),
            x_init.len()
        )));
    }
    let members = x_init.len() / n;
    let mut x = x_init;
    let cond_row: Vec<T> = cond.padded.iter().map(|&v| T::lit(v)).collect();
    let mut conds = Vec::with_capacity(2 * members * n);
    for _ in 0..2 * members {
        conds.extend_from_slice(&cond_row);
    }
    let use_cond: Vec<bool> = (0..2 * members).map(|i| i < members).collect();
    let steps = ddim_timesteps(sched.timesteps(), scfg.num_steps);
    for i in (0..steps.len()).rev() {
        let t = steps[i];
        let t_prev = if i == 0 { 0 } else { steps[i - 1] };
        let ab = sched.alpha_bar(t);
        let ab_prev = sched.alpha_bar(t_prev);

        let mut input = Vec::with_capacity(2 * members * n);
        input.extend(x.iter().map(|&v| T::lit(v)));
        input.extend_from_within(..members * n);
        let ts = vec![t; 2 * members];
        let out = params.predict_noise_batch(&input, &ts, &conds, &use_cond)?;
        let out: Vec<f64> = out.iter().map(|v| v.f64()).collect();
        let eps = guided_eps(&out[..members * n], &out[members * n..], scfg.guidance_w);

        let mut next = ddim_drift(&x, &eps, ab, ab_prev, scfg.stochasticity_eta);
        let sigma = ddim_sigma(ab, ab_prev, scfg.stochasticity_eta);
        if sigma > 0.0 {
            for v in &mut next {
                let z: f64 = StandardNormal.sample(rng);
                *v += sigma * z;
            }
        }
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::SamplingDiverged { t });
        }
        x = next;
    }
    Ok(x.into_iter().map(from_diffusion_scale).collect())
}

/// Draws `x_T ~ N(0, I)` and runs guided DDIM for one sample.
pub fn ddim_sample<T: Real, R: Rng + ?Sized>(
    params: &DenoiserParams<T>,
    cond: &ConditioningVector,
    sched: &NoiseSchedule,
    scfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let x_init = standard_normal(params.n(), rng);
    ddim_sample_from(params, cond, sched, scfg, x_init, rng)
}

/// Full-length ancestral sampling with guidance (slow; DDIM is the default path).
pub fn ddpm_sample<T: Real, R: Rng + ?Sized>(
    params: &DenoiserParams<T>,
    cond: &ConditioningVector,
    sched: &NoiseSchedule,
    guidance_w: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n = params.n();
    let mut x = standard_normal(n, rng);
    let c: Vec<T> = cond.padded.iter().chain(&cond.padded).map(|&v| T::lit(v)).collect();
    for t in (1..=sched.timesteps()).rev() {
        let input: Vec<T> = x.iter().chain(&x).map(|&v| T::lit(v)).collect();
        let out = params.predict_noise_batch(&input, &[t, t], &c, &[true, false])?;
        let out: Vec<f64> = out.iter().map(|v| v.f64()).collect();
        let eps = guided_eps(&out[..n], &out[n..], guidance_w);
        x = ddpm_step(&x, t, &eps, sched, rng)?;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::SamplingDiverged { t });
        }
    }
    Ok(x.into_iter().map(from_diffusion_scale).collect())
}

pub(crate) fn standard_normal<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// Pseudo ensemble conditioned on `obs`, in physical units, one member per column.
pub fn generate_ensemble<R: Rng + ?Sized>(
    ckpt: &Checkpoint,
    obs: &Observation,
    n_ensembles: usize,
    scfg: &SamplerConfig,
    rng: &mut R,
) -> Result<EnsembleMatrix> {
    if ckpt.interval_p != obs.interval_p {
        return Err(Error::IntervalMismatch {
            checkpoint: ckpt.interval_p,
            observation: obs.interval_p,
        });
    }
    if n_ensembles == 0 {
        return Err(Error::Config("need at least one ensemble member".into()));
    }
    let n = ckpt.params.n();
    let sched = ckpt.schedule()?;
    let cond = to_condition(obs, n, &ckpt.normalizer)?;
    let x_init = standard_normal(n * n_ensembles, rng);
    let samples = ddim_sample_from(&ckpt.params, &cond, &sched, scfg, x_init, rng)?;
    let physical: Vec<f64> = samples.iter().map(|&v| ckpt.normalizer.denormalize(v)).collect();
    // samples are member-major; the matrix is grid x member
    Ok(EnsembleMatrix::from_member_rows(n, n_ensembles, &physical))
}
