use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Scalars that fully determine a schedule; this is what checkpoints store.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            timesteps: DEFAULT_TIMESTEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

/// Linear variance schedule. Timesteps are 1-based: `t` in `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = if timesteps == 1 {
            vec![beta_start]
        } else {
            (0..timesteps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64)
                .collect()
        };
        let mut alphas_bar = Vec::with_capacity(timesteps);
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alphas_bar.push(acc);
        }
        Ok(NoiseSchedule {
            config: ScheduleConfig {
                timesteps,
                beta_start,
                beta_end,
            },
            betas,
            alphas_bar,
        })
    }

    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        NoiseSchedule::linear(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.timesteps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative product `prod_{s <= t} (1 - beta_s)`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas_bar[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_bar(&self) -> &[f64] {
        &self.alphas_bar
    }

    /// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`.
    pub fn signal_noise(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        (ab.sqrt(), (1.0 - ab).sqrt())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::from_config(&ScheduleConfig::default()).expect("valid default schedule")
    }
}

pub fn make_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(timesteps, beta_start, beta_end)
}

/// Forward corruption `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check(t)?;
    if x0.len() != eps.len() {
        return Err(Error::Shape(format!("x0 has {}, eps has {}", x0.len(), eps.len())));
    }
    Ok(q_sample_with(x0, eps, sched.alpha_bar(t)))
}

pub(crate) fn q_sample_with(x0: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_factor() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn strictly_decreasing_and_nearly_destroyed() {
        let s = NoiseSchedule::default();
        for w in s.alphas_bar().windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(s.alpha_bar(1000) < 5e-5);
        assert!(s.betas().iter().all(|&b| 0.0 < b && b < 1.0));
    }

    #[test]
    fn invalid_ranges() {
        assert!(make_schedule(10, 0.0, 0.1).is_err());
        assert!(make_schedule(10, 0.2, 0.1).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
        assert!(make_schedule(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn q_sample_limits() {
        let s = NoiseSchedule::default();
        let x0 = [0.3, -0.7, 0.1];
        let eps = [1.0, -2.0, 0.5];
        assert_eq!(q_sample_with(&x0, &eps, 1.0), x0.to_vec());
        let z = q_sample(&[0.0; 3], 400, &eps, &s).unwrap();
        let k = (1.0 - s.alpha_bar(400)).sqrt();
        for (a, e) in z.iter().zip(&eps) {
            assert_eq!(*a, k * e);
        }
        assert!(matches!(
            q_sample(&x0, 0, &eps, &s),
            Err(Error::TimestepOutOfRange { .. })
        ));
        assert!(q_sample(&x0, 1001, &eps, &s).is_err());
    }
}
