//! The two data-assimilation loops and their RMSE diagnostics.
//!
//! Both runs share the Nature trajectory and the observation draws when they
//! share [`Seeds`], so differences between methods come from the methods alone.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::write;
use crate::diffusion::{generate_ensemble, SamplerConfig};
use crate::error::{Error, Result};
use crate::letkf::{analysis, EnsembleMatrix, LetkfConfig, DEFAULT_BASELINE_INFLATION, DEFAULT_GENERATIVE_INFLATION};
use crate::lorenz96::{attractor_state, ModelConfig, Rk4Workspace, StateVector, DEFAULT_DT, DEFAULT_N, DEFAULT_SPINUP};
use crate::nn::Checkpoint;
use crate::observation::{observe, Observation};

pub const RUN_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_DISCARD: usize = 100;
pub const DEFAULT_ENSEMBLES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Letkf,
    Generative,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Letkf => "letkf",
            Method::Generative => "generative",
        }
    }

    pub fn default_inflation(self) -> f64 {
        match self {
            Method::Letkf => DEFAULT_BASELINE_INFLATION,
            Method::Generative => DEFAULT_GENERATIVE_INFLATION,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "letkf" => Ok(Method::Letkf),
            "generative" => Ok(Method::Generative),
            other => Err(Error::Config(format!(
                "unknown method {other:?}, expected letkf or generative"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub nature: u64,
    pub obs: u64,
    pub ensemble_init: u64,
    pub sampler: u64,
}

impl Seeds {
    /// Four independent seeds drawn from one master seed.
    pub fn from_master(master: u64) -> Self {
        use rand::RngCore;
        let mut rng = ChaCha8Rng::seed_from_u64(master);
        Seeds {
            nature: rng.next_u64(),
            obs: rng.next_u64(),
            ensemble_init: rng.next_u64(),
            sampler: rng.next_u64(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub f_nature: f64,
    pub f_sim: f64,
    pub n: usize,
    pub dt: f64,
    pub interval_p: usize,
    pub noise_std_e: f64,
    pub n_ensembles: usize,
    pub n_da_steps: usize,
    /// Forecast/analysis cycles run before recording starts.
    pub spinup_steps: usize,
    /// Integration steps that bring the Nature run onto the attractor.
    pub nature_spinup: usize,
    /// Std of the Gaussian perturbation added to the Nature state to start
    /// the baseline members and the generative simulation state.
    pub init_perturbation: f64,
    /// Leading recorded steps excluded from the time-mean RMSE.
    pub discard: usize,
    pub letkf_cfg: LetkfConfig,
    pub sampler: SamplerConfig,
    pub seeds: Seeds,
}

impl ExperimentConfig {
    pub fn new(method: Method, f_nature: f64, interval_p: usize, n_da_steps: usize, seeds: Seeds) -> Self {
        let noise_std_e = 1.0;
        ExperimentConfig {
            f_nature,
            f_sim: 8.0,
            n: DEFAULT_N,
            dt: DEFAULT_DT,
            interval_p,
            noise_std_e,
            n_ensembles: DEFAULT_ENSEMBLES,
            n_da_steps,
            spinup_steps: 0,
            nature_spinup: DEFAULT_SPINUP,
            init_perturbation: 1.0,
            discard: DEFAULT_DISCARD.min(n_da_steps.saturating_sub(1)),
            letkf_cfg: LetkfConfig::for_interval(interval_p, method.default_inflation(), noise_std_e * noise_std_e),
            sampler: SamplerConfig::default(),
            seeds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_da_steps == 0 {
            return Err(Error::Config("need at least one DA step".into()));
        }
        if self.n_ensembles < 2 {
            return Err(Error::Config("need at least two ensemble members".into()));
        }
        if self.discard >= self.n_da_steps {
            return Err(Error::Config(format!(
                "discard window {} leaves nothing of {} steps",
                self.discard, self.n_da_steps
            )));
        }
        if self.letkf_cfg.interval_p != self.interval_p {
            return Err(Error::Config(
                "LETKF interval differs from the observation interval".into(),
            ));
        }
        if !(self.init_perturbation >= 0.0) {
            return Err(Error::Config("initial perturbation must be non-negative".into()));
        }
        self.letkf_cfg.validate()?;
        self.nature_model()?;
        self.sim_model()?;
        Ok(())
    }

    pub fn nature_model(&self) -> Result<ModelConfig> {
        ModelConfig::new(self.f_nature, self.dt, self.n)
    }

    pub fn sim_model(&self) -> Result<ModelConfig> {
        ModelConfig::new(self.f_sim, self.dt, self.n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub config: ExperimentConfig,
    pub assimilated: Vec<Vec<f64>>,
    pub nature: Vec<Vec<f64>>,
    pub rmse_series: Vec<f64>,
    pub spread_series: Vec<f64>,
    pub time_mean_rmse: f64,
    /// Content hash of the checkpoint used by a generative run.
    pub checkpoint_hash: Option<String>,
}

pub fn spatial_rmse(a: &[f64], b: &[f64]) -> f64 {
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (ss / a.len() as f64).sqrt()
}

pub fn time_mean_rmse(assimilated: &[Vec<f64>], nature: &[Vec<f64>], discard: usize) -> Result<f64> {
    if assimilated.len() != nature.len() {
        return Err(Error::Shape(format!(
            "trajectories have {} and {} steps",
            assimilated.len(),
            nature.len()
        )));
    }
    if discard >= assimilated.len() {
        return Err(Error::Config(format!(
            "nothing left after discarding {discard} of {} steps",
            assimilated.len()
        )));
    }
    let kept = &assimilated[discard..];
    let sum: f64 = kept
        .iter()
        .zip(&nature[discard..])
        .map(|(a, n)| {
            if a.len() != n.len() {
                return f64::NAN;
            }
            spatial_rmse(a, n)
        })
        .sum();
    if sum.is_nan() {
        return Err(Error::Shape("state lengths differ".into()));
    }
    Ok(sum / kept.len() as f64)
}

/// Source of the prior ensemble in the generative loop.
pub trait EnsembleGenerator {
    /// Interval the generator was trained for, if it is tied to one.
    fn interval_p(&self) -> Option<usize> {
        None
    }

    fn generate(&mut self, obs: &Observation, n_ensembles: usize, sim_state: &[f64]) -> Result<EnsembleMatrix>;
}

/// Pseudo ensembles from a trained checkpoint via guided DDIM.
pub struct DiffusionGenerator<'a> {
    pub ckpt: &'a Checkpoint,
    pub sampler: SamplerConfig,
    rng: ChaCha8Rng,
}

impl<'a> DiffusionGenerator<'a> {
    pub fn new(ckpt: &'a Checkpoint, sampler: SamplerConfig, seed: u64) -> Self {
        DiffusionGenerator {
            ckpt,
            sampler,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl EnsembleGenerator for DiffusionGenerator<'_> {
    fn interval_p(&self) -> Option<usize> {
        Some(self.ckpt.interval_p)
    }

    fn generate(&mut self, obs: &Observation, n_ensembles: usize, _sim_state: &[f64]) -> Result<EnsembleMatrix> {
        generate_ensemble(self.ckpt, obs, n_ensembles, &self.sampler, &mut self.rng)
    }
}

/// Nature trajectory plus the observation stream, one entry per DA step
/// (spinup cycles included).
struct Truth {
    start: Vec<f64>,
    states: Vec<Vec<f64>>,
    obs: Vec<Observation>,
}

fn truth(cfg: &ExperimentConfig) -> Result<Truth> {
    let model = cfg.nature_model()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.nature);
    let start = attractor_state(&model, cfg.nature_spinup, &mut rng)?.0;
    let total = cfg.spinup_steps + cfg.n_da_steps;
    let mut obs_rng = ChaCha8Rng::seed_from_u64(cfg.seeds.obs);
    let mut ws = Rk4Workspace::new(cfg.n);
    let mut u = start.clone();
    let mut states = Vec::with_capacity(total);
    let mut obs = Vec::with_capacity(total);
    for step in 0..total {
        if !ws.step(&mut u, model.forcing_f, model.dt) {
            return Err(Error::BlowUp { step }.at_step(step));
        }
        let sv = StateVector(u.clone());
        obs.push(observe(&sv, cfg.interval_p, cfg.noise_std_e, &mut obs_rng)?);
        states.push(sv.0);
    }
    Ok(Truth { start, states, obs })
}

fn perturbed(base: &[f64], std: f64, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, std).expect("validated std");
    (0..count)
        .map(|_| base.iter().map(|&v| v + noise.sample(&mut rng)).collect())
        .collect()
}

fn finish(
    method: Method,
    cfg: &ExperimentConfig,
    truth: Truth,
    assimilated: Vec<Vec<f64>>,
    spread: Vec<f64>,
    checkpoint_hash: Option<String>,
) -> Result<RunResult> {
    let skip = cfg.spinup_steps;
    let nature: Vec<Vec<f64>> = truth.states.into_iter().skip(skip).collect();
    let assimilated: Vec<Vec<f64>> = assimilated.into_iter().skip(skip).collect();
    let spread_series: Vec<f64> = spread.into_iter().skip(skip).collect();
    let rmse_series = assimilated
        .iter()
        .zip(&nature)
        .map(|(a, n)| spatial_rmse(a, n))
        .collect();
    let time_mean_rmse = time_mean_rmse(&assimilated, &nature, cfg.discard)?;
    Ok(RunResult {
        method,
        config: cfg.clone(),
        assimilated,
        nature,
        rmse_series,
        spread_series,
        time_mean_rmse,
        checkpoint_hash,
    })
}

/// Ensemble LETKF: every member is propagated with the simulation model and
/// replaced by its analysis; the analysis mean is scored.
pub fn run_letkf_baseline(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let sim = cfg.sim_model()?;
    let truth = truth(cfg)?;
    let mut members = perturbed(
        &truth.start,
        cfg.init_perturbation,
        cfg.n_ensembles,
        cfg.seeds.ensemble_init,
    );
    let mut ws = Rk4Workspace::new(cfg.n);
    let mut assimilated = Vec::with_capacity(truth.states.len());
    let mut spread = Vec::with_capacity(truth.states.len());
    for (step, obs) in truth.obs.iter().enumerate() {
        for m in members.iter_mut() {
            if !ws.step(m, sim.forcing_f, sim.dt) {
                return Err(Error::BlowUp { step }.at_step(step));
            }
        }
        let xf = EnsembleMatrix::from_states(&members).map_err(|e| e.at_step(step))?;
        spread.push(xf.mean_spread());
        let xa = analysis(&xf, obs, &cfg.letkf_cfg).map_err(|e| e.at_step(step))?;
        for (m, member) in members.iter_mut().enumerate() {
            member.copy_from_slice(xa.members.column(m).as_slice());
        }
        assimilated.push(xa.mean().iter().copied().collect());
    }
    finish(Method::Letkf, cfg, truth, assimilated, spread, None)
}

/// One simulation corrected by LETKF over generated pseudo ensembles; the
/// carried state is the average of the analysis mean and the simulation state.
pub fn run_generative_da<G: EnsembleGenerator>(cfg: &ExperimentConfig, generator: &mut G) -> Result<RunResult> {
    cfg.validate()?;
    if let Some(p) = generator.interval_p() {
        if p != cfg.interval_p {
            return Err(Error::IntervalMismatch {
                checkpoint: p,
                observation: cfg.interval_p,
            });
        }
    }
    let sim = cfg.sim_model()?;
    let truth = truth(cfg)?;
    let mut x = perturbed(&truth.start, cfg.init_perturbation, 1, cfg.seeds.ensemble_init).remove(0);
    let mut ws = Rk4Workspace::new(cfg.n);
    let mut assimilated = Vec::with_capacity(truth.states.len());
    let mut spread = Vec::with_capacity(truth.states.len());
    for (step, obs) in truth.obs.iter().enumerate() {
        if !ws.step(&mut x, sim.forcing_f, sim.dt) {
            return Err(Error::BlowUp { step }.at_step(step));
        }
        let xf = generator
            .generate(obs, cfg.n_ensembles, &x)
            .map_err(|e| e.at_step(step))?;
        if xf.n() != cfg.n || xf.n_ensembles() != cfg.n_ensembles {
            return Err(Error::Shape(format!("generator returned {}x{}", xf.n(), xf.n_ensembles())).at_step(step));
        }
        spread.push(xf.mean_spread());
        let xa = analysis(&xf, obs, &cfg.letkf_cfg).map_err(|e| e.at_step(step))?;
        let mean = xa.mean();
        for (xi, mi) in x.iter_mut().zip(mean.iter()) {
            *xi = 0.5 * (mi + *xi);
        }
        assimilated.push(x.clone());
    }
    finish(Method::Generative, cfg, truth, assimilated, spread, None)
}

/// [`run_generative_da`] with guided DDIM sampling from `ckpt`.
pub fn run_generative_with_checkpoint(cfg: &ExperimentConfig, ckpt: &Checkpoint) -> Result<RunResult> {
    let mut generator = DiffusionGenerator::new(ckpt, cfg.sampler, cfg.seeds.sampler);
    let mut run = run_generative_da(cfg, &mut generator)?;
    run.checkpoint_hash = Some(ckpt.content_hash()?);
    Ok(run)
}

pub fn run(method: Method, cfg: &ExperimentConfig, ckpt: Option<&Checkpoint>) -> Result<RunResult> {
    match (method, ckpt) {
        (Method::Letkf, _) => run_letkf_baseline(cfg),
        (Method::Generative, Some(c)) => run_generative_with_checkpoint(cfg, c),
        (Method::Generative, None) => Err(Error::Config("the generative method needs a checkpoint".into())),
    }
}

#[derive(Serialize)]
struct RunSidecar<'a> {
    format_version: u32,
    method: Method,
    config: &'a ExperimentConfig,
    time_mean_rmse: f64,
    mean_spread: f64,
    checkpoint_hash: &'a Option<String>,
}

impl RunResult {
    pub fn mean_spread(&self) -> f64 {
        self.spread_series.iter().sum::<f64>() / self.spread_series.len().max(1) as f64
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("step,rmse,spread\n");
        for (k, (r, sp)) in self.rmse_series.iter().zip(&self.spread_series).enumerate() {
            let _ = writeln!(s, "{k},{r:.16e},{sp:.16e}");
        }
        s
    }

    pub fn sidecar_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&RunSidecar {
            format_version: RUN_FORMAT_VERSION,
            method: self.method,
            config: &self.config,
            time_mean_rmse: self.time_mean_rmse,
            mean_spread: self.mean_spread(),
            checkpoint_hash: &self.checkpoint_hash,
        })?)
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(dir.join(format!("{stem}.csv")), self.csv().as_bytes())?;
        write(dir.join(format!("{stem}.json")), self.sidecar_json()?.as_bytes())
    }
}

/// Converts trajectory rows into a `steps x N` matrix.
pub fn trajectory_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(rows.len(), n, |k, i| rows[k][i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small(method: Method, f_nature: f64, steps: usize) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(method, f_nature, 1, steps, Seeds::from_master(11));
        cfg.discard = 0;
        cfg.nature_spinup = 200;
        cfg
    }

    #[test]
    fn rmse_reductions() {
        let a = vec![vec![1.0, 2.0, 3.0]; 4];
        assert_eq!(time_mean_rmse(&a, &a, 0).unwrap(), 0.0);
        let b: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| v - 0.75).collect()).collect();
        assert!((time_mean_rmse(&a, &b, 1).unwrap() - 0.75).abs() < 1e-15);
        assert!(time_mean_rmse(&a, &b, 4).is_err());
        assert!(time_mean_rmse(&a, &b[..3], 0).is_err());
    }

    #[test]
    fn rmse_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (steps, n) = (37, 40);
        let a: Vec<Vec<f64>> = (0..steps)
            .map(|_| (0..n).map(|_| rng.random::<f64>() * 10.0).collect())
            .collect();
        let b: Vec<Vec<f64>> = (0..steps)
            .map(|_| (0..n).map(|_| rng.random::<f64>() * 10.0).collect())
            .collect();
        let mut total = 0.0;
        for k in 0..steps {
            let mut ss = 0.0;
            for i in 0..n {
                let d = a[k][i] - b[k][i];
                ss += d * d;
            }
            total += (ss / n as f64).sqrt();
        }
        assert!((time_mean_rmse(&a, &b, 0).unwrap() - total / steps as f64).abs() <= 1e-12);
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        let s = Seeds::from_master(3);
        assert_eq!(s, Seeds::from_master(3));
        assert_ne!(s, Seeds::from_master(4));
        let all = [s.nature, s.obs, s.ensemble_init, s.sampler];
        for i in 0..4 {
            for j in 0..i {
                assert_ne!(all[i], all[j]);
            }
        }
    }

    #[test]
    fn config_validation() {
        let good = small(Method::Letkf, 8.0, 10);
        good.validate().unwrap();
        assert!(ExperimentConfig {
            n_da_steps: 0,
            ..good.clone()
        }
        .validate()
        .is_err());
        assert!(ExperimentConfig {
            n_ensembles: 1,
            ..good.clone()
        }
        .validate()
        .is_err());
        assert!(ExperimentConfig {
            discard: 10,
            ..good.clone()
        }
        .validate()
        .is_err());
        assert!(ExperimentConfig { interval_p: 2, ..good }.validate().is_err());
    }

    #[test]
    fn zero_innovation_keeps_forecast_mean() {
        // single step, noiseless observation equal to the forecast mean
        let mut cfg = small(Method::Letkf, 8.0, 1);
        cfg.noise_std_e = 0.0;
        let tr = truth(&cfg).unwrap();
        let sim = cfg.sim_model().unwrap();
        let mut members = perturbed(&tr.start, 1.0, cfg.n_ensembles, cfg.seeds.ensemble_init);
        let mut ws = Rk4Workspace::new(cfg.n);
        for m in members.iter_mut() {
            ws.step(m, sim.forcing_f, sim.dt);
        }
        let xf = EnsembleMatrix::from_states(&members).unwrap();
        let mean: Vec<f64> = xf.mean().iter().copied().collect();
        let obs = Observation {
            values: mean.clone(),
            indices: (0..cfg.n).collect(),
            interval_p: 1,
            noise_std_e: 0.0,
        };
        let xa = analysis(&xf, &obs, &cfg.letkf_cfg).unwrap();
        let amean: Vec<f64> = xa.mean().iter().copied().collect();
        assert!(spatial_rmse(&amean, &mean) < 1e-10);
        let nature = &tr.states[0];
        assert!((spatial_rmse(&amean, nature) - spatial_rmse(&mean, nature)).abs() < 1e-10);
    }

    #[test]
    fn baseline_is_deterministic_and_tracks() {
        let cfg = small(Method::Letkf, 8.0, 150);
        let a = run_letkf_baseline(&cfg).unwrap();
        let b = run_letkf_baseline(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rmse_series.len(), 150);
        assert_eq!(a.assimilated.len(), a.nature.len());
        assert!(a.rmse_series.iter().all(|&r| r >= 0.0));
        let late: f64 = a.rmse_series[100..].iter().sum::<f64>() / 50.0;
        assert!(late < 1.0, "late RMSE {late}");
    }

    #[test]
    fn spinup_cycles_are_not_recorded() {
        let mut cfg = small(Method::Letkf, 8.0, 20);
        cfg.spinup_steps = 5;
        let r = run_letkf_baseline(&cfg).unwrap();
        assert_eq!(r.nature.len(), 20);
        let tr = truth(&cfg).unwrap();
        assert_eq!(r.nature[0], tr.states[5]);
    }

    /// Returns the simulation state with a tiny alternating jitter.
    struct Echo;

    impl EnsembleGenerator for Echo {
        fn generate(&mut self, _obs: &Observation, n_ens: usize, sim: &[f64]) -> Result<EnsembleMatrix> {
            let states: Vec<Vec<f64>> = (0..n_ens)
                .map(|m| {
                    let s = if m % 2 == 0 { 1e-3 } else { -1e-3 };
                    sim.iter()
                        .enumerate()
                        .map(|(i, v)| v + s * (1.0 + (i % 3) as f64))
                        .collect()
                })
                .collect();
            EnsembleMatrix::from_states(&states)
        }
    }

    /// Returns a fixed ensemble and remembers the state it was shown.
    struct Fixed {
        members: EnsembleMatrix,
        seen: Vec<Vec<f64>>,
    }

    impl EnsembleGenerator for Fixed {
        fn generate(&mut self, _obs: &Observation, _n: usize, sim: &[f64]) -> Result<EnsembleMatrix> {
            self.seen.push(sim.to_vec());
            Ok(self.members.clone())
        }
    }

    #[test]
    fn update_is_average_of_analysis_mean_and_simulation() {
        let mut cfg = small(Method::Generative, 8.0, 3);
        cfg.n_ensembles = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let members = EnsembleMatrix::new(DMatrix::from_fn(cfg.n, 6, |_, _| rng.random::<f64>() * 8.0)).unwrap();
        let mut g = Fixed {
            members: members.clone(),
            seen: Vec::new(),
        };
        let run = run_generative_da(&cfg, &mut g).unwrap();
        let tr = truth(&cfg).unwrap();
        for k in 0..3 {
            let xa = analysis(&members, &tr.obs[k], &cfg.letkf_cfg).unwrap();
            for i in 0..cfg.n {
                let expect = 0.5 * (xa.mean()[i] + g.seen[k][i]);
                assert_eq!(run.assimilated[k][i], expect);
            }
        }
    }

    #[test]
    fn echo_generator_fixed_point() {
        // observations equal to the simulation state leave it unchanged
        let mut cfg = small(Method::Generative, 8.0, 1);
        cfg.n_ensembles = 8;
        let tr = truth(&cfg).unwrap();
        let mut sim = perturbed(&tr.start, cfg.init_perturbation, 1, cfg.seeds.ensemble_init).remove(0);
        Rk4Workspace::new(cfg.n).step(&mut sim, 8.0, cfg.dt);
        let xf = Echo.generate(&tr.obs[0], 8, &sim).unwrap();
        let obs = Observation {
            values: sim.clone(),
            indices: (0..cfg.n).collect(),
            interval_p: 1,
            noise_std_e: 1.0,
        };
        let xa = analysis(&xf, &obs, &cfg.letkf_cfg).unwrap();
        let updated: Vec<f64> = xa.mean().iter().zip(&sim).map(|(m, s)| 0.5 * (m + s)).collect();
        assert!(spatial_rmse(&updated, &sim) < 1e-9);
        let run = run_generative_da(&cfg, &mut Echo).unwrap();
        assert_eq!(run.assimilated.len(), 1);
    }

    #[test]
    fn generator_interval_must_match() {
        struct P2;
        impl EnsembleGenerator for P2 {
            fn interval_p(&self) -> Option<usize> {
                Some(2)
            }
            fn generate(&mut self, _: &Observation, _: usize, _: &[f64]) -> Result<EnsembleMatrix> {
                unreachable!()
            }
        }
        let cfg = small(Method::Generative, 8.0, 2);
        assert!(matches!(
            run_generative_da(&cfg, &mut P2),
            Err(Error::IntervalMismatch { .. })
        ));
    }

    #[test]
    fn persisted_run() {
        let cfg = small(Method::Letkf, 8.0, 5);
        let r = run_letkf_baseline(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.save(dir.path(), "run").unwrap();
        let csv = std::fs::read_to_string(dir.path().join("run.csv")).unwrap();
        assert_eq!(csv.lines().count(), 6);
        let side: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("run.json")).unwrap()).unwrap();
        assert_eq!(side["format_version"], 1);
        assert_eq!(side["method"], "letkf");
        assert_eq!(side["time_mean_rmse"].as_f64().unwrap(), r.time_mean_rmse);
        let back: ExperimentConfig = serde_json::from_value(side["config"].clone()).unwrap();
        assert_eq!(back, cfg);
    }
}
