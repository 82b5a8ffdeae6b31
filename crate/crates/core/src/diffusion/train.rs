use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::dataset::{sample_batch_from, write, Dataset, DEFAULT_HELDOUT_FRACTION};
use crate::error::{Error, Result};
use crate::nn::{adam_step, eval_loss, loss_and_grads, AdamState, Checkpoint, DenoiserParams, DEFAULT_P_DROP};

pub const DEFAULT_TRAIN_STEPS: u64 = 100_000;
pub const DEFAULT_BATCH_SIZE: usize = 16;
pub const DEFAULT_LR: f64 = 1e-3;
const HELDOUT_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub n_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub p_drop: f64,
    pub seed: u64,
    /// Log (and evaluate the held-out loss) every this many steps.
    pub log_every: u64,
    /// Save an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
    pub heldout_fraction: f64,
    /// Cap on held-out samples evaluated per log row.
    pub heldout_max: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_steps: DEFAULT_TRAIN_STEPS,
            batch_size: DEFAULT_BATCH_SIZE,
            lr: DEFAULT_LR,
            p_drop: DEFAULT_P_DROP,
            seed: 0,
            log_every: 500,
            checkpoint_every: 0,
            heldout_fraction: DEFAULT_HELDOUT_FRACTION,
            heldout_max: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(Error::Config(format!("p_drop must be in [0, 1], got {}", self.p_drop)));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::Config("held-out fraction must be in [0, 1)".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    /// Mean training loss since the previous row (`NaN` for the initial row).
    pub train_loss: f64,
    pub heldout_loss: f64,
    pub wall_seconds: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,train_loss,heldout_loss,wall_seconds\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.16e},{:.16e},{:.6}",
            r.step, r.train_loss, r.heldout_loss, r.wall_seconds
        );
    }
    s
}

/// Conditional noise-prediction loss on a fixed held-out subset. The
/// corruption draws come from a fixed seed, so values are comparable across
/// calls and only the parameters change.
pub fn heldout_loss(params: &DenoiserParams, ds: &Dataset, cfg: &TrainConfig, sched: &NoiseSchedule) -> Result<f64> {
    let (train, held) = ds.heldout_split(cfg.heldout_fraction);
    let held = if held.is_empty() { train } else { held };
    let idx: Vec<usize> = held.take(cfg.heldout_max.max(1)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_4e1d);
    let mut total = 0.0;
    for chunk in idx.chunks(HELDOUT_CHUNK) {
        let batch = ds.gather(chunk);
        total += eval_loss(params, &batch, sched, &mut rng, 0.0)? * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

/// Runs `cfg.n_steps` Adam updates starting from `start`. Step `s` draws its
/// batch and corruption from its own RNG stream, so resuming from a saved
/// checkpoint reproduces an uninterrupted run.
pub fn train(
    start: Checkpoint,
    ds: &Dataset,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    train_with(start, ds, cfg, checkpoint_dir, |_| {})
}

/// [`train`] with a callback receiving every log row as it is produced.
pub fn train_with(
    start: Checkpoint,
    ds: &Dataset,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut on_log: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if ds.n() != start.params.n() {
        return Err(Error::Shape(format!(
            "dataset grid {} vs network grid {}",
            ds.n(),
            start.params.n()
        )));
    }
    let sched = start.schedule()?;
    let mut ckpt = start;
    ckpt.normalizer = ds.normalizer();
    ckpt.interval_p = ds.interval_p();
    let mut opt = ckpt
        .optimizer
        .take()
        .unwrap_or_else(|| AdamState::new(ckpt.params.num_params()));
    let (train_range, _) = ds.heldout_split(cfg.heldout_fraction);
    let clock = Instant::now();
    let mut log = vec![LogRow {
        step: ckpt.train_steps,
        train_loss: f64::NAN,
        heldout_loss: heldout_loss(&ckpt.params, ds, cfg, &sched)?,
        wall_seconds: 0.0,
    }];
    on_log(&log[0]);
    let (mut acc, mut count) = (0.0, 0u64);
    let end = ckpt.train_steps + cfg.n_steps;
    while ckpt.train_steps < end {
        let step = ckpt.train_steps;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(step);
        let batch = sample_batch_from(ds, train_range.clone(), cfg.batch_size, &mut rng)?;
        let (loss, grads) = loss_and_grads(&ckpt.params, &batch, &sched, &mut rng, cfg.p_drop)
            .map_err(|_| Error::TrainingDiverged { step: step as usize })?;
        adam_step(&mut ckpt.params, &grads, &mut opt, cfg.lr)?;
        if !ckpt.params.is_finite() {
            return Err(Error::TrainingDiverged { step: step as usize });
        }
        ckpt.train_steps += 1;
        acc += loss as f64;
        count += 1;
        let done = ckpt.train_steps - (end - cfg.n_steps);
        if done.is_multiple_of(cfg.log_every) || ckpt.train_steps == end {
            log.push(LogRow {
                step: ckpt.train_steps,
                train_loss: acc / count as f64,
                heldout_loss: heldout_loss(&ckpt.params, ds, cfg, &sched)?,
                wall_seconds: clock.elapsed().as_secs_f64(),
            });
            on_log(log.last().expect("just pushed"));
            (acc, count) = (0.0, 0);
        }
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && done.is_multiple_of(cfg.checkpoint_every) && ckpt.train_steps != end {
                let mut snapshot = ckpt.clone();
                snapshot.optimizer = Some(opt.clone());
                snapshot.save(dir)?;
                write(dir.join("train_log.csv"), log_csv(&log).as_bytes())?;
            }
        }
    }
    ckpt.optimizer = Some(opt);
    if let Some(dir) = checkpoint_dir {
        ckpt.save(dir)?;
        write(dir.join("train_log.csv"), log_csv(&log).as_bytes())?;
    }
    Ok(TrainOutcome { checkpoint: ckpt, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::build_dataset;
    use crate::diffusion::ScheduleConfig;
    use crate::lorenz96::ModelConfig;
    use crate::nn::{init_params, ArchConfig};

    fn tiny() -> (Checkpoint, Dataset) {
        let arch = ArchConfig {
            base_channels: 8,
            level_multipliers: vec![1, 2],
            time_embed_dim: 8,
            groups: 4,
        };
        let cfg = ModelConfig::new(8.0, 0.05, 8).unwrap();
        let ds = build_dataset(2, 30, &cfg, 1, 1.0, 3).unwrap();
        let params = init_params(&arch, 8, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let ckpt = Checkpoint {
            params,
            schedule: ScheduleConfig::default(),
            normalizer: ds.normalizer(),
            interval_p: 1,
            train_steps: 0,
            optimizer: None,
        };
        (ckpt, ds)
    }

    fn quick(n_steps: u64) -> TrainConfig {
        TrainConfig {
            n_steps,
            log_every: 5,
            heldout_max: 8,
            heldout_fraction: 0.1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_leave_params_unchanged() {
        let (ckpt, ds) = tiny();
        let out = train(ckpt.clone(), &ds, &quick(0), None).unwrap();
        assert_eq!(out.checkpoint.params, ckpt.params);
        assert_eq!(out.log.len(), 1);
        assert_eq!(out.checkpoint.train_steps, 0);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (ckpt, ds) = tiny();
        let full = train(ckpt.clone(), &ds, &quick(6), None).unwrap();
        let half = train(ckpt, &ds, &quick(3), None).unwrap();
        let rest = train(half.checkpoint, &ds, &quick(3), None).unwrap();
        assert_eq!(rest.checkpoint.params, full.checkpoint.params);
        assert_eq!(rest.checkpoint.train_steps, 6);
        assert_eq!(full.log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 5, 6]);
    }

    #[test]
    fn writes_checkpoint_and_log() {
        let (ckpt, ds) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let out = train(ckpt, &ds, &quick(2), Some(dir.path())).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back, out.checkpoint);
        let csv = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        assert!(csv.starts_with("step,train_loss,heldout_loss,wall_seconds\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn divergence_reports_step() {
        let (ckpt, ds) = tiny();
        let cfg = TrainConfig { lr: 1e30, ..quick(10) };
        match train(ckpt, &ds, &cfg, None) {
            Err(Error::TrainingDiverged { step }) => assert!(step < 10),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
