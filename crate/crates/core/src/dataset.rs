//! Training data for the denoiser: Nature snapshots paired with zero-filled
//! mock observations, normalized to `[0, 1]` with one global min/max.
//!
//! On disk a dataset is a directory:
//!
//! | file             | contents                                              |
//! |------------------|-------------------------------------------------------|
//! | `meta.json`      | scalars, shapes and seeds                             |
//! | `states.f32`     | little-endian f32, row-major `[sample, grid]`         |
//! | `conditions.f32` | little-endian f32, row-major `[sample, grid]`         |
//! | `masks.u8`       | one byte per slot, 1 = observed                       |

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lorenz96::{self, ModelConfig, StateVector, DEFAULT_SPINUP};
use crate::observation::{observe, to_condition};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_HELDOUT_FRACTION: f64 = 0.02;

/// Affine map of the physical range `[min_val, max_val]` onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min_val: f64,
    pub max_val: f64,
}

impl Normalizer {
    pub fn new(min_val: f64, max_val: f64) -> Self {
        Normalizer { min_val, max_val }
    }

    pub fn fit<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<Self> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::EmptyDataset);
        }
        Ok(Normalizer::new(lo, hi))
    }

    /// A collapsed range (`max == min`) maps every value to 0.5.
    pub fn is_degenerate(&self) -> bool {
        self.max_val <= self.min_val
    }

    pub fn range(&self) -> f64 {
        self.max_val - self.min_val
    }

    #[inline]
    pub fn normalize(&self, x: f64) -> f64 {
        if self.is_degenerate() {
            0.5
        } else {
            (x - self.min_val) / self.range()
        }
    }

    #[inline]
    pub fn denormalize(&self, y: f64) -> f64 {
        if self.is_degenerate() {
            self.min_val
        } else {
            self.min_val + y * self.range()
        }
    }

    pub fn normalize_slice(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.normalize(x)).collect()
    }

    pub fn denormalize_slice(&self, ys: &[f64]) -> Vec<f64> {
        ys.iter().map(|&y| self.denormalize(y)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub n: usize,
    pub n_runs: usize,
    pub n_steps: usize,
    pub dt: f64,
    pub forcing_f: f64,
    pub interval_p: usize,
    pub noise_std_e: f64,
    pub min_val: f64,
    pub max_val: f64,
    pub seed: u64,
    pub format_version: u32,
}

/// Immutable collection of `(normalized state, condition)` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    states: Vec<f32>,
    conditions: Vec<f32>,
    masks: Vec<u8>,
}

/// Mini-batch in row-major `[sample, grid]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub n: usize,
    pub states: Vec<f32>,
    pub conditions: Vec<f32>,
    pub masks: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.states.len().checked_div(self.n).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

pub fn build_dataset(
    n_runs: usize,
    n_steps: usize,
    cfg: &ModelConfig,
    interval_p: usize,
    noise_std_e: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_runs == 0 || n_steps == 0 {
        return Err(Error::Config("n_runs and n_steps must be at least 1".into()));
    }
    cfg.validate()?;
    let n = cfg.n;
    let mut raw_states = Vec::with_capacity(n_runs * n_steps * n);
    let mut raw_obs: Vec<(Vec<usize>, Vec<f64>)> = Vec::with_capacity(n_runs * n_steps);
    for run in 0..n_runs {
        let mut rng = run_rng(seed, run);
        let init = lorenz96::perturbed_equilibrium(cfg, &mut rng);
        let traj = lorenz96::simulate(&init, cfg, n_steps, DEFAULT_SPINUP).map_err(|_| Error::RunBlowUp { run })?;
        for state in &traj {
            let obs = observe(state, interval_p, noise_std_e, &mut rng)?;
            raw_states.extend_from_slice(state.as_slice());
            raw_obs.push((obs.indices, obs.values));
        }
    }
    let normalizer = Normalizer::fit(&raw_states)?;
    let states = raw_states.iter().map(|&v| normalizer.normalize(v) as f32).collect();
    let mut conditions = Vec::with_capacity(raw_obs.len() * n);
    let mut masks = Vec::with_capacity(raw_obs.len() * n);
    for (indices, values) in raw_obs {
        let obs = crate::observation::Observation {
            values,
            indices,
            interval_p,
            noise_std_e,
        };
        let cond = to_condition(&obs, n, &normalizer)?;
        conditions.extend(cond.padded.iter().map(|&v| v as f32));
        masks.extend(cond.mask.iter().map(|&m| m as u8));
    }
    Ok(Dataset {
        meta: DatasetMeta {
            n,
            n_runs,
            n_steps,
            dt: cfg.dt,
            forcing_f: cfg.forcing_f,
            interval_p,
            noise_std_e,
            min_val: normalizer.min_val,
            max_val: normalizer.max_val,
            seed,
            format_version: DATASET_FORMAT_VERSION,
        },
        states,
        conditions,
        masks,
    })
}

fn run_rng(seed: u64, run: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run as u64);
    rng
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.states.len() / self.meta.n
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn n(&self) -> usize {
        self.meta.n
    }

    pub fn interval_p(&self) -> usize {
        self.meta.interval_p
    }

    pub fn normalizer(&self) -> Normalizer {
        Normalizer::new(self.meta.min_val, self.meta.max_val)
    }

    pub fn state(&self, i: usize) -> &[f32] {
        let n = self.meta.n;
        &self.states[i * n..(i + 1) * n]
    }

    pub fn condition(&self, i: usize) -> &[f32] {
        let n = self.meta.n;
        &self.conditions[i * n..(i + 1) * n]
    }

    pub fn mask(&self, i: usize) -> impl Iterator<Item = bool> + '_ {
        let n = self.meta.n;
        self.masks[i * n..(i + 1) * n].iter().map(|&m| m != 0)
    }

    /// Physical-unit state of sample `i`.
    pub fn physical_state(&self, i: usize) -> StateVector {
        let nrm = self.normalizer();
        StateVector(self.state(i).iter().map(|&v| nrm.denormalize(v as f64)).collect())
    }

    /// Splits off the trailing `fraction` of samples (at least one when the
    /// dataset has two or more) for loss monitoring.
    pub fn heldout_split(&self, fraction: f64) -> (Range<usize>, Range<usize>) {
        let len = self.len();
        let mut k = (len as f64 * fraction).round() as usize;
        if len >= 2 {
            k = k.clamp(1, len - 1);
        } else {
            k = 0;
        }
        (0..len - k, len - k..len)
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        let n = self.meta.n;
        let mut b = Batch {
            n,
            states: Vec::with_capacity(indices.len() * n),
            conditions: Vec::with_capacity(indices.len() * n),
            masks: Vec::with_capacity(indices.len() * n),
        };
        for &i in indices {
            b.states.extend_from_slice(self.state(i));
            b.conditions.extend_from_slice(self.condition(i));
            b.masks.extend(self.mask(i));
        }
        b
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = serde_json::to_string_pretty(&self.meta)?;
        write(dir.join("meta.json"), meta.as_bytes())?;
        write(dir.join("states.f32"), &f32_bytes(&self.states))?;
        write(dir.join("conditions.f32"), &f32_bytes(&self.conditions))?;
        write(dir.join("masks.u8"), &self.masks)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let meta: DatasetMeta = serde_json::from_slice(&fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?)?;
        if meta.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Format {
                path: meta_path,
                msg: format!("unsupported format_version {}", meta.format_version),
            });
        }
        let expected = meta.n_runs * meta.n_steps * meta.n;
        let states = read_f32(&dir.join("states.f32"), expected)?;
        let conditions = read_f32(&dir.join("conditions.f32"), expected)?;
        let mask_path = dir.join("masks.u8");
        let masks = fs::read(&mask_path).map_err(|e| Error::io(&mask_path, e))?;
        if masks.len() != expected {
            return Err(Error::Format {
                path: mask_path,
                msg: format!("expected {expected} bytes, found {}", masks.len()),
            });
        }
        Ok(Dataset {
            meta,
            states,
            conditions,
            masks,
        })
    }
}

/// Uniform sampling with replacement over the whole dataset.
pub fn sample_batch<R: Rng + ?Sized>(ds: &Dataset, batch_size: usize, rng: &mut R) -> Result<Batch> {
    sample_batch_from(ds, 0..ds.len(), batch_size, rng)
}

/// Uniform sampling with replacement over `range`.
pub fn sample_batch_from<R: Rng + ?Sized>(
    ds: &Dataset,
    range: Range<usize>,
    batch_size: usize,
    rng: &mut R,
) -> Result<Batch> {
    if range.is_empty() || ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(range.clone())).collect();
    Ok(ds.gather(&idx))
}

pub(crate) fn f32_bytes(xs: &[f32]) -> Vec<u8> {
    xs.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn write(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("expected {} bytes, found {}", expected * 4, bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
