//! Experiment sweeps, Hovmöller export and run manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assimilation::{run, ExperimentConfig, Method, RunResult, Seeds};
use crate::dataset::write;
use crate::error::{Error, Result};
use crate::letkf::LetkfConfig;
use crate::nn::Checkpoint;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const SWEEP_FORMAT_VERSION: u32 = 1;

pub fn default_f_values() -> Vec<f64> {
    vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0]
}

pub fn default_p_values() -> Vec<usize> {
    vec![1, 2, 4, 8]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub f_values: Vec<f64>,
    pub p_values: Vec<usize>,
    pub methods: Vec<Method>,
    /// Per-cell settings; `f_nature`, `interval_p`, `seeds` and the LETKF
    /// interval/cutoff/inflation are replaced for every cell.
    pub template: ExperimentConfig,
    pub master_seed: u64,
    pub workers: usize,
}

impl SweepSpec {
    pub fn new(n_da_steps: usize, master_seed: u64) -> Self {
        SweepSpec {
            f_values: default_f_values(),
            p_values: default_p_values(),
            methods: vec![Method::Letkf, Method::Generative],
            template: ExperimentConfig::new(Method::Letkf, 8.0, 1, n_da_steps, Seeds::from_master(master_seed)),
            master_seed,
            workers: 1,
        }
    }

    pub fn validate(&self, checkpoints: &CheckpointStore) -> Result<()> {
        if self.f_values.is_empty() || self.p_values.is_empty() || self.methods.is_empty() {
            return Err(Error::Config("sweep lists must be non-empty".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("need at least one worker".into()));
        }
        if self.methods.contains(&Method::Generative) {
            let missing: Vec<usize> = self
                .p_values
                .iter()
                .copied()
                .filter(|p| checkpoints.get(*p).is_none())
                .collect();
            if !missing.is_empty() {
                return Err(Error::Config(format!("no trained checkpoint for p = {missing:?}")));
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<(Method, f64, usize)> {
        let mut cells = Vec::new();
        for &m in &self.methods {
            for &f in &self.f_values {
                for &p in &self.p_values {
                    cells.push((m, f, p));
                }
            }
        }
        cells.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
        cells
    }

    /// Fully resolved configuration of one cell.
    pub fn cell_config(&self, method: Method, f_nature: f64, interval_p: usize) -> ExperimentConfig {
        let mut cfg = self.template.clone();
        cfg.f_nature = f_nature;
        cfg.interval_p = interval_p;
        cfg.seeds = cell_seeds(self.master_seed, f_nature, interval_p, method);
        cfg.letkf_cfg = LetkfConfig::for_interval(
            interval_p,
            method.default_inflation(),
            self.template.noise_std_e * self.template.noise_std_e,
        );
        cfg
    }
}

fn derive(parts: &str) -> u64 {
    let digest = Sha256::digest(parts.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Per-cell seeds. Nature and observation streams depend only on
/// `(master, F, p)`, so both methods in a column see the same truth and the
/// same observations; ensemble and sampler streams also depend on the method.
pub fn cell_seeds(master: u64, f_nature: f64, interval_p: usize, method: Method) -> Seeds {
    let shared = format!("{master}/{:016x}/{interval_p}", f_nature.to_bits());
    Seeds {
        nature: derive(&format!("{shared}/nature")),
        obs: derive(&format!("{shared}/obs")),
        ensemble_init: derive(&format!("{shared}/{method}/ensemble")),
        sampler: derive(&format!("{shared}/{method}/sampler")),
    }
}

/// Trained checkpoints indexed by observation interval.
#[derive(Debug, Default)]
pub struct CheckpointStore {
    by_p: BTreeMap<usize, (PathBuf, Checkpoint)>,
}

impl CheckpointStore {
    /// Loads `root` itself if it is a checkpoint, and every immediate
    /// subdirectory that is one. Two checkpoints for the same interval are an error.
    pub fn open(root: &Path) -> Result<Self> {
        let mut store = CheckpointStore::default();
        let mut dirs = vec![root.to_path_buf()];
        let mut entries: Vec<PathBuf> = fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        entries.sort();
        dirs.extend(entries);
        for dir in dirs {
            if !dir.join("arch.json").exists() {
                continue;
            }
            let ckpt = Checkpoint::load(&dir)?;
            if let Some((prev, _)) = store.by_p.get(&ckpt.interval_p) {
                return Err(Error::Config(format!(
                    "two checkpoints for p = {}: {} and {}",
                    ckpt.interval_p,
                    prev.display(),
                    dir.display()
                )));
            }
            store.by_p.insert(ckpt.interval_p, (dir, ckpt));
        }
        Ok(store)
    }

    pub fn insert(&mut self, path: PathBuf, ckpt: Checkpoint) {
        self.by_p.insert(ckpt.interval_p, (path, ckpt));
    }

    pub fn get(&self, interval_p: usize) -> Option<&Checkpoint> {
        self.by_p.get(&interval_p).map(|(_, c)| c)
    }

    pub fn intervals(&self) -> Vec<usize> {
        self.by_p.keys().copied().collect()
    }

    pub fn hashes(&self) -> Result<BTreeMap<usize, String>> {
        self.by_p
            .iter()
            .map(|(&p, (_, c))| Ok((p, c.content_hash()?)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub method: Method,
    pub f_nature: f64,
    pub interval_p: usize,
    pub time_mean_rmse: Option<f64>,
    pub mean_spread: Option<f64>,
    pub error: Option<String>,
}

impl GridCell {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

/// One time-mean RMSE per `(method, F, p)`, sorted in that order. Cells
/// that fail are recorded with their error; the sweep carries on.
pub fn rmse_grid(spec: &SweepSpec, checkpoints: &CheckpointStore) -> Result<Vec<GridCell>> {
    rmse_grid_with(spec, checkpoints, |_| {})
}

/// [`rmse_grid`] with a callback invoked as each cell finishes.
pub fn rmse_grid_with<F>(spec: &SweepSpec, checkpoints: &CheckpointStore, on_cell: F) -> Result<Vec<GridCell>>
where
    F: Fn(&GridCell) + Sync,
{
    spec.validate(checkpoints)?;
    let cells = spec.cells();
    let results: Mutex<Vec<Option<GridCell>>> = Mutex::new(vec![None; cells.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..spec.workers.min(cells.len()) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(method, f, p)) = cells.get(k) else {
                    break;
                };
                let cfg = spec.cell_config(method, f, p);
                let cell = match run(method, &cfg, checkpoints.get(p)) {
                    Ok(r) => GridCell {
                        method,
                        f_nature: f,
                        interval_p: p,
                        time_mean_rmse: Some(r.time_mean_rmse),
                        mean_spread: Some(r.mean_spread()),
                        error: None,
                    },
                    Err(e) => GridCell {
                        method,
                        f_nature: f,
                        interval_p: p,
                        time_mean_rmse: None,
                        mean_spread: None,
                        error: Some(e.to_string()),
                    },
                };
                on_cell(&cell);
                results.lock().expect("no poisoned workers")[k] = Some(cell);
            });
        }
    });
    Ok(results
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|c| c.expect("every cell ran"))
        .collect())
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn grid_csv(cells: &[GridCell]) -> String {
    let mut s = String::from("method,f_nature,interval_p,time_mean_rmse,mean_spread,status\n");
    for c in cells {
        let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
        let status = match &c.error {
            None => "ok".to_string(),
            Some(e) => format!("\"failed: {}\"", e.replace('"', "'")),
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            c.method,
            c.f_nature,
            c.interval_p,
            opt(c.time_mean_rmse),
            opt(c.mean_spread),
            status
        );
    }
    s
}

fn matrix_csv(rows: impl Iterator<Item = Vec<f64>>) -> String {
    let mut s = String::new();
    for row in rows {
        let line: Vec<String> = row.into_iter().map(num).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

/// Absolute error `|assimilated - nature|` per step and grid point.
pub fn abs_error(run: &RunResult) -> Vec<Vec<f64>> {
    run.assimilated
        .iter()
        .zip(&run.nature)
        .map(|(a, n)| a.iter().zip(n).map(|(x, y)| (x - y).abs()).collect())
        .collect()
}

/// Writes `nature.csv`, `assimilated.csv` and `abs_error.csv` (rows are DA
/// steps, columns grid points) and returns their paths.
pub fn hovmoller_export(run: &RunResult, out: &Path) -> Result<[PathBuf; 3]> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let paths = [
        out.join("nature.csv"),
        out.join("assimilated.csv"),
        out.join("abs_error.csv"),
    ];
    write(&paths[0], matrix_csv(run.nature.iter().cloned()).as_bytes())?;
    write(&paths[1], matrix_csv(run.assimilated.iter().cloned()).as_bytes())?;
    write(&paths[2], matrix_csv(abs_error(run).into_iter()).as_bytes())?;
    Ok(paths)
}

/// Everything needed to repeat a command bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub checkpoint_hashes: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: &impl Serialize) -> Result<Self> {
        Ok(Manifest {
            format_version: MANIFEST_FORMAT_VERSION,
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: serde_json::to_value(config)?,
            checkpoint_hashes: BTreeMap::new(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("run_manifest.json");
        write(&path, serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec() -> SweepSpec {
        let mut s = SweepSpec::new(12, 5);
        s.template.nature_spinup = 50;
        s.template.discard = 2;
        s.template.n_ensembles = 8;
        s.f_values = vec![11.0, 8.0];
        s.p_values = vec![2, 1];
        s.methods = vec![Method::Letkf];
        s
    }

    #[test]
    fn grid_is_sorted_and_complete() {
        let cells = rmse_grid(&spec(), &CheckpointStore::default()).unwrap();
        let keys: Vec<(f64, usize)> = cells.iter().map(|c| (c.f_nature, c.interval_p)).collect();
        assert_eq!(keys, vec![(8.0, 1), (8.0, 2), (11.0, 1), (11.0, 2)]);
        assert!(cells.iter().all(|c| c.ok() && c.time_mean_rmse.unwrap() >= 0.0));
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let one = rmse_grid(&spec(), &CheckpointStore::default()).unwrap();
        let mut s = spec();
        s.workers = 3;
        assert_eq!(rmse_grid(&s, &CheckpointStore::default()).unwrap(), one);
    }

    #[test]
    fn failing_cells_are_recorded() {
        let mut s = spec();
        s.p_values = vec![1, 100];
        let cells = rmse_grid(&s, &CheckpointStore::default()).unwrap();
        assert_eq!(cells.len(), 4);
        assert_eq!(cells.iter().filter(|c| !c.ok()).count(), 2);
        let csv = grid_csv(&cells);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.contains("failed"));
    }

    #[test]
    fn generative_needs_checkpoints() {
        let mut s = spec();
        s.methods = vec![Method::Generative];
        assert!(rmse_grid(&s, &CheckpointStore::default()).is_err());
    }

    #[test]
    fn default_sweep_cardinality() {
        let s = SweepSpec::new(10, 0);
        assert_eq!(s.cells().len(), 7 * 4 * 2);
    }

    #[test]
    fn seeds_share_truth_across_methods() {
        let a = cell_seeds(1, 5.0, 2, Method::Letkf);
        let b = cell_seeds(1, 5.0, 2, Method::Generative);
        assert_eq!((a.nature, a.obs), (b.nature, b.obs));
        assert_ne!(a.sampler, b.sampler);
        assert_ne!(a.nature, cell_seeds(1, 6.0, 2, Method::Letkf).nature);
        assert_ne!(a.nature, cell_seeds(2, 5.0, 2, Method::Letkf).nature);
    }

    #[test]
    fn hovmoller_files() {
        let s = spec();
        let cfg = s.cell_config(Method::Letkf, 8.0, 1);
        let r = run(Method::Letkf, &cfg, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = hovmoller_export(&r, dir.path()).unwrap();
        let parse = |p: &Path| -> Vec<Vec<f64>> {
            fs::read_to_string(p)
                .unwrap()
                .lines()
                .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
                .collect()
        };
        let nature = parse(&paths[0]);
        let assim = parse(&paths[1]);
        let err = parse(&paths[2]);
        assert_eq!(err.len(), 12);
        assert!(err.iter().all(|r| r.len() == 40));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let (k, i) = (rng.random_range(0..12), rng.random_range(0..40));
            assert_eq!(err[k][i], (assim[k][i] - nature[k][i]).abs());
            assert_eq!(nature[k][i], r.nature[k][i]);
        }
        let first = fs::read(&paths[2]).unwrap();
        hovmoller_export(&r, dir.path()).unwrap();
        assert_eq!(fs::read(&paths[2]).unwrap(), first);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::new("sweep", 9, &spec()).unwrap();
        let path = m.save(dir.path()).unwrap();
        let back: Manifest = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
        assert_eq!(back, m);
        let s: SweepSpec = serde_json::from_value(back.config).unwrap();
        assert_eq!(s, spec());
    }
}
