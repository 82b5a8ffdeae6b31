//! Flat JSON config file. Every key is optional and mirrors a command-line
//! flag with dashes turned into underscores; a flag given on the command
//! line wins over the file. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,

    // generate-data
    pub runs: Option<usize>,
    pub run_steps: Option<usize>,
    pub forcing_f: Option<f64>,
    pub noise_std: Option<f64>,
    pub p: Option<usize>,

    // train
    pub data: Option<PathBuf>,
    pub train_steps: Option<u64>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub p_drop: Option<f64>,
    pub base_channels: Option<usize>,
    pub log_every: Option<u64>,
    pub checkpoint_every: Option<u64>,
    pub resume: Option<bool>,

    // assimilate, hovmoller, sweep
    pub method: Option<String>,
    pub f_nature: Option<f64>,
    pub f_sim: Option<f64>,
    pub steps: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub ensembles: Option<usize>,
    pub inflation: Option<f64>,
    pub cutoff: Option<f64>,
    pub discard: Option<usize>,
    pub spinup: Option<usize>,
    pub ddim_steps: Option<usize>,
    pub guidance_w: Option<f64>,
    pub eta: Option<f64>,
    pub methods: Option<Vec<String>>,
    pub f_values: Option<Vec<f64>>,
    pub p_values: Option<Vec<usize>>,
    pub checkpoints: Option<PathBuf>,
    pub workers: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}
