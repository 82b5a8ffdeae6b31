//! Checkpoint directories.
//!
//! | file            | contents                                                  |
//! |-----------------|-----------------------------------------------------------|
//! | `arch.json`     | architecture, schedule, normalizer, interval, grid size   |
//! | `weights.f32`   | all parameter blocks concatenated in manifest order (LE)  |
//! | `optimizer.f32` | optional Adam first then second moments (LE)              |
//! | `manifest.json` | block names, shapes, offsets; optimizer step              |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamState, ArchConfig, DenoiserParams, ParamBlock};
use crate::dataset::{f32_bytes, read_f32, write, Normalizer};
use crate::diffusion::{NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchFile {
    format_version: u32,
    n: usize,
    arch: ArchConfig,
    schedule: ScheduleConfig,
    normalizer: Normalizer,
    interval_p: usize,
    train_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    total: usize,
    blocks: Vec<ParamBlock>,
    optimizer: Option<AdamState>,
}

/// A trained (or in-training) denoiser with everything needed to sample from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DenoiserParams,
    pub schedule: ScheduleConfig,
    pub normalizer: Normalizer,
    pub interval_p: usize,
    pub train_steps: u64,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_config(&self.schedule)
    }

    fn arch_file(&self) -> ArchFile {
        ArchFile {
            format_version: CHECKPOINT_FORMAT_VERSION,
            n: self.params.n(),
            arch: self.params.arch.clone(),
            schedule: self.schedule,
            normalizer: self.normalizer,
            interval_p: self.interval_p,
            train_steps: self.train_steps,
        }
    }

    /// SHA-256 over `arch.json` and `weights.f32` as written to disk.
    pub fn content_hash(&self) -> Result<String> {
        let arch = serde_json::to_string_pretty(&self.arch_file())?;
        let mut h = Sha256::new();
        h.update(arch.as_bytes());
        h.update(f32_bytes(&self.params.values));
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let arch = serde_json::to_string_pretty(&self.arch_file())?;
        write(dir.join("arch.json"), arch.as_bytes())?;
        write(dir.join("weights.f32"), &f32_bytes(&self.params.values))?;
        let manifest = Manifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            total: self.params.num_params(),
            blocks: self.params.layout().blocks.clone(),
            optimizer: self.optimizer.clone(),
        };
        write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?.as_bytes(),
        )?;
        let opt_path = dir.join("optimizer.f32");
        match &self.optimizer {
            Some(st) => {
                let mut both = st.m.clone();
                both.extend_from_slice(&st.v);
                write(&opt_path, &f32_bytes(&both))?;
            }
            None if opt_path.exists() => {
                fs::remove_file(&opt_path).map_err(|e| Error::io(&opt_path, e))?;
            }
            None => {}
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let arch_path = dir.join("arch.json");
        let arch: ArchFile = serde_json::from_slice(&fs::read(&arch_path).map_err(|e| Error::io(&arch_path, e))?)?;
        if arch.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format {
                path: arch_path,
                msg: format!("unsupported format_version {}", arch.format_version),
            });
        }
        let man_path = dir.join("manifest.json");
        let manifest: Manifest = serde_json::from_slice(&fs::read(&man_path).map_err(|e| Error::io(&man_path, e))?)?;
        let values = read_f32(&dir.join("weights.f32"), manifest.total)?;
        let params = DenoiserParams::from_values(&arch.arch, arch.n, values)?;
        if params.layout().blocks != manifest.blocks {
            return Err(Error::Format {
                path: man_path,
                msg: "parameter blocks do not match the architecture".into(),
            });
        }
        let optimizer = match manifest.optimizer {
            Some(mut st) => {
                let both = read_f32(&dir.join("optimizer.f32"), 2 * manifest.total)?;
                st.m = both[..manifest.total].to_vec();
                st.v = both[manifest.total..].to_vec();
                Some(st)
            }
            None => None,
        };
        Ok(Checkpoint {
            params,
            schedule: arch.schedule,
            normalizer: arch.normalizer,
            interval_p: arch.interval_p,
            train_steps: arch.train_steps,
            optimizer,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ckpt(with_opt: bool) -> Checkpoint {
        let arch = ArchConfig {
            base_channels: 8,
            level_multipliers: vec![1, 2],
            time_embed_dim: 8,
            groups: 4,
        };
        let params = init_params(&arch, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let optimizer = with_opt.then(|| {
            let mut st = AdamState::new(params.num_params());
            st.step = 12;
            st.m.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 * 1e-3);
            st
        });
        Checkpoint {
            params,
            schedule: ScheduleConfig::default(),
            normalizer: Normalizer::new(-8.5, 13.25),
            interval_p: 2,
            train_steps: 12,
            optimizer,
        }
    }

    #[test]
    fn round_trip_with_and_without_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        for with_opt in [true, false] {
            let c = ckpt(with_opt);
            c.save(dir.path()).unwrap();
            let back = Checkpoint::load(dir.path()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.content_hash().unwrap(), c.content_hash().unwrap());
        }
    }

    #[test]
    fn hash_tracks_weights() {
        let a = ckpt(false);
        let mut b = a.clone();
        b.params.values[0] += 1.0;
        assert_ne!(a.content_hash().unwrap(), b.content_hash().unwrap());
        assert_eq!(a.content_hash().unwrap().len(), 64);
    }

    #[test]
    fn truncated_weights_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        ckpt(false).save(dir.path()).unwrap();
        fs::write(dir.path().join("weights.f32"), [0u8; 12]).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Format { .. })));
    }
}
