//! Checkpoint directories: `manifest.json` plus four flat ABFN tensors
//! (`params`, `ema`, `adam_m`, `adam_v`) holding every parameter in
//! registration order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DenoiserConfig, TrainConfig, TrainState, UNet};
use crate::error::{Error, Result};
use crate::io::{read_json, read_tensor, write_json, write_tensor, AbfnTensor};
use crate::nn::{AdamState, ParamStore};
use crate::noise::NoiseConfig;
use crate::schedule::ScheduleConfig;

pub const CHECKPOINT_FORMAT: u32 = 1;
const PREFIX: &str = "ckpt_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 4],
}

/// Training randomness is counter-based, so its full state is the seeds
/// plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub train_seed: u64,
    pub noise_seed: u64,
    pub counter: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub step: u64,
    pub image_size: [usize; 2],
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub noise: NoiseConfig,
    pub params: Vec<ParamEntry>,
    pub rng: RngState,
}

impl CheckpointManifest {
    #[allow(clippy::too_many_arguments)]
    pub fn describe(
        state: &TrainState,
        image_size: [usize; 2],
        denoiser: &DenoiserConfig,
        train: &TrainConfig,
        schedule: &ScheduleConfig,
        noise: &NoiseConfig,
    ) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT,
            step: state.step,
            image_size,
            denoiser: denoiser.clone(),
            train: train.clone(),
            schedule: schedule.clone(),
            noise: noise.clone(),
            params: state
                .params
                .names()
                .iter()
                .zip(state.params.shapes())
                .map(|(name, shape)| ParamEntry {
                    name: name.clone(),
                    shape,
                })
                .collect(),
            rng: RngState {
                train_seed: train.seed,
                noise_seed: noise.seed,
                counter: state.step,
            },
        }
    }
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub net: UNet,
    pub state: TrainState,
}

impl Checkpoint {
    /// Configs with the seeds restored from the manifest.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.manifest.rng.train_seed,
            ..self.manifest.train.clone()
        }
    }

    pub fn noise_config(&self) -> NoiseConfig {
        NoiseConfig {
            seed: self.manifest.rng.noise_seed,
            ..self.manifest.noise.clone()
        }
    }
}

fn flat(store: &ParamStore<f32>) -> AbfnTensor {
    let data = store.flatten();
    AbfnTensor {
        dims: vec![data.len() as u32],
        data,
    }
}

pub fn checkpoint_dir_name(step: u64) -> String {
    format!("{PREFIX}{step:08}")
}

/// Writes `root/ckpt_<step>` atomically: files go to a temp directory that
/// is renamed into place once complete.
pub fn save_checkpoint(root: &Path, manifest: &CheckpointManifest, state: &TrainState) -> Result<PathBuf> {
    let final_dir = root.join(checkpoint_dir_name(state.step));
    let tmp_dir = root.join(format!(".{}.partial", checkpoint_dir_name(state.step)));
    if tmp_dir.exists() {
        fs::remove_dir_all(&tmp_dir).map_err(|e| Error::io(&tmp_dir, e))?;
    }
    fs::create_dir_all(&tmp_dir).map_err(|e| Error::io(&tmp_dir, e))?;
    write_json(&tmp_dir.join("manifest.json"), manifest)?;
    write_tensor(&tmp_dir.join("params.abfn"), &flat(&state.params))?;
    write_tensor(&tmp_dir.join("ema.abfn"), &flat(&state.ema))?;
    write_tensor(&tmp_dir.join("adam_m.abfn"), &flat(&state.adam.m))?;
    write_tensor(&tmp_dir.join("adam_v.abfn"), &flat(&state.adam.v))?;
    if final_dir.exists() {
        fs::remove_dir_all(&final_dir).map_err(|e| Error::io(&final_dir, e))?;
    }
    fs::rename(&tmp_dir, &final_dir).map_err(|e| Error::io(&final_dir, e))?;
    Ok(final_dir)
}

/// Highest-step checkpoint directly under `root`, if any.
pub fn latest_checkpoint(root: &Path) -> Result<Option<PathBuf>> {
    if !root.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(step) = name.strip_prefix(PREFIX).and_then(|s| s.parse::<u64>().ok()) else {
            continue;
        };
        if entry.path().join("manifest.json").is_file() && best.as_ref().is_none_or(|(b, _)| step > *b) {
            best = Some((step, entry.path()));
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Loads a checkpoint directory, or the latest checkpoint under a training
/// output directory.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let dir = if path.join("manifest.json").is_file() {
        path.to_path_buf()
    } else {
        latest_checkpoint(path)?.ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: "no checkpoint found".into(),
        })?
    };
    let manifest: CheckpointManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.format_version != CHECKPOINT_FORMAT {
        return Err(Error::Format {
            path: dir.clone(),
            reason: format!("unsupported checkpoint format {}", manifest.format_version),
        });
    }
    let (net, template) = UNet::new::<f32>(&manifest.denoiser, 0)?;
    let layout_ok = template.names().len() == manifest.params.len()
        && template
            .names()
            .iter()
            .zip(template.shapes())
            .zip(&manifest.params)
            .all(|((n, s), e)| *n == e.name && s == e.shape);
    if !layout_ok {
        return Err(Error::Format {
            path: dir.clone(),
            reason: "parameter layout does not match the denoiser config".into(),
        });
    }
    let load = |file: &str| -> Result<ParamStore<f32>> {
        let p = dir.join(file);
        let t = read_tensor(&p)?;
        let mut store = template.zeros_like();
        store
            .load_flat(&t.data)
            .map_err(|reason| Error::Format { path: p, reason })?;
        Ok(store)
    };
    let state = TrainState {
        step: manifest.step,
        params: load("params.abfn")?,
        ema: load("ema.abfn")?,
        adam: AdamState {
            m: load("adam_m.abfn")?,
            v: load("adam_v.abfn")?,
            t: manifest.step,
        },
    };
    Ok(Checkpoint { manifest, net, state })
}
