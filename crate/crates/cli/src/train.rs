use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anobfn_core::denoiser::{
    latest_checkpoint, load_checkpoint, save_checkpoint, train_step, CheckpointManifest, TrainState, UNet,
};
use anobfn_core::io::{write_atomic, write_json};
use anobfn_core::phantom::{load_split, read_manifest, Split};
use anobfn_core::schedule::build_schedule;
use anobfn_core::{seed, Error, ImageTensor, RunConfig};
use rand::Rng;

use crate::{io_error, runtime, CliError, CliResult};

pub const TRAIN_LOG: &str = "train_log.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub final_step: u64,
    pub last_loss: f64,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy)]
struct LogRow {
    loss: f64,
    grad_norm: f64,
}

fn read_log(path: &Path) -> CliResult<BTreeMap<u64, LogRow>> {
    let mut rows = BTreeMap::new();
    if !path.exists() {
        return Ok(rows);
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    for rec in reader.deserialize::<(u64, f64, f64)>() {
        let (step, loss, grad_norm) = rec.map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        rows.insert(step, LogRow { loss, grad_norm });
    }
    Ok(rows)
}

fn write_log(path: &Path, rows: &BTreeMap<u64, LogRow>) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::Runtime(format!("{}: {e}", path.display()));
    w.write_record(["step", "loss", "grad_norm"]).map_err(fail)?;
    for (step, r) in rows {
        w.write_record([step.to_string(), r.loss.to_string(), r.grad_norm.to_string()])
            .map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    write_atomic(path, &bytes).map_err(runtime("writing training log"))
}

/// Epoch-local shuffle of `n` indices.
fn epoch_order(n: usize, train_seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seed::rng(&[train_seed, seed::label("epoch-order"), epoch]);
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    order
}

/// Trains on the healthy training split of `data`, writing checkpoints and
/// `train_log.csv` to `out`. Resumes from the latest checkpoint in `out`.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> CliResult<TrainOutcome> {
    let manifest = read_manifest(data).map_err(runtime("reading dataset"))?;
    let size = manifest.image_size();
    cfg.denoiser
        .check_image_size(size, size)
        .map_err(|e| CliError::Usage(format!("dataset images are {size}x{size}: {e}")))?;
    let images: Vec<ImageTensor> = load_split(data, &manifest, Split::Train)
        .map_err(runtime("loading training split"))?
        .into_iter()
        .map(|(_, _, img)| img)
        .collect();
    if images.is_empty() {
        return Err(CliError::Runtime("training split is empty".into()));
    }
    let schedule = build_schedule(&cfg.schedule)?;
    fs::create_dir_all(out).map_err(io_error(out))?;

    let (net, mut state) = match latest_checkpoint(out).map_err(runtime("scanning checkpoints"))? {
        Some(path) => {
            let ckpt = load_checkpoint(&path).map_err(runtime("loading checkpoint"))?;
            let m = &ckpt.manifest;
            if m.denoiser != cfg.denoiser || m.schedule != cfg.schedule || m.image_size != [size, size] {
                return Err(CliError::Usage(format!(
                    "{} was trained with a different denoiser, schedule or image size",
                    path.display()
                )));
            }
            (ckpt.net, ckpt.state)
        }
        None => {
            let (net, params) = UNet::new::<f32>(&cfg.denoiser, seed::derive(cfg.train.seed, "init"))?;
            (net, TrainState::new(params))
        }
    };
    write_json(&out.join("config.json"), cfg).map_err(runtime("writing config"))?;

    let log_path = out.join(TRAIN_LOG);
    let mut log = read_log(&log_path)?;
    log.retain(|&step, _| step <= state.step);

    let batch_size = cfg.train.batch_size.min(images.len());
    let per_epoch = images.len().div_ceil(batch_size) as u64;
    let total = cfg.train.max_steps.unwrap_or(cfg.train.epochs as u64 * per_epoch);
    let save = |state: &TrainState| -> CliResult<PathBuf> {
        let m = CheckpointManifest::describe(
            state,
            [size, size],
            &cfg.denoiser,
            &cfg.train,
            &cfg.schedule,
            &cfg.noise,
        );
        save_checkpoint(out, &m, state).map_err(runtime("saving checkpoint"))
    };

    let mut checkpoints = Vec::new();
    let mut last_loss = f64::NAN;
    let mut order: Option<(u64, Vec<usize>)> = None;
    while state.step < total {
        let epoch = state.step / per_epoch;
        if order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            order = Some((epoch, epoch_order(images.len(), cfg.train.seed, epoch)));
        }
        let idx = &order.as_ref().expect("set above").1;
        let start = (state.step % per_epoch) as usize * batch_size;
        let batch: Vec<&ImageTensor> = idx[start..(start + batch_size).min(idx.len())]
            .iter()
            .map(|&i| &images[i])
            .collect();

        let stats = match train_step(&net, &mut state, &batch, &schedule, &cfg.noise, &cfg.train) {
            Ok(s) => s,
            Err(e) => {
                write_log(&log_path, &log)?;
                return Err(match e {
                    Error::NonFinite { step, .. } => {
                        CliError::Runtime(format!("training diverged at step {step}: {e}"))
                    }
                    other => CliError::Runtime(format!("training step {}: {other}", state.step + 1)),
                });
            }
        };
        last_loss = stats.loss;
        log.insert(
            stats.step,
            LogRow {
                loss: stats.loss,
                grad_norm: stats.grad_norm,
            },
        );
        if stats.step % 100 == 0 {
            eprintln!(
                "step {}/{total} loss {:.4} grad_norm {:.4}",
                stats.step, stats.loss, stats.grad_norm
            );
        }
        if stats.step % cfg.train.checkpoint_every == 0 || stats.step == total {
            checkpoints.push(save(&state)?);
            write_log(&log_path, &log)?;
        }
    }
    if checkpoints.is_empty()
        && latest_checkpoint(out)
            .map_err(runtime("scanning checkpoints"))?
            .is_none()
    {
        checkpoints.push(save(&state)?);
        write_log(&log_path, &log)?;
    }
    Ok(TrainOutcome {
        final_step: state.step,
        last_loss,
        checkpoints,
    })
}
