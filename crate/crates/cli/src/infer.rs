use std::fs;
use std::path::{Path, PathBuf};

use anobfn_core::denoiser::load_checkpoint;
use anobfn_core::inference::Reconstructor;
use anobfn_core::io::{read_image, write_atomic, write_image, write_json};
use anobfn_core::phantom::{read_manifest, DatasetManifest, Split};
use anobfn_core::schedule::build_schedule;
use anobfn_core::{seed, ImageTensor, InferenceMode, RunConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::{io_error, runtime, CliError, CliResult};

/// Output directories for reconstructions of healthy and abnormal inputs.
pub const HEALTHY_DIR: &str = "test_cn";
pub const ABNORMAL_DIR: &str = "test_sad";

#[derive(Debug, Clone, PartialEq)]
pub struct InferOutcome {
    pub mode: InferenceMode,
    pub n_images: usize,
}

#[derive(Serialize)]
struct InferRecord<'a> {
    mode: InferenceMode,
    checkpoint_step: u64,
    inference: &'a anobfn_core::InferenceConfig,
}

/// File stem shared by every output of one test slice.
pub fn output_stem(subject_id: usize, slice_id: usize) -> String {
    format!("s{subject_id:04}_{slice_id:02}")
}

pub(crate) struct TestSlice {
    pub subject_id: usize,
    pub slice_id: usize,
    pub healthy: PathBuf,
    pub abnormal: PathBuf,
    pub mask: PathBuf,
}

pub(crate) fn test_slices(manifest: &DatasetManifest) -> CliResult<Vec<TestSlice>> {
    let mut out = Vec::new();
    for subject in manifest.subjects_in(Split::Test) {
        for e in &subject.slices {
            let (Some(abnormal), Some(mask)) = (&e.abnormal, &e.mask) else {
                return Err(CliError::Runtime(format!(
                    "test subject {} slice {} has no abnormal counterpart",
                    subject.subject_id, e.slice_id
                )));
            };
            out.push(TestSlice {
                subject_id: subject.subject_id,
                slice_id: e.slice_id,
                healthy: e.healthy.clone(),
                abnormal: abnormal.clone(),
                mask: mask.clone(),
            });
        }
    }
    Ok(out)
}

/// Reconstructs the healthy and abnormal version of every test slice and
/// writes `<stem>_pseudo.abfn`, `<stem>_anomaly.abfn` and a
/// `<stem>_preview.pgm` (input | reconstruction | anomaly map) for each.
pub fn cmd_infer(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    mode: Option<InferenceMode>,
    out: &Path,
) -> CliResult<InferOutcome> {
    let mut icfg = cfg.inference.clone();
    if let Some(m) = mode {
        icfg.mode = m;
    }
    let schedule = build_schedule(&cfg.schedule)?;
    let ckpt = load_checkpoint(checkpoint).map_err(runtime("loading checkpoint"))?;
    let manifest = read_manifest(data).map_err(runtime("reading dataset"))?;
    let size = manifest.image_size();
    if ckpt.manifest.image_size != [size, size] {
        return Err(CliError::Usage(format!(
            "checkpoint expects {:?} images, dataset has {size}x{size}",
            ckpt.manifest.image_size
        )));
    }
    let reconstructor = Reconstructor::from_checkpoint(&ckpt, &schedule, &icfg)?;

    let mut jobs = Vec::new();
    for s in test_slices(&manifest)? {
        for (dir, path) in [(HEALTHY_DIR, &s.healthy), (ABNORMAL_DIR, &s.abnormal)] {
            jobs.push((dir, s.subject_id, s.slice_id, data.join(path)));
        }
    }
    for dir in [HEALTHY_DIR, ABNORMAL_DIR] {
        fs::create_dir_all(out.join(dir)).map_err(io_error(out))?;
    }

    jobs.par_iter()
        .map(|(dir, subject, slice, path)| -> CliResult<()> {
            let x0: ImageTensor = read_image(path).map_err(runtime("reading test image"))?;
            let stream = seed::mix(&[*subject as u64, *slice as u64, seed::label(dir)]);
            let stem = output_stem(*subject, *slice);
            let result = reconstructor
                .reconstruct(&x0, stream)
                .map_err(runtime(format!("reconstructing {dir}/{stem}")))?;
            let base = out.join(dir);
            write_image(&base.join(format!("{stem}_pseudo.abfn")), &result.pseudo_healthy)
                .map_err(runtime("writing output"))?;
            write_image(&base.join(format!("{stem}_anomaly.abfn")), &result.anomaly_map)
                .map_err(runtime("writing output"))?;
            let preview = anobfn_core::io::encode_pgm(&[
                (&x0, -1.0, 1.0),
                (&result.pseudo_healthy, -1.0, 1.0),
                (&result.anomaly_map, -0.5, 0.5),
            ])?;
            write_atomic(&base.join(format!("{stem}_preview.pgm")), &preview).map_err(runtime("writing preview"))
        })
        .collect::<CliResult<Vec<()>>>()?;

    let record = InferRecord {
        mode: icfg.mode,
        checkpoint_step: ckpt.manifest.step,
        inference: &icfg,
    };
    write_json(&out.join("inference.json"), &record).map_err(runtime("writing inference record"))?;
    Ok(InferOutcome {
        mode: icfg.mode,
        n_images: jobs.len(),
    })
}
