use std::fs;
use std::path::Path;

use anobfn_core::io::{read_image, write_atomic};
use anobfn_core::metrics::{ImageMetrics, MetricsReport};
use anobfn_core::phantom::read_manifest;
use anobfn_core::RunConfig;
use rayon::prelude::*;

use crate::infer::{output_stem, test_slices, ABNORMAL_DIR, HEALTHY_DIR};
use crate::{io_error, runtime, CliError, CliResult, METRICS_FILE};

/// Scores the reconstructions in `pred` against the test split of `data`
/// and writes `metrics.csv` to `out`.
pub fn cmd_eval(cfg: &RunConfig, pred: &Path, data: &Path, out: &Path) -> CliResult<MetricsReport> {
    cfg.metrics.validate()?;
    let manifest = read_manifest(data).map_err(runtime("reading dataset"))?;
    let slices = test_slices(&manifest)?;

    let missing: Vec<String> = slices
        .iter()
        .map(|s| output_stem(s.subject_id, s.slice_id))
        .filter(|stem| {
            !pred.join(HEALTHY_DIR).join(format!("{stem}_pseudo.abfn")).is_file()
                || !pred.join(ABNORMAL_DIR).join(format!("{stem}_anomaly.abfn")).is_file()
        })
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Runtime(format!(
            "missing predictions for {} test slices: {}",
            missing.len(),
            missing.join(", ")
        )));
    }

    let records = slices
        .par_iter()
        .map(|s| -> CliResult<ImageMetrics> {
            let stem = output_stem(s.subject_id, s.slice_id);
            let read = |p: &Path| read_image(p).map_err(runtime("reading image"));
            let healthy = read(&data.join(&s.healthy))?;
            let mask = read(&data.join(&s.mask))?;
            let recon = read(&pred.join(HEALTHY_DIR).join(format!("{stem}_pseudo.abfn")))?;
            let map = read(&pred.join(ABNORMAL_DIR).join(format!("{stem}_anomaly.abfn")))?;
            ImageMetrics::compute(
                s.subject_id,
                s.slice_id,
                (&healthy, &recon),
                Some((&map, &mask)),
                &cfg.metrics,
            )
            .map_err(runtime(format!("scoring {stem}")))
        })
        .collect::<CliResult<Vec<_>>>()?;

    let report = MetricsReport::new(records);
    fs::create_dir_all(out).map_err(io_error(out))?;
    let csv = report.to_csv()?;
    write_atomic(&out.join(METRICS_FILE), csv.as_bytes()).map_err(runtime("writing metrics"))?;
    Ok(report)
}
