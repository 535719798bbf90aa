use std::fs;
use std::path::Path;

use anobfn_core::phantom::build_dataset;
use anobfn_core::RunConfig;

use crate::{io_error, runtime, CliError, CliResult};

/// Writes a phantom dataset to `out` and returns the number of subjects.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path, force: bool) -> CliResult<usize> {
    cfg.phantom.validate()?;
    if !force && out.exists() {
        let mut entries = fs::read_dir(out).map_err(io_error(out))?;
        if entries.next().is_some() {
            return Err(CliError::Usage(format!(
                "{} exists and is not empty (use --force to write into it)",
                out.display()
            )));
        }
    }
    let dataset = build_dataset(&cfg.phantom)?;
    fs::create_dir_all(out).map_err(io_error(out))?;
    dataset.write(out).map_err(runtime("writing dataset"))?;
    Ok(dataset.manifest.subjects.len())
}
