//! Experiment harness: config file schema, pipeline orchestration and
//! report/artifact writing behind the CLI subcommands.

mod commands;
mod config;
mod pipeline;
mod report;

pub use commands::{
    cmd_ablate_selection, cmd_corrupt, cmd_evaluate, cmd_filter, cmd_gen_data, cmd_run, cmd_score,
    cmd_sweep, EvaluateReport, FilterReport, GenDataOutput, RunOutput,
};
pub use config::*;
pub use pipeline::{
    build_partition, clients_from_plan, prepare_data, pretrain_initial_model, run_pipeline,
    run_pipeline_from, PreparedData, RunArtifacts,
};
pub use report::{
    build_report, ClassScoreStats, ConfusionReport, Ratio, RoundLogLine, RunReport,
    REPORT_FORMAT_VERSION,
};

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes via a temp file in the target directory plus rename, so an
/// interrupted run never leaves a partially-written artifact.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let mut tmp =
        tempfile::NamedTempFile::new_in(dir.unwrap_or(Path::new("."))).map_err(Error::Io)?;
    use std::io::Write;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path)
        .map_err(|e| Error::data(format!("cannot persist {}: {e}", path.display())))?;
    Ok(())
}
