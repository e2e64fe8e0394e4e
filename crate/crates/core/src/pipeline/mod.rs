//! End-to-end runs, ablations and report emission.

mod config;
mod linear;
mod report;
mod run;
pub mod svg;

pub use config::{scaled_fixed_grid, ExperimentConfig, TeacherSpec, TimeSelection};
pub use linear::{run_linear_study, LinearStudyConfig, LinearStudyReport, LinearStudyRow};
pub use report::{
    ablation_csv, ablation_svg, emit_ablation_report, emit_run_report, loss_svg, parse_csv, runs_csv, to_json,
    trace_csv, trace_svg, write_json, write_timing,
};
pub use run::{
    ablation_modes, build_teacher, mean_std, ordering_checks, prepare_data, run_ablation, run_experiment, run_seed,
    run_stage1, run_stage2, student_arch, teacher_hash, with_mode, AblationReport, AblationRow, ExperimentData,
    OrderingCheck, RunReport, SeedRun, Stage1Output, TraceRow, SCHEMA_VERSION,
};

use std::fs;
use std::path::Path;

use crate::{Error, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    fs::write(tmp, bytes).map_err(|e| Error::io(tmp, e))?;
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}
