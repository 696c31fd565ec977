//! Config-driven training, the corruption evaluation matrix, checkpoints
//! and comparison reports.

mod checkpoint;
mod config;
mod eval;
mod model;
mod report;
mod train;

use std::fs;
use std::path::Path;

pub use checkpoint::{checkpoint_from_str, checkpoint_to_string, load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};
pub use config::{Arch, DatasetSpec, ExperimentConfig, NormKind, OptimizerKind};
pub use eval::{domain_shift_eval, ShiftMatrix};
pub use model::{build_model, Layer, LayerCache, Model, NormLayer, INIT_STREAM, NORM_STREAM, SHUFFLE_STREAM};
pub use report::{
    build_report, cell_name, loss_curve_csv, parse_run_results, run_results_csv, sparkline, Report, ReportRow, RowKind,
    REFERENCE_ROWS,
};
pub use train::{train, train_on, RunResult, Trained};

use crate::error::{Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const RESULTS_FILE: &str = "results.csv";
pub const LOSS_FILE: &str = "loss_curve.csv";

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `checkpoint.json`, `results.csv` and `loss_curve.csv` into `dir`.
pub fn write_run(dir: impl AsRef<Path>, config: &ExperimentConfig, trained: &Trained) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    save_checkpoint(dir.join(CHECKPOINT_FILE), &trained.model, config, trained.prng_state)?;
    write(&dir.join(RESULTS_FILE), &run_results_csv(&trained.result))?;
    write(&dir.join(LOSS_FILE), &loss_curve_csv(&trained.result))
}

/// Trains every (norm, seed) pair of `base` on one shared dataset, writes
/// each run under `out/{norm}_seed{seed}/`, and the comparison as
/// `out/compare.csv` and `out/compare.txt`.
pub fn run_compare(
    base: &ExperimentConfig,
    norms: &[NormKind],
    seeds: &[u64],
    out: impl AsRef<Path>,
    mut progress: impl FnMut(&RunResult),
) -> Result<(Report, Vec<RunResult>)> {
    if norms.is_empty() || seeds.is_empty() {
        return Err(Error::Config("compare needs at least one norm and one seed".into()));
    }
    let out = out.as_ref();
    create_dir(out)?;
    let (train_set, test_set) = base.dataset.resolve()?;
    let mut results = Vec::new();
    for &norm in norms {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.norm = norm;
            cfg.seed = seed;
            cfg.corruption_eval = true;
            cfg.name = format!("{}_{norm}_seed{seed}", base.name);
            let trained = train_on(&cfg, &train_set, &test_set)?;
            write_run(out.join(format!("{norm}_seed{seed}")), &cfg, &trained)?;
            progress(&trained.result);
            results.push(trained.result);
        }
    }
    let report = build_report(&results, None)?;
    write(&out.join("compare.csv"), &report.to_csv())?;
    write(&out.join("compare.txt"), &report.to_text())?;
    Ok((report, results))
}
