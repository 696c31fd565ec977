//! `afnlab` command-line interface.
//!
//! Exit codes: 0 success, 1 check failed, 2 config or usage error,
//! 3 format or consistency error, 4 numeric abort, 5 I/O error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::afn::AfnLayer;
use crate::data::{cell_prng, corrupt, load_idx, synth_shapes, write_idx, CorruptionKind, CorruptionSpec, ImageDataset};
use crate::error::{Error, Result};
use crate::experiment::{
    load_checkpoint, run_compare, train, write_run, ExperimentConfig, NormKind, CHECKPOINT_FILE, LOSS_FILE, RESULTS_FILE,
};
use crate::nn::{grad_check, Conv2d, GradCheckReport, Mode, Module};
use crate::norm::{default_groups, BatchNorm2d, BinLayer, ScopedNorm, StatScope};
use crate::tensor::{Prng, Tensor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_FORMAT: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_IO: i32 = 5;

/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Input(_) | Error::Shape(_) => EXIT_CONFIG,
        Error::Format(_) | Error::Consistency(_) => EXIT_FORMAT,
        Error::Numeric { .. } => EXIT_NUMERIC,
        Error::Io { .. } => EXIT_IO,
    }
}

#[derive(Parser, Debug)]
#[command(name = "afnlab", version, about = "Normalization-layer laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Train,
    Eval,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Train => Mode::Train,
            ModeArg::Eval => Mode::Eval,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Compare analytic and central-difference gradients of one layer.
    Gradcheck {
        /// batch, layer, instance, group, bin, asr, afn or conv
        #[arg(long)]
        layer: String,
        /// N,C,H,W
        #[arg(long, default_value = "4,8,5,5")]
        shape: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = ModeArg::Train)]
        mode: ModeArg,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Train one configuration and write checkpoint and result files.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a checkpoint, optionally on a corrupted copy of the data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `test`, `synth:N,SIZE,SEED` or `idx:IMAGES,LABELS`
        #[arg(long, default_value = "test")]
        data: String,
        #[arg(long)]
        corruption: Option<String>,
        #[arg(long)]
        level: Option<u8>,
        /// Corruption seed; defaults to the checkpoint's evaluation seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Train every (norm, seed) pair and tabulate the shift matrices.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated norm names.
        #[arg(long)]
        norms: String,
        /// Comma-separated seeds.
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corrupt an IDX dataset.
    Corrupt {
        /// Images/labels pair as `IMAGES,LABELS` or a prefix `P` for
        /// `P-images.idx` and `P-labels.idx`.
        #[arg(long = "in")]
        input: String,
        #[arg(long = "type")]
        kind: String,
        #[arg(long)]
        level: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output pair, same forms as `--in`.
        #[arg(long)]
        out: String,
    },
    /// Write a synthetic shapes dataset as IDX.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output pair, `IMAGES,LABELS` or a prefix.
        #[arg(long)]
        out: String,
    },
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Output goes to `out`, diagnostics to
/// `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{rendered}")
            } else {
                write!(out, "{rendered}")
            };
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Gradcheck {
            layer,
            shape,
            seed,
            mode,
            step,
        } => cmd_gradcheck(&layer, &parse_shape(&shape)?, seed, mode.into(), step, out),
        Command::Train { config, out: dir } => cmd_train(&config, &dir, out),
        Command::Eval {
            checkpoint,
            data,
            corruption,
            level,
            seed,
            batch_size,
        } => cmd_eval(&checkpoint, &data, corruption.as_deref(), level, seed, batch_size, out),
        Command::Compare {
            config,
            norms,
            seeds,
            out: dir,
        } => cmd_compare(&config, &norms, &seeds, &dir, out, err),
        Command::Corrupt {
            input,
            kind,
            level,
            seed,
            out: dest,
        } => cmd_corrupt(&input, &kind, level, seed, &dest, out),
        Command::Synth { n, size, seed, out: dest } => cmd_synth(n, size, seed, &dest, out),
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

pub fn parse_shape(text: &str) -> Result<[usize; 4]> {
    let dims: Vec<usize> = text
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("shape `{text}` is not N,C,H,W")))?;
    match dims[..] {
        [n, c, h, w] if dims.iter().all(|&d| d > 0) => Ok([n, c, h, w]),
        _ => Err(Error::Config(format!("shape `{text}` is not four positive integers N,C,H,W"))),
    }
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<T>().map_err(|_| Error::Config(format!("bad {what} `{s}`"))))
        .collect()
}

fn parse_spec(kind: &str, level: u8) -> Result<CorruptionSpec> {
    CorruptionSpec::new(kind.parse::<CorruptionKind>()?, level)
}

/// `IMAGES,LABELS`, or a prefix `P` meaning `P-images.idx` and `P-labels.idx`.
pub fn idx_pair(text: &str) -> (PathBuf, PathBuf) {
    match text.split_once(',') {
        Some((i, l)) => (PathBuf::from(i), PathBuf::from(l)),
        None => (PathBuf::from(format!("{text}-images.idx")), PathBuf::from(format!("{text}-labels.idx"))),
    }
}

fn gc<M: Module + Clone>(mut layer: M, x: &Tensor, h: f64, mode: Mode, p: &mut Prng, seed: u64) -> Result<GradCheckReport> {
    for param in layer.params_mut() {
        for v in param.value.data_mut() {
            *v += 0.2 * p.next_gaussian();
        }
        param.constraint.apply(param.value);
    }
    grad_check(&layer, x, h, mode, seed)
}

/// Builds the named layer for an `[N, C, H, W]` input from `seed` and runs
/// the finite-difference check. Every parameter is jittered away from its
/// initial value first, so biases and gates are not all sitting at the
/// exact points (zero pre-activations, identity affine) where ReLU kinks
/// or symmetries would hide errors.
pub fn gradcheck_layer(name: &str, shape: [usize; 4], seed: u64, mode: Mode, h: f64) -> Result<GradCheckReport> {
    let [_, c, _, _] = shape;
    let mut p = Prng::new(seed);
    let x = Tensor::gaussian(&shape, &mut p, 0.5, 1.5);
    let mut init = p.fork(1);
    let p = &mut p;
    match name.parse::<NormKind>() {
        Ok(NormKind::Batch) => gc(BatchNorm2d::new(c), &x, h, mode, p, seed),
        Ok(NormKind::Layer) => gc(ScopedNorm::new(c, StatScope::Layer)?, &x, h, mode, p, seed),
        Ok(NormKind::Instance) => gc(ScopedNorm::new(c, StatScope::Instance)?, &x, h, mode, p, seed),
        Ok(NormKind::Group) => gc(ScopedNorm::new(c, StatScope::Group(default_groups(c)))?, &x, h, mode, p, seed),
        Ok(NormKind::Bin) => gc(BinLayer::new(c), &x, h, mode, p, seed),
        Ok(NormKind::Asr) => gc(AfnLayer::new(c, StatScope::Instance, &mut init)?, &x, h, mode, p, seed),
        Ok(NormKind::Afn) => gc(AfnLayer::new(c, StatScope::Batch, &mut init)?, &x, h, mode, p, seed),
        Err(_) if name == "conv" => gc(Conv2d::he(c, c, 3, 1, &mut init), &x, h, mode, p, seed),
        Err(_) => Err(Error::Config(format!(
            "unknown layer `{name}` (expected batch, layer, instance, group, bin, asr, afn or conv)"
        ))),
    }
}

fn cmd_gradcheck(layer: &str, shape: &[usize; 4], seed: u64, mode: Mode, h: f64, out: &mut dyn Write) -> Result<i32> {
    let report = gradcheck_layer(layer, *shape, seed, mode, h)?;
    let w = |out: &mut dyn Write, s: String| writeln!(out, "{s}").map_err(io_err);
    w(out, format!("layer {layer} shape {shape:?} seed {seed} mode {mode:?} step {h:e}"))?;
    for (group, err) in report.groups() {
        w(out, format!("  {group:<28} {err:.3e}"))?;
    }
    let max = report.max();
    let pass = max <= GRADCHECK_TOLERANCE;
    w(out, format!("max relative error {max:.3e} ({})", if pass { "PASS" } else { "FAIL" }))?;
    Ok(if pass { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn cmd_train(config_path: &Path, dir: &Path, out: &mut dyn Write) -> Result<i32> {
    let cfg = ExperimentConfig::load(config_path)?;
    let trained = train(&cfg)?;
    write_run(dir, &cfg, &trained)?;
    let r = &trained.result;
    writeln!(out, "norm {} seed {} clean accuracy {:.4}", r.norm, r.seed, r.clean_accuracy).map_err(io_err)?;
    if let Some(s) = &r.shift {
        let levels: Vec<String> = s.level_avg.iter().map(|v| format!("{v:.4}")).collect();
        writeln!(out, "levels 1-5 {}  avg {:.4}", levels.join(" "), s.grand_avg).map_err(io_err)?;
    }
    writeln!(
        out,
        "wrote {}, {}, {} under {} ({:.1}s)",
        CHECKPOINT_FILE,
        RESULTS_FILE,
        LOSS_FILE,
        dir.display(),
        r.wall_time
    )
    .map_err(io_err)?;
    Ok(EXIT_OK)
}

fn resolve_data(spec: &str, cfg: &ExperimentConfig) -> Result<ImageDataset> {
    if spec == "test" {
        return Ok(cfg.dataset.resolve()?.1);
    }
    if let Some(rest) = spec.strip_prefix("synth:") {
        let parts: Vec<u64> = parse_list(rest, "synth field")?;
        return match parts[..] {
            [n, size, seed] => synth_shapes(&mut Prng::new(seed), n as usize, size as usize),
            _ => Err(Error::Config(format!("`{spec}` is not synth:N,SIZE,SEED"))),
        };
    }
    if let Some(rest) = spec.strip_prefix("idx:") {
        let (i, l) = idx_pair(rest);
        return load_idx(i, l);
    }
    Err(Error::Config(format!(
        "data `{spec}` is not `test`, `synth:N,SIZE,SEED` or `idx:IMAGES,LABELS`"
    )))
}

fn cmd_eval(
    checkpoint: &Path,
    data: &str,
    corruption: Option<&str>,
    level: Option<u8>,
    seed: Option<u64>,
    batch_size: Option<usize>,
    out: &mut dyn Write,
) -> Result<i32> {
    let spec = match (corruption, level) {
        (Some(k), Some(l)) => Some(parse_spec(k, l)?),
        (None, None) => None,
        _ => return Err(Error::Config("--corruption and --level go together".into())),
    };
    let ck = load_checkpoint(checkpoint)?;
    let mut ds = resolve_data(data, &ck.config)?;
    if ds.image_dims() != ck.model.input_dims() {
        return Err(Error::Consistency(format!(
            "model expects images {:?}, data has {:?}",
            ck.model.input_dims(),
            ds.image_dims()
        )));
    }
    if let Some(spec) = spec {
        ds = corrupt(&ds, spec, &mut cell_prng(seed.unwrap_or(ck.config.eval_seed), spec));
    }
    let acc = ck.model.evaluate(&ds, batch_size.unwrap_or(ck.config.eval_batch_size))?;
    let label = spec.map_or_else(|| "clean".to_string(), |s| s.to_string());
    writeln!(out, "{label} accuracy {acc}").map_err(io_err)?;
    Ok(EXIT_OK)
}

fn cmd_compare(config: &Path, norms: &str, seeds: &str, dir: &Path, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let cfg = ExperimentConfig::load(config)?;
    let norms: Vec<NormKind> = norms
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse())
        .collect::<Result<_>>()?;
    let seeds: Vec<u64> = parse_list(seeds, "seed")?;
    let (report, _) = run_compare(&cfg, &norms, &seeds, dir, |r| {
        let _ = writeln!(err, "finished {} seed {}: clean {:.4} ({:.1}s)", r.norm, r.seed, r.clean_accuracy, r.wall_time);
    })?;
    write!(out, "{}", report.to_text()).map_err(io_err)?;
    writeln!(out, "wrote {} and {}", dir.join("compare.csv").display(), dir.join("compare.txt").display()).map_err(io_err)?;
    Ok(EXIT_OK)
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn write_pair(ds: &ImageDataset, dest: &str) -> Result<(PathBuf, PathBuf)> {
    let (i, l) = idx_pair(dest);
    ensure_parent(&i)?;
    ensure_parent(&l)?;
    write_idx(ds, &i, &l)?;
    Ok((i, l))
}

fn cmd_corrupt(input: &str, kind: &str, level: u8, seed: u64, dest: &str, out: &mut dyn Write) -> Result<i32> {
    let spec = parse_spec(kind, level)?;
    let (i, l) = idx_pair(input);
    let ds = load_idx(i, l)?;
    let shifted = corrupt(&ds, spec, &mut cell_prng(seed, spec));
    let (i, l) = write_pair(&shifted, dest)?;
    writeln!(out, "{} images ({spec}) -> {}, {}", shifted.len(), i.display(), l.display()).map_err(io_err)?;
    Ok(EXIT_OK)
}

fn cmd_synth(n: usize, size: usize, seed: u64, dest: &str, out: &mut dyn Write) -> Result<i32> {
    let ds = synth_shapes(&mut Prng::new(seed), n, size)?;
    let (i, l) = write_pair(&ds, dest)?;
    writeln!(out, "{n} images {size}x{size} -> {}, {}", i.display(), l.display()).map_err(io_err)?;
    Ok(EXIT_OK)
}
