// SPDX-License-Identifier: Apache-2.0

//! The `edge` command line: gen, golden, train, infer, eval, report.
//!
//! Every command reads the flat run configuration (file, then `--set`, then
//! dedicated flags) and writes plain-text artifacts under `--out`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::config::{self, ConfigError, RunConfig};
use crate::features::{assemble_features, FeatureError, Task};
use crate::golden::SolveError;
use crate::gridio::{self, GridError};
use crate::models::{ModelBundle, ModelError, Prediction};
use crate::nn::NnError;
use crate::pipeline::{self, Corner, PipelineError, TrainConfig, MIN_SPLIT_CASES};
use crate::synth::{self, Manifest, SynthError, MANIFEST_FILE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> u8 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::Data => "data",
            ErrorKind::Numeric => "numeric",
        }
    }
}

#[derive(Debug, Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub case: Option<String>,
    pub message: String,
}

impl CliError {
    fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            case: None,
            message: message.into(),
        }
    }

    /// One tab-separated line: `error`, kind, exit code, case id (or `-`), message.
    pub fn line(&self) -> String {
        format!(
            "error\tkind={}\tcode={}\tcase={}\tmessage={}",
            self.kind.as_str(),
            self.kind.exit_code(),
            self.case.as_deref().unwrap_or("-"),
            self.message.replace(['\n', '\t'], " ")
        )
    }
}

fn grid_kind(_: &GridError) -> ErrorKind {
    ErrorKind::Data
}

fn synth_kind(e: &SynthError) -> ErrorKind {
    match e {
        SynthError::Config(_) | SynthError::NoPowerSources | SynthError::EmptyPadLayout { .. } => ErrorKind::Config,
        SynthError::Format { .. } => ErrorKind::Data,
        SynthError::Grid(g) => grid_kind(g),
    }
}

fn solve_kind(e: &SolveError) -> ErrorKind {
    match e {
        SolveError::NotConverged { .. } | SolveError::NotPositiveDefinite(_) | SolveError::ExcessiveDrop { .. } => {
            ErrorKind::Numeric
        }
        SolveError::Options(_) => ErrorKind::Config,
        _ => ErrorKind::Data,
    }
}

fn feature_kind(e: &FeatureError) -> ErrorKind {
    match e {
        FeatureError::ZeroVariance { .. } => ErrorKind::Numeric,
        _ => ErrorKind::Data,
    }
}

fn model_kind(e: &ModelError) -> ErrorKind {
    match e {
        ModelError::Config(_) => ErrorKind::Config,
        ModelError::Nn(NnError::NonFinite(_)) => ErrorKind::Numeric,
        ModelError::Feature(f) => feature_kind(f),
        _ => ErrorKind::Data,
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let case = match &e {
            PipelineError::Case { id, .. } => Some(id.clone()),
            _ => None,
        };
        let kind = match e.root() {
            PipelineError::Config(_) => ErrorKind::Config,
            PipelineError::NonFiniteLoss { .. } => ErrorKind::Numeric,
            PipelineError::Synth(s) => synth_kind(s),
            PipelineError::Grid(g) => grid_kind(g),
            PipelineError::Feature(f) => feature_kind(f),
            PipelineError::Solve(s) => solve_kind(s),
            PipelineError::Model(m) => model_kind(m),
            _ => ErrorKind::Data,
        };
        let message = match &e {
            PipelineError::Case { source, .. } => source.to_string(),
            other => other.to_string(),
        };
        Self { kind, case, message }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::new(ErrorKind::Config, e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        Self::new(synth_kind(&e), e.to_string())
    }
}

impl From<GridError> for CliError {
    fn from(e: GridError) -> Self {
        Self::new(grid_kind(&e), e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        Self::new(model_kind(&e), e.to_string())
    }
}

impl From<FeatureError> for CliError {
    fn from(e: FeatureError) -> Self {
        Self::new(feature_kind(&e), e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::new(ErrorKind::Data, format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_error(path, e))
}

fn case_error(id: &str, e: impl Into<CliError>) -> CliError {
    let mut e = e.into();
    e.case.get_or_insert_with(|| id.to_string());
    e
}

// ---------------------------------------------------------------------------
// Argument parsing

#[derive(Debug, Parser)]
#[command(
    name = "edge",
    version,
    about = "Synthetic power-grid and thermal datasets, golden solvers and encoder-decoder surrogates",
    after_help = config::help_text()
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads for `golden` and `eval`.
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    pub parallel: usize,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its manifest.
    Gen,
    /// Solve golden labels for every case of a manifest.
    Golden {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        task: Task,
    },
    /// Train a model on a labeled manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        task: Task,
        /// Defaults to `<out>/model.edgemodel`.
        #[arg(long, value_name = "FILE")]
        model_out: Option<PathBuf>,
    },
    /// Predict maps for manifest cases with a trained model.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Case ids to run; all cases when omitted.
        #[arg(long = "case", value_name = "ID")]
        cases: Vec<String>,
        /// Also write grayscale PGM images.
        #[arg(long)]
        pgm: bool,
    },
    /// Compare predictions against golden labels.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Tabulate one or more eval directories.
    Report {
        #[arg(required = true, value_name = "EVAL_DIR")]
        runs: Vec<PathBuf>,
    },
}

impl GlobalArgs {
    /// Config file first, then `--set` overrides, then `--seed`.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for kv in &self.overrides {
            cfg.apply_override(kv)?;
        }
        if let Some(seed) = self.seed {
            cfg.set("seed", &seed.to_string(), "--seed")?;
        }
        Ok(cfg)
    }

    fn out_or(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

// ---------------------------------------------------------------------------
// Commands

/// Writes the dataset plus `config.txt` under `out`.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let (n_power, n_pdn, n_pads) = cfg.dataset_counts();
    let manifest = synth::gen_dataset(&cfg.synth(), n_power, n_pdn, n_pads, out)?;
    write_file(&out.join("config.txt"), &cfg.format())?;
    Ok(manifest)
}

/// Writes each case's label next to its inputs. With `out`, also writes a
/// copy of the manifest there.
pub fn cmd_golden(cfg: &RunConfig, manifest_path: &Path, task: Task, out: Option<&Path>, parallel: usize) -> Result<Manifest> {
    let manifest = Manifest::read(manifest_path)?;
    pipeline::label_manifest(&manifest, task, &cfg.chip(), &cfg.solver(), parallel)?;
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
            Ok(manifest.write_rebased(&dir.join(MANIFEST_FILE))?)
        }
        None => Ok(manifest),
    }
}

/// Summary of one training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model_path: PathBuf,
    pub train_cases: usize,
    pub val_cases: usize,
    pub test_cases: usize,
    pub best_epoch: usize,
}

/// Splits the manifest (when it has enough cases), trains, and writes the
/// model, `train_log.csv`, `config.txt` and the split manifests under `out`.
pub fn cmd_train(cfg: &RunConfig, manifest_path: &Path, task: Task, model_out: Option<&Path>, out: &Path) -> Result<TrainOutcome> {
    let manifest = Manifest::read(manifest_path)?;
    let (train_m, val_m, test_m) = if manifest.cases.len() >= MIN_SPLIT_CASES {
        let s = pipeline::split(&manifest, &cfg.split())?;
        (s.train, s.val, s.test)
    } else {
        let empty = Manifest {
            cases: Vec::new(),
            ..manifest.clone()
        };
        (manifest.clone(), empty.clone(), empty)
    };
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    for (name, m) in [("train", &train_m), ("val", &val_m), ("test", &test_m)] {
        m.write_rebased(&out.join(format!("split_{name}.txt")))?;
    }
    let train = pipeline::load_samples(&train_m, task)?;
    let val = pipeline::load_samples(&val_m, task)?;
    let tc = TrainConfig {
        checkpoint_dir: Some(out.join("checkpoints")),
        ..cfg.train()
    };
    let (bundle, log) = pipeline::train(task, &train, &val, &tc)?;
    let model_path = model_out.map_or_else(|| out.join("model.edgemodel"), Path::to_path_buf);
    if let Some(dir) = model_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    bundle.save(&model_path)?;
    write_file(&out.join("train_log.csv"), &log.to_csv())?;
    write_file(&out.join("config.txt"), &cfg.format())?;
    Ok(TrainOutcome {
        model_path,
        train_cases: train.len(),
        val_cases: val.len(),
        test_cases: test_m.cases.len(),
        best_epoch: log.best_epoch,
    })
}

/// Writes `<id>.grid` (static) or `<id>/pred_seq.txt` (transient) per case,
/// plus PGM images when asked. Returns the written prediction paths.
pub fn cmd_infer(model_path: &Path, manifest_path: &Path, ids: &[String], pgm: bool, out: &Path) -> Result<Vec<PathBuf>> {
    let model = ModelBundle::load(model_path)?;
    let manifest = Manifest::read(manifest_path)?;
    let entries: Vec<_> = if ids.is_empty() {
        manifest.cases.iter().collect()
    } else {
        ids.iter()
            .map(|id| {
                manifest
                    .cases
                    .iter()
                    .find(|c| &c.id == id)
                    .ok_or_else(|| CliError {
                        kind: ErrorKind::Data,
                        case: Some(id.clone()),
                        message: format!("case not in {}", manifest_path.display()),
                    })
            })
            .collect::<Result<_>>()?
    };
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let mut written = Vec::with_capacity(entries.len());
    for entry in entries {
        let id = entry.id.as_str();
        let inputs = pipeline::load_inputs(&manifest, entry, model.task).map_err(|e| case_error(id, e))?;
        let features = assemble_features(&inputs, model.task).map_err(|e| case_error(id, e))?;
        match model.infer(&features).map_err(|e| case_error(id, e))? {
            Prediction::Static(map) => {
                let path = out.join(format!("{id}.grid"));
                gridio::write_grid(&map, &path)?;
                if pgm {
                    gridio::export_pgm(&map, &out.join(format!("{id}.pgm")))?;
                }
                written.push(path);
            }
            Prediction::Sequence(seq) => {
                let dir = out.join(id);
                fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
                let path = dir.join("pred_seq.txt");
                gridio::write_sequence(&seq, &path, "pred")?;
                if pgm {
                    for (t, frame) in seq.frames().iter().enumerate() {
                        gridio::export_pgm(frame, &dir.join(format!("pred_{t:03}.pgm")))?;
                    }
                }
                written.push(path);
            }
        }
    }
    Ok(written)
}

const EVAL_CASES: &str = "eval_cases.csv";
const EVAL_META: &str = "eval_meta.txt";
const EVAL_SUMMARY: &str = "eval_summary.txt";
const EVAL_HISTOGRAM: &str = "eval_histogram.csv";
const EVAL_FRAMES: &str = "eval_frames.csv";

/// Evaluates the model on every case of a labeled manifest and writes the
/// per-case CSV, pixel-error histogram, summary table and metadata under `out`.
pub fn cmd_eval(cfg: &RunConfig, model_path: &Path, manifest_path: &Path, out: &Path, parallel: usize) -> Result<pipeline::ErrorReport> {
    let model = ModelBundle::load(model_path)?;
    let manifest = Manifest::read(manifest_path)?;
    let samples = pipeline::load_samples(&manifest, model.task)?;
    let corner = Corner::for_task(model.task, &cfg.chip());
    let report = pipeline::evaluate(&model, &samples, corner, cfg.usize("eval.bins"), parallel)?;
    write_file(&out.join(EVAL_CASES), &report.to_csv())?;
    write_file(&out.join(EVAL_HISTOGRAM), &report.histogram.to_csv())?;
    write_file(&out.join(EVAL_SUMMARY), &report.summary())?;
    write_file(
        &out.join(EVAL_META),
        &format!("task={}\nunit={}\ncorner={}\n", report.task, corner.unit, corner.value),
    )?;
    if report.task.is_transient() {
        let mut csv = String::from("case_id,frame,avg_err,max_err\n");
        for c in &report.cases {
            for (t, (a, m)) in c.frame_avg.iter().zip(&c.frame_max).enumerate() {
                let _ = writeln!(csv, "{},{t},{a:e},{m:e}", c.id);
            }
        }
        write_file(&out.join(EVAL_FRAMES), &csv)?;
    }
    Ok(report)
}

/// Aggregate row of one eval directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub task: String,
    pub unit: String,
    pub corner: f64,
    pub cases: usize,
    pub avg_err: f64,
    pub max_err: f64,
    pub median_ms: f64,
}

fn parse_field<T: std::str::FromStr>(text: &str, path: &Path, line: usize) -> Result<T> {
    text.trim().parse().map_err(|_| {
        CliError::new(
            ErrorKind::Data,
            format!("{}:{line}: cannot parse `{text}`", path.display()),
        )
    })
}

pub fn read_run(dir: &Path) -> Result<RunSummary> {
    let meta_path = dir.join(EVAL_META);
    let meta = read_file(&meta_path)?;
    let mut fields = std::collections::BTreeMap::new();
    for line in meta.lines().filter(|l| !l.trim().is_empty()) {
        if let Some((k, v)) = line.split_once('=') {
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let field = |k: &str| {
        fields.get(k).cloned().ok_or_else(|| {
            CliError::new(ErrorKind::Data, format!("{}: missing `{k}`", meta_path.display()))
        })
    };
    let cases_path = dir.join(EVAL_CASES);
    let text = read_file(&cases_path)?;
    let (mut n, mut avg_sum, mut max_err) = (0usize, 0.0, 0.0f64);
    let mut times = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(CliError::new(
                ErrorKind::Data,
                format!("{}:{}: expected 6 columns, found {}", cases_path.display(), i + 1, cols.len()),
            ));
        }
        avg_sum += parse_field::<f64>(cols[1], &cases_path, i + 1)?;
        max_err = max_err.max(parse_field(cols[2], &cases_path, i + 1)?);
        times.push(parse_field::<f64>(cols[5], &cases_path, i + 1)?);
        n += 1;
    }
    times.sort_by(f64::total_cmp);
    let median_ms = match times.len() {
        0 => 0.0,
        l if l % 2 == 1 => times[l / 2],
        l => 0.5 * (times[l / 2 - 1] + times[l / 2]),
    };
    let name = dir
        .file_name()
        .map_or_else(|| dir.display().to_string(), |s| s.to_string_lossy().into_owned());
    Ok(RunSummary {
        name,
        task: field("task")?,
        unit: field("unit")?,
        corner: parse_field(&field("corner")?, &meta_path, 0)?,
        cases: n,
        avg_err: if n > 0 { avg_sum / n as f64 } else { 0.0 },
        max_err,
        median_ms,
    })
}

/// Renders one row per run with average and maximum error in display units
/// and as a percentage of the corner.
pub fn format_report(runs: &[RunSummary]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<20} {:<18} {:>6} {:>12} {:>8} {:>12} {:>8} {:>10}",
        "run", "task", "cases", "avg err", "avg %", "max err", "max %", "time ms"
    );
    for r in runs {
        let pct = |v: f64| if r.corner != 0.0 { 100.0 * v / r.corner } else { 0.0 };
        let _ = writeln!(
            out,
            "{:<20} {:<18} {:>6} {:>12} {:>8.3} {:>12} {:>8.3} {:>10.3}",
            r.name,
            r.task,
            r.cases,
            format!("{:.3} {}", r.avg_err, r.unit),
            pct(r.avg_err),
            format!("{:.3} {}", r.max_err, r.unit),
            pct(r.max_err),
            r.median_ms
        );
    }
    out
}

/// Writes `report.txt` and `report_histogram.csv` (every run's pixel-error
/// histogram, tagged with the run name) under `out`.
pub fn cmd_report(runs: &[PathBuf], out: &Path) -> Result<String> {
    let summaries = runs.iter().map(|d| read_run(d)).collect::<Result<Vec<_>>>()?;
    let table = format_report(&summaries);
    let mut hist = String::from("run,bin_lo,bin_hi,count\n");
    for (dir, s) in runs.iter().zip(&summaries) {
        let path = dir.join(EVAL_HISTOGRAM);
        for line in read_file(&path)?.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let _ = writeln!(hist, "{},{line}", s.name);
        }
    }
    write_file(&out.join("report.txt"), &table)?;
    write_file(&out.join("report_histogram.csv"), &hist)?;
    Ok(table)
}

// ---------------------------------------------------------------------------
// Dispatch

pub fn execute(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let cfg = g.run_config()?;
    match &cli.command {
        Command::Gen => {
            let out = g.out_or("dataset");
            let m = cmd_gen(&cfg, &out)?;
            println!("wrote {} cases to {}", m.cases.len(), out.join(MANIFEST_FILE).display());
        }
        Command::Golden { manifest, task } => {
            let m = cmd_golden(&cfg, manifest, *task, g.out.as_deref(), g.parallel)?;
            println!("labeled {} cases for {task}", m.cases.len());
        }
        Command::Train {
            manifest,
            task,
            model_out,
        } => {
            let out = g.out_or("run");
            let r = cmd_train(&cfg, manifest, *task, model_out.as_deref(), &out)?;
            println!(
                "trained on {} cases (val {}, test {}); best epoch {}; model {}",
                r.train_cases,
                r.val_cases,
                r.test_cases,
                r.best_epoch,
                r.model_path.display()
            );
        }
        Command::Infer {
            model,
            manifest,
            cases,
            pgm,
        } => {
            let out = g.out_or("pred");
            let written = cmd_infer(model, manifest, cases, *pgm, &out)?;
            println!("wrote {} predictions to {}", written.len(), out.display());
        }
        Command::Eval { model, manifest } => {
            let out = g.out_or("eval");
            let report = cmd_eval(&cfg, model, manifest, &out, g.parallel)?;
            print!("{}", report.summary());
        }
        Command::Report { runs } => {
            let out = g.out_or("report");
            print!("{}", cmd_report(runs, &out)?);
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and maps failures to exit codes
/// (2 config, 3 data, 4 numeric) with one error line on stderr.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.kind.exit_code())
        }
    }
}
