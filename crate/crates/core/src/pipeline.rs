// SPDX-License-Identifier: Apache-2.0

//! Dataset splitting, golden labeling, training and evaluation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use thiserror::Error;

use crate::features::{assemble_features, CaseInputs, FeatureError, Features, NormStats, Task};
use crate::golden::{self, SolveError, SolverOptions};
use crate::gridio::{self, ChipSpec, CropRecord, GridError, GridMap, GridSequence};
use crate::models::{
    input_tensor, label_tensor, window_mse, Architecture, EdgeNet, ModelBundle, ModelError, Prediction,
};
use crate::nn::{l2_penalty, AdamConfig, AdamState, Network, Tensor};
use crate::rng::Pcg32;
use crate::synth::{CaseEntry, Manifest, PadLayout, SynthError};

pub const IR_LABEL_FILE: &str = "ir_drop.grid";
pub const THERMAL_LABEL_FILE: &str = "temperature.grid";
pub const TRANSIENT_LABEL_FILE: &str = "temperature_seq.txt";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("case {id}: {source}")]
    Case {
        id: String,
        #[source]
        source: Box<PipelineError>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("need at least {needed} cases, found {found}")]
    TooFewCases { needed: usize, found: usize },
    #[error("missing label file {0}")]
    MissingLabel(PathBuf),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("prediction is {pred:?} but label is {label:?}")]
    DimsMismatch {
        pred: (usize, usize),
        label: (usize, usize),
    },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

impl PipelineError {
    fn in_case(self, id: &str) -> Self {
        match self {
            e @ PipelineError::Case { .. } => e,
            e => PipelineError::Case {
                id: id.to_string(),
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, past any case wrappers.
    pub fn root(&self) -> &PipelineError {
        match self {
            PipelineError::Case { source, .. } => source.root(),
            e => e,
        }
    }
}

// ---------------------------------------------------------------------------
// Split

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
            seed: 1,
        }
    }
}

pub const MIN_SPLIT_CASES: usize = 10;

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(PipelineError::Config(format!("split fractions {f:?} must be in [0, 1] and sum to 1")));
        }
        Ok(())
    }

    /// `[train, val, test]` sizes by largest-remainder rounding; ties favor the earlier split.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let quotas = [self.train, self.val, self.test].map(|f| f * n as f64);
        let mut counts = quotas.map(|q| q.floor() as usize);
        let mut order = [0, 1, 2];
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - quotas[a].floor();
            let rb = quotas[b] - quotas[b].floor();
            rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        let assigned: usize = counts.iter().sum();
        for &i in order.iter().take(n.saturating_sub(assigned)) {
            counts[i] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Manifest,
    pub val: Manifest,
    pub test: Manifest,
}

/// Deterministic seeded split. Each part keeps the manifest's case order.
pub fn split(manifest: &Manifest, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let n = manifest.cases.len();
    if n < MIN_SPLIT_CASES {
        return Err(PipelineError::TooFewCases {
            needed: MIN_SPLIT_CASES,
            found: n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    Pcg32::stream(spec.seed, 0, "split").shuffle(&mut order);
    let [n_train, n_val, _] = spec.counts(n);
    let mut parts = [order[..n_train].to_vec(), order[n_train..n_train + n_val].to_vec(), order[n_train + n_val..].to_vec()];
    let make = |idx: &mut Vec<usize>| {
        idx.sort_unstable();
        Manifest {
            base_dir: manifest.base_dir.clone(),
            seed: manifest.seed,
            cases: idx.iter().map(|&i| manifest.cases[i].clone()).collect(),
        }
    };
    Ok(Split {
        train: make(&mut parts[0]),
        val: make(&mut parts[1]),
        test: make(&mut parts[2]),
    })
}

// ---------------------------------------------------------------------------
// Cases and labels

#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    Static(GridMap),
    Sequence(GridSequence),
}

impl Label {
    pub fn frames(&self) -> &[GridMap] {
        match self {
            Label::Static(m) => std::slice::from_ref(m),
            Label::Sequence(s) => s.frames(),
        }
    }
}

pub fn label_path(manifest: &Manifest, entry: &CaseEntry, task: Task) -> PathBuf {
    let name = match task {
        Task::IrStatic => IR_LABEL_FILE,
        Task::ThermalStatic => THERMAL_LABEL_FILE,
        Task::ThermalTransient => TRANSIENT_LABEL_FILE,
    };
    manifest.case_dir(entry).join(name)
}

/// Reads the raw inputs a task needs from a case's files.
pub fn load_inputs(manifest: &Manifest, entry: &CaseEntry, task: Task) -> Result<CaseInputs> {
    let power = gridio::read_grid(&manifest.resolve(&entry.power))?;
    let mut inputs = CaseInputs::default();
    match task {
        Task::IrStatic => {
            let density = gridio::read_grid(&manifest.resolve(&entry.pdn))?;
            let (rows, cols) = power.dims();
            inputs.pads = Some(PadLayout::read(&manifest.resolve(&entry.pads), rows, cols)?);
            inputs.density = Some(density);
        }
        Task::ThermalStatic => {}
        Task::ThermalTransient => {
            let rel = entry
                .sequence
                .as_ref()
                .ok_or_else(|| PipelineError::MissingInput("power sequence (generate with sequences enabled)".into()))?;
            inputs.power_sequence = Some(gridio::read_sequence(&manifest.resolve(rel))?);
        }
    }
    inputs.power = Some(power);
    Ok(inputs)
}

/// Runs the golden solver for one case. Die dimensions come from the inputs;
/// every other chip constant from `chip`.
pub fn golden_label(inputs: &CaseInputs, task: Task, chip: &ChipSpec, opts: &SolverOptions) -> Result<Label> {
    let missing = |what: &str| PipelineError::MissingInput(what.to_string());
    let power = inputs.power.as_ref().ok_or_else(|| missing("power"))?;
    let (rows, cols) = power.dims();
    let chip = chip.clone().with_dims(rows, cols);
    Ok(match task {
        Task::IrStatic => {
            let density = inputs.density.as_ref().ok_or_else(|| missing("pdn density"))?;
            let pads = inputs.pads.as_ref().ok_or_else(|| missing("pads"))?;
            Label::Static(golden::ir_drop_map(power, density, pads, &chip, opts)?)
        }
        Task::ThermalStatic => Label::Static(golden::temperature_map(power, &chip, opts)?),
        Task::ThermalTransient => {
            let seq = inputs.power_sequence.as_ref().ok_or_else(|| missing("power sequence"))?;
            Label::Sequence(golden::solve_transient_thermal(seq, &chip, opts)?)
        }
    })
}

pub fn write_label(label: &Label, path: &Path) -> Result<()> {
    match label {
        Label::Static(m) => gridio::write_grid(m, path)?,
        Label::Sequence(s) => gridio::write_sequence(s, path, "temperature")?,
    }
    Ok(())
}

pub fn read_label(path: &Path, task: Task) -> Result<Label> {
    if !path.exists() {
        return Err(PipelineError::MissingLabel(path.to_path_buf()));
    }
    Ok(if task.is_transient() {
        Label::Sequence(gridio::read_sequence(path)?)
    } else {
        Label::Static(gridio::read_grid(path)?)
    })
}

/// Runs `f` over `0..n` on up to `parallel` threads; results come back in index order.
pub fn par_map<R: Send>(n: usize, parallel: usize, f: impl Fn(usize) -> R + Sync) -> Vec<R> {
    let workers = parallel.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..n).map(|_| None).collect();
    let chunks: Vec<Vec<(usize, R)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut out = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= n {
                            break out;
                        }
                        out.push((i, f(i)));
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    for (i, r) in chunks.into_iter().flatten() {
        slots[i] = Some(r);
    }
    slots.into_iter().map(|r| r.expect("every index visited")).collect()
}

/// Solves every case and writes its label next to its inputs. The first
/// failing case (in manifest order) is reported.
pub fn label_manifest(
    manifest: &Manifest,
    task: Task,
    chip: &ChipSpec,
    opts: &SolverOptions,
    parallel: usize,
) -> Result<()> {
    opts.validate()?;
    let results = par_map(manifest.cases.len(), parallel, |i| {
        let entry = &manifest.cases[i];
        let run = || -> Result<()> {
            let inputs = load_inputs(manifest, entry, task)?;
            let label = golden_label(&inputs, task, chip, opts)?;
            write_label(&label, &label_path(manifest, entry, task))
        };
        run().map_err(|e| e.in_case(&entry.id))
    });
    results.into_iter().collect()
}

/// Features plus label of one case, ready for training or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub features: Features,
    pub label: Label,
}

impl Sample {
    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.features.frames()[0].dims();
        (h, w)
    }
}

pub fn load_sample(manifest: &Manifest, entry: &CaseEntry, task: Task) -> Result<Sample> {
    let run = || -> Result<Sample> {
        let inputs = load_inputs(manifest, entry, task)?;
        let features = assemble_features(&inputs, task)?;
        let label = read_label(&label_path(manifest, entry, task), task)?;
        let lf = label.frames();
        let ff = features.frames();
        let (_, h, w) = ff[0].dims();
        if lf.len() != ff.len() || lf[0].dims() != (h, w) {
            return Err(PipelineError::DimsMismatch {
                pred: (h, w),
                label: lf[0].dims(),
            });
        }
        Ok(Sample {
            id: entry.id.clone(),
            features,
            label,
        })
    };
    run().map_err(|e| e.in_case(&entry.id))
}

pub fn load_samples(manifest: &Manifest, task: Task) -> Result<Vec<Sample>> {
    manifest.cases.iter().map(|e| load_sample(manifest, e, task)).collect()
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Save the current model every this many epochs (0 disables).
    pub checkpoint_interval: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
    /// Overrides the task's default architecture.
    pub architecture: Option<Architecture>,
    /// Mirror each training batch across a random combination of die axes.
    /// Exact for both solvers, which have no preferred orientation.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 8,
            adam: AdamConfig::default(),
            seed: 1,
            checkpoint_interval: 0,
            checkpoint_dir: None,
            patience: None,
            architecture: None,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(PipelineError::Config("batch size must be >= 1".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.decay > 0.0 && a.decay_steps > 0 && a.eps > 0.0 && a.l2 >= 0.0)
            || !(0.0..1.0).contains(&a.beta1)
            || !(0.0..1.0).contains(&a.beta2)
        {
            return Err(PipelineError::Config(format!("invalid optimizer settings {a:?}")));
        }
        if self.checkpoint_interval > 0 && self.checkpoint_dir.is_none() {
            return Err(PipelineError::Config("checkpoint interval set without a checkpoint directory".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean MSE plus the L2 penalty, in normalized label units.
    pub train_loss: f64,
    /// Mean MSE on the validation split (training split if it is empty).
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr,seconds\n");
        for r in &self.epochs {
            let _ = writeln!(out, "{},{:e},{:e},{:e},{:.3}", r.epoch, r.train_loss, r.val_loss, r.lr, r.seconds);
        }
        out
    }
}

/// Padded input frames and label frames of one sample, each `(1, C, H', W')`.
struct Prepared {
    inputs: Vec<Tensor<f32>>,
    labels: Vec<Tensor<f32>>,
    rec: CropRecord,
}

fn prepare(samples: &[Sample], norm: &NormStats, multiple: usize) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            let (h, w) = s.dims();
            let rec = CropRecord::for_dims(h, w, multiple);
            let inputs = s
                .features
                .frames()
                .iter()
                .map(|f| input_tensor(norm, f, &rec))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let labels = s
                .label
                .frames()
                .iter()
                .map(|l| label_tensor(norm, l, &rec))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Ok(Prepared { inputs, labels, rec })
        })
        .collect::<Result<_>>()
        .map_err(|e: PipelineError| e)
}

/// Groups indices into batches of up to `size`, starting a new batch whenever
/// the padded shape or sequence length changes.
fn batches(order: &[usize], data: &[Prepared], size: usize) -> Vec<Vec<usize>> {
    let key = |i: usize| (data[i].inputs[0].shape(), data[i].inputs.len(), data[i].rec);
    let mut out: Vec<Vec<usize>> = Vec::new();
    for &i in order {
        match out.last_mut() {
            Some(b) if b.len() < size && key(b[0]) == key(i) => b.push(i),
            _ => out.push(vec![i]),
        }
    }
    out
}

fn stack_frames(data: &[Prepared], batch: &[usize], pick: fn(&Prepared) -> &Vec<Tensor<f32>>) -> Result<Vec<Tensor<f32>>> {
    let frames = pick(&data[batch[0]]).len();
    (0..frames)
        .map(|t| {
            let items: Vec<&Tensor<f32>> = batch.iter().map(|&i| &pick(&data[i])[t]).collect();
            Ok(Tensor::stack(&items).map_err(ModelError::from)?)
        })
        .collect()
}

/// Reverses rows and/or columns of every channel.
fn flip_tensor(t: &Tensor<f32>, rows: bool, cols: bool) -> Tensor<f32> {
    let (n, c, h, w) = t.shape();
    Tensor::from_fn(n, c, h, w, |i| {
        let (plane, y, x) = (i / (h * w), (i / w) % h, i % w);
        let y = if rows { h - 1 - y } else { y };
        let x = if cols { w - 1 - x } else { x };
        t.data()[plane * h * w + y * w + x]
    })
}

fn flip_rec(rec: CropRecord, rows: bool, cols: bool) -> CropRecord {
    let (top, bottom) = if rows { (rec.bottom, rec.top) } else { (rec.top, rec.bottom) };
    let (left, right) = if cols { (rec.right, rec.left) } else { (rec.left, rec.right) };
    CropRecord { top, bottom, left, right }
}

/// Forward pass on one batch; returns the mean window MSE and, when `grad`
/// is set, accumulates parameter gradients. `flip` mirrors rows and columns.
fn batch_step(net: &mut EdgeNet<f32>, data: &[Prepared], batch: &[usize], grad: bool, flip: (bool, bool)) -> Result<f64> {
    let mut xs = stack_frames(data, batch, |p| &p.inputs)?;
    let mut ts = stack_frames(data, batch, |p| &p.labels)?;
    let mut rec = data[batch[0]].rec;
    if flip != (false, false) {
        for t in xs.iter_mut().chain(ts.iter_mut()) {
            *t = flip_tensor(t, flip.0, flip.1);
        }
        rec = flip_rec(rec, flip.0, flip.1);
    }
    match net {
        EdgeNet::Static(n) => {
            let (y, cache) = n.forward_train(&xs[0])?;
            let (loss, dy) = window_mse(&y, &ts[0], &rec)?;
            if grad {
                n.backward(&cache, &dy)?;
            }
            Ok(loss)
        }
        EdgeNet::Transient(n) => {
            let (ys, cache) = n.forward_train(&xs)?;
            let frames = ys.len() as f32;
            let mut total = 0.0;
            let mut dys = Vec::with_capacity(ys.len());
            for (y, t) in ys.iter().zip(&ts) {
                let (loss, dy) = window_mse(y, t, &rec)?;
                total += loss;
                dys.push(dy.map(|g| g / frames));
            }
            if grad {
                n.backward(&cache, &dys)?;
            }
            Ok(total / ys.len() as f64)
        }
    }
}

fn mean_loss(net: &mut EdgeNet<f32>, data: &[Prepared], batch_size: usize) -> Result<f64> {
    let order: Vec<usize> = (0..data.len()).collect();
    let (mut sum, mut count) = (0.0, 0usize);
    for b in batches(&order, data, batch_size) {
        sum += batch_step(net, data, &b, false, (false, false))? * b.len() as f64;
        count += b.len();
    }
    Ok(sum / count as f64)
}

pub fn resolve_architecture(task: Task, cfg: &TrainConfig, train: &[Sample]) -> Result<Architecture> {
    let mut arch = cfg.architecture.clone().unwrap_or_else(|| Architecture::for_task(task));
    if let (Architecture::Transient(t), Some(Sample { label: Label::Sequence(seq), .. })) = (&mut arch, train.first()) {
        t.frames = seq.len();
        t.dt_seconds = seq.dt_seconds();
    }
    arch.validate()?;
    if arch.in_channels() != task.input_channels() || arch_is_transient(&arch) != task.is_transient() {
        return Err(PipelineError::Config(format!("architecture does not fit task {task}")));
    }
    Ok(arch)
}

fn arch_is_transient(arch: &Architecture) -> bool {
    matches!(arch, Architecture::Transient(_))
}

/// Trains a model on `train`, selecting the epoch with the lowest validation loss.
pub fn train(task: Task, train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<(ModelBundle, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(PipelineError::TooFewCases { needed: 1, found: 0 });
    }
    let features: Vec<&Features> = train.iter().map(|s| &s.features).collect();
    let labels: Vec<&[GridMap]> = train.iter().map(|s| s.label.frames()).collect();
    let norm = NormStats::fit(&features, &labels)?;
    let arch = resolve_architecture(task, cfg, train)?;
    let multiple = arch.size_multiple();
    let train_data = prepare(train, &norm, multiple)?;
    let val_data = prepare(val, &norm, multiple)?;

    let mut net = EdgeNet::<f32>::build(&arch, cfg.seed)?;
    let mut adam = AdamState::new(cfg.adam);
    let mut shuffle_rng = Pcg32::stream(cfg.seed, 0, "shuffle");
    let mut augment_rng = Pcg32::stream(cfg.seed, 0, "augment");
    let mut log = TrainLog::default();
    let mut best: Option<(f64, EdgeNet<f32>)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_data.len()).collect();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        shuffle_rng.shuffle(&mut order);
        let (mut sum, mut count) = (0.0, 0usize);
        for (bi, batch) in batches(&order, &train_data, cfg.batch_size).iter().enumerate() {
            net.zero_grad();
            let flip = if cfg.augment {
                let bits = augment_rng.next_u32();
                (bits >> 31 == 1, (bits >> 30) & 1 == 1)
            } else {
                (false, false)
            };
            let loss = batch_step(&mut net, &train_data, batch, true, flip)?;
            let penalty = l2_penalty(net.named_params().into_iter().map(|(_, p)| p), cfg.adam.l2);
            let grads_finite = net
                .named_params()
                .iter()
                .all(|(_, p)| p.grad.iter().all(|g| g.is_finite()));
            if !loss.is_finite() || !grads_finite {
                return Err(PipelineError::NonFiniteLoss { epoch, batch: bi });
            }
            sum += (loss + penalty) * batch.len() as f64;
            count += batch.len();
            let mut params = net.params_mut();
            adam.update(&mut params);
        }
        let train_loss = sum / count as f64;
        let val_loss = if val_data.is_empty() {
            mean_loss(&mut net, &train_data, cfg.batch_size)?
        } else {
            mean_loss(&mut net, &val_data, cfg.batch_size)?
        };
        if !val_loss.is_finite() {
            return Err(PipelineError::NonFiniteLoss { epoch, batch: 0 });
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: adam.current_lr(),
            seconds: started.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, net.clone()));
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if cfg.checkpoint_interval > 0 && epoch % cfg.checkpoint_interval == 0 {
            let dir = cfg.checkpoint_dir.as_ref().expect("validated");
            std::fs::create_dir_all(dir).map_err(|source| ModelError::Io {
                path: dir.clone(),
                source,
            })?;
            ModelBundle::new(task, net.clone(), norm.clone())?.save(&dir.join(format!("epoch_{epoch:04}.edgemodel")))?;
        }
        if cfg.patience.is_some_and(|p| since_best >= p) {
            break;
        }
    }
    // Zero epochs yields the initialized network with fitted normalization.
    let best_net = best.map_or(net, |(_, n)| n);
    Ok((ModelBundle::new(task, best_net, norm)?, log))
}

// ---------------------------------------------------------------------------
// Evaluation

/// Mean and maximum absolute difference over all pixels of all frames.
pub fn abs_error_stats(pred: &[GridMap], truth: &[GridMap]) -> Result<(f64, f64)> {
    let (mut sum, mut max, mut n) = (0.0, 0.0f64, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        if p.dims() != t.dims() {
            return Err(PipelineError::DimsMismatch {
                pred: p.dims(),
                label: t.dims(),
            });
        }
        for (a, b) in p.values().iter().zip(t.values()) {
            let d = (a - b).abs();
            sum += d;
            max = max.max(d);
            n += 1;
        }
    }
    if pred.len() != truth.len() || n == 0 {
        return Err(PipelineError::DimsMismatch {
            pred: (pred.len(), 0),
            label: (truth.len(), 0),
        });
    }
    Ok((sum / n as f64, max))
}

/// Display unit and thermal/supply corner for a task's errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corner {
    pub unit: &'static str,
    /// Multiplies label units into display units (V to mV for IR).
    pub scale: f64,
    /// Reference value, in display units, that percentages are taken of.
    pub value: f64,
}

impl Corner {
    pub fn for_task(task: Task, chip: &ChipSpec) -> Self {
        match task {
            Task::IrStatic => Corner {
                unit: "mV",
                scale: 1e3,
                value: chip.vdd_volts * 1e3,
            },
            _ => Corner {
                unit: "C",
                scale: 1.0,
                value: chip.thermal_corner_c,
            },
        }
    }

    pub fn percent(&self, err: f64) -> f64 {
        100.0 * err / self.value
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseError {
    pub id: String,
    /// Display units.
    pub avg_err: f64,
    pub max_err: f64,
    pub pct_avg: f64,
    pub pct_max: f64,
    /// Mean error of each frame (one entry for static tasks).
    pub frame_avg: Vec<f64>,
    pub frame_max: Vec<f64>,
    pub infer_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Equal-width bins over `[0, max]`; the top edge is inclusive.
    pub fn build(values: impl IntoIterator<Item = f64> + Clone, bins: usize) -> Self {
        let bins = bins.max(1);
        let hi = values.clone().into_iter().fold(0.0f64, f64::max);
        let mut counts = vec![0u64; bins];
        for v in values {
            let i = if hi > 0.0 { ((v / hi) * bins as f64) as usize } else { 0 };
            counts[i.min(bins - 1)] += 1;
        }
        Self { lo: 0.0, hi, counts }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(out, "{:e},{:e},{c}", self.lo + w * i as f64, self.lo + w * (i + 1) as f64);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub task: Task,
    pub corner: Corner,
    pub cases: Vec<CaseError>,
    pub histogram: Histogram,
}

impl ErrorReport {
    /// Mean of per-case averages.
    pub fn avg_err(&self) -> f64 {
        self.cases.iter().map(|c| c.avg_err).sum::<f64>() / self.cases.len().max(1) as f64
    }

    pub fn max_err(&self) -> f64 {
        self.cases.iter().map(|c| c.max_err).fold(0.0, f64::max)
    }

    pub fn median_infer_ms(&self) -> f64 {
        median(self.cases.iter().map(|c| c.infer_ms).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("case_id,avg_err,max_err,pct_avg,pct_max,infer_ms\n");
        for c in &self.cases {
            let _ = writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{:.3}",
                c.id, c.avg_err, c.max_err, c.pct_avg, c.pct_max, c.infer_ms
            );
        }
        out
    }

    /// Table with average and maximum error columns, one row per case plus an aggregate row.
    pub fn summary(&self) -> String {
        let u = self.corner.unit;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "task {}  corner {:.3} {u}  cases {}",
            self.task,
            self.corner.value,
            self.cases.len()
        );
        let _ = writeln!(
            out,
            "{:<16} {:>14} {:>10} {:>14} {:>10} {:>10}",
            "case",
            format!("avg err ({u})"),
            "avg %",
            format!("max err ({u})"),
            "max %",
            "time ms"
        );
        let row = |out: &mut String, id: &str, avg: f64, max: f64, ms: f64| {
            let _ = writeln!(
                out,
                "{id:<16} {avg:>14.3} {:>10.3} {max:>14.3} {:>10.3} {ms:>10.3}",
                self.corner.percent(avg),
                self.corner.percent(max)
            );
        };
        for c in &self.cases {
            row(&mut out, &c.id, c.avg_err, c.max_err, c.infer_ms);
        }
        row(&mut out, "all", self.avg_err(), self.max_err(), self.median_infer_ms());
        out
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn prediction_frames(p: Prediction) -> Vec<GridMap> {
    match p {
        Prediction::Static(m) => vec![m],
        Prediction::Sequence(s) => s.into_frames(),
    }
}

/// Errors in physical units on de-normalized predictions. Cases run on up to
/// `parallel` threads; the report keeps input order.
pub fn evaluate(model: &ModelBundle, samples: &[Sample], corner: Corner, bins: usize, parallel: usize) -> Result<ErrorReport> {
    let per_case = par_map(samples.len(), parallel, |i| -> Result<(CaseError, Vec<f64>)> {
        let s = &samples[i];
        let run = || -> Result<(CaseError, Vec<f64>)> {
            let started = Instant::now();
            let pred = prediction_frames(model.infer(&s.features)?);
            let infer_ms = started.elapsed().as_secs_f64() * 1e3;
            let truth = s.label.frames();
            let (avg, max) = abs_error_stats(&pred, truth)?;
            let mut frame_avg = Vec::with_capacity(pred.len());
            let mut frame_max = Vec::with_capacity(pred.len());
            let mut pixels = Vec::new();
            for (p, t) in pred.iter().zip(truth) {
                let (a, m) = abs_error_stats(std::slice::from_ref(p), std::slice::from_ref(t))?;
                frame_avg.push(a * corner.scale);
                frame_max.push(m * corner.scale);
                pixels.extend(p.values().iter().zip(t.values()).map(|(a, b)| (a - b).abs() * corner.scale));
            }
            let (avg_err, max_err) = (avg * corner.scale, max * corner.scale);
            Ok((
                CaseError {
                    id: s.id.clone(),
                    avg_err,
                    max_err,
                    pct_avg: corner.percent(avg_err),
                    pct_max: corner.percent(max_err),
                    frame_avg,
                    frame_max,
                    infer_ms,
                },
                pixels,
            ))
        };
        run().map_err(|e| e.in_case(&s.id))
    });
    let mut cases = Vec::with_capacity(samples.len());
    let mut pixels = Vec::new();
    for r in per_case {
        let (c, p) = r?;
        cases.push(c);
        pixels.extend(p);
    }
    Ok(ErrorReport {
        task: model.task,
        corner,
        cases,
        histogram: Histogram::build(pixels.iter().copied(), bins),
    })
}

/// Median wall-clock milliseconds of `infer` over `repetitions` runs.
pub fn measure_runtime(model: &ModelBundle, features: &Features, repetitions: usize) -> Result<f64> {
    if repetitions < 3 {
        return Err(PipelineError::Config(format!("need at least 3 repetitions, got {repetitions}")));
    }
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let started = Instant::now();
        let out = model.infer(features)?;
        times.push(started.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    Ok(median(times))
}
