// SPDX-License-Identifier: Apache-2.0

//! Flat `key = value` run configuration checked against one schema table.
//!
//! The same table drives parsing, defaults and the `--help` listing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::golden::{SolverMethod, SolverOptions};
use crate::gridio::ChipSpec;
use crate::nn::AdamConfig;
use crate::pipeline::{SplitSpec, TrainConfig};
use crate::synth::{SynthConfig, TemplateDensities};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{origin}: unknown key `{key}`")]
    UnknownKey { origin: String, key: String },
    #[error("{origin}: bad value `{value}` for `{key}` (expected {expected})")]
    BadValue {
        origin: String,
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("{origin}: expected `key = value`, got `{line}`")]
    Syntax { origin: String, line: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueKind {
    Uint,
    Float,
    Bool,
    Method,
}

impl ValueKind {
    fn expected(self) -> &'static str {
        match self {
            ValueKind::Uint => "a non-negative integer",
            ValueKind::Float => "a finite number",
            ValueKind::Bool => "true or false",
            ValueKind::Method => "cg_jacobi or dense_direct",
        }
    }

    fn accepts(self, v: &str) -> bool {
        match self {
            ValueKind::Uint => v.parse::<u64>().is_ok(),
            ValueKind::Float => v.parse::<f64>().is_ok_and(f64::is_finite),
            ValueKind::Bool => v.parse::<bool>().is_ok(),
            ValueKind::Method => v.parse::<SolverMethod>().is_ok(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub kind: ValueKind,
    pub help: &'static str,
}

const fn k(key: &'static str, default: &'static str, kind: ValueKind, help: &'static str) -> KeySpec {
    KeySpec { key, default, kind, help }
}

use ValueKind::{Bool, Float, Method, Uint};

pub const SCHEMA: &[KeySpec] = &[
    k("seed", "1", Uint, "root seed for generation, splitting, initialization and shuffling"),
    k("chip.rows", "34", Uint, "die height in tiles"),
    k("chip.cols", "32", Uint, "die width in tiles"),
    k("chip.pixel_size_um", "250", Float, "tile pitch in micrometers"),
    k("chip.vdd_volts", "0.7", Float, "supply voltage; IR errors are reported as a fraction of it"),
    k("chip.ambient_c", "25", Float, "ambient temperature"),
    k("chip.thermal_corner_c", "105", Float, "thermal corner; temperature errors are reported as a fraction of it"),
    k("chip.lateral_conductance_w_per_c", "0.05", Float, "tile-to-tile thermal conductance"),
    k("chip.ambient_conductance_w_per_c", "0.005", Float, "tile-to-ambient thermal conductance"),
    k("chip.capacitance_j_per_c", "0.75", Float, "per-tile thermal capacitance"),
    k("chip.sheet_conductance_s", "40", Float, "branch conductance between two full-density tiles"),
    k("synth.n_power", "50", Uint, "number of power patterns"),
    k("synth.n_pdn", "10", Uint, "PDN density patterns per power pattern"),
    k("synth.n_pads", "10", Uint, "pad layouts per power/PDN pair"),
    k("synth.hotspots_min", "2", Uint, "fewest hotspots per power map"),
    k("synth.hotspots_max", "6", Uint, "most hotspots per power map"),
    k("synth.sigma_min_tiles", "1", Float, "smallest hotspot sigma"),
    k("synth.sigma_max_tiles", "4", Float, "largest hotspot sigma"),
    k("synth.budget_w", "10", Float, "total die power"),
    k("synth.background_fraction", "0.2", Float, "share of the budget spread uniformly"),
    k("synth.frames", "200", Uint, "frames per transient power sequence"),
    k("synth.dt_seconds", "15", Float, "time step of transient sequences"),
    k("synth.pad_pitch_min", "3", Uint, "smallest pad lattice pitch in tiles"),
    k("synth.pad_pitch_max", "6", Uint, "largest pad lattice pitch in tiles"),
    k("synth.density_high", "1", Float, "metal density of the dense PDN template"),
    k("synth.density_medium", "0.5", Float, "metal density of the medium PDN template"),
    k("synth.density_low", "0.25", Float, "metal density of the sparse PDN template"),
    k("synth.sequences", "false", Bool, "also write a transient power sequence per case"),
    k("solver.method", "cg_jacobi", Method, "golden linear solver"),
    k("solver.tol", "1e-10", Float, "relative residual target"),
    k("solver.max_iter", "0", Uint, "iteration cap; 0 means 20 x unknowns"),
    k("train.epochs", "500", Uint, "training epochs"),
    k("train.batch_size", "8", Uint, "samples per mini-batch"),
    k("train.lr", "0.001", Float, "base learning rate"),
    k("train.decay_rate", "0.98", Float, "learning-rate decay per decay_steps updates"),
    k("train.decay_steps", "1000", Uint, "updates per decay_rate factor"),
    k("train.beta1", "0.9", Float, "first-moment decay"),
    k("train.beta2", "0.999", Float, "second-moment decay"),
    k("train.eps", "1e-8", Float, "optimizer epsilon"),
    k("train.l2_rate", "1e-5", Float, "L2 regularization rate on kernels"),
    k("train.checkpoint_interval", "0", Uint, "save a checkpoint every N epochs; 0 disables"),
    k("train.patience", "0", Uint, "early-stop patience in epochs; 0 disables"),
    k("train.augment", "false", Bool, "mirror training batches across random die axes"),
    k("split.train", "0.8", Float, "training fraction"),
    k("split.val", "0.1", Float, "validation fraction"),
    k("split.test", "0.1", Float, "test fraction"),
    k("eval.bins", "50", Uint, "error histogram bins"),
    k("eval.repetitions", "5", Uint, "timing repetitions for runtime measurement"),
];

fn spec_of(key: &str) -> Option<&'static KeySpec> {
    SCHEMA.iter().find(|s| s.key == key)
}

/// Rendered key listing for `--help`.
pub fn help_text() -> String {
    let width = SCHEMA.iter().map(|s| s.key.len()).max().unwrap_or(0);
    let mut out = String::from("Configuration keys (key = default):\n");
    for s in SCHEMA {
        out.push_str(&format!("  {:<width$} = {:<10} {}\n", s.key, s.default, s.help));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: SCHEMA.iter().map(|s| (s.key, s.default.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str, origin: &str) -> Result<()> {
        let spec = spec_of(key).ok_or_else(|| ConfigError::UnknownKey {
            origin: origin.to_string(),
            key: key.to_string(),
        })?;
        let value = value.trim();
        if !spec.kind.accepts(value) {
            return Err(ConfigError::BadValue {
                origin: origin.to_string(),
                key: key.to_string(),
                value: value.to_string(),
                expected: spec.kind.expected(),
            });
        }
        self.values.insert(spec.key, value.to_string());
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let here = format!("{origin}:{}", i + 1);
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                origin: here.clone(),
                line: line.to_string(),
            })?;
            self.set(key.trim(), value, &here)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies a `key=value` override from the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (key, value) = kv.split_once('=').ok_or_else(|| ConfigError::Syntax {
            origin: "--set".into(),
            line: kv.to_string(),
        })?;
        self.set(key.trim(), value, "--set")
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("`{key}` is not in the schema"))
    }

    pub fn uint(&self, key: &str) -> u64 {
        self.get(key).parse().expect("validated on set")
    }

    pub fn usize(&self, key: &str) -> usize {
        self.uint(key) as usize
    }

    pub fn float(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated on set")
    }

    pub fn boolean(&self, key: &str) -> bool {
        self.get(key).parse().expect("validated on set")
    }

    /// Every key with its current value, one `key = value` line each.
    pub fn format(&self) -> String {
        SCHEMA
            .iter()
            .map(|s| format!("{} = {}\n", s.key, self.get(s.key)))
            .collect()
    }

    pub fn seed(&self) -> u64 {
        self.uint("seed")
    }

    pub fn chip(&self) -> ChipSpec {
        ChipSpec {
            rows: self.usize("chip.rows"),
            cols: self.usize("chip.cols"),
            pixel_size_um: self.float("chip.pixel_size_um"),
            vdd_volts: self.float("chip.vdd_volts"),
            ambient_c: self.float("chip.ambient_c"),
            thermal_corner_c: self.float("chip.thermal_corner_c"),
            lateral_thermal_conductance_w_per_c: self.float("chip.lateral_conductance_w_per_c"),
            ambient_thermal_conductance_w_per_c: self.float("chip.ambient_conductance_w_per_c"),
            thermal_capacitance_j_per_c: self.float("chip.capacitance_j_per_c"),
            unit_sheet_conductance_s: self.float("chip.sheet_conductance_s"),
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed(),
            chip: self.chip(),
            hotspots: (self.usize("synth.hotspots_min"), self.usize("synth.hotspots_max")),
            sigma_tiles: (self.float("synth.sigma_min_tiles"), self.float("synth.sigma_max_tiles")),
            budget_w: self.float("synth.budget_w"),
            background_fraction: self.float("synth.background_fraction"),
            frames: self.usize("synth.frames"),
            dt_seconds: self.float("synth.dt_seconds"),
            pad_pitch: (self.usize("synth.pad_pitch_min"), self.usize("synth.pad_pitch_max")),
            densities: TemplateDensities {
                high: self.float("synth.density_high"),
                medium: self.float("synth.density_medium"),
                low: self.float("synth.density_low"),
            },
            emit_sequences: self.boolean("synth.sequences"),
        }
    }

    /// `(n_power, n_pdn, n_pads)`.
    pub fn dataset_counts(&self) -> (usize, usize, usize) {
        (
            self.usize("synth.n_power"),
            self.usize("synth.n_pdn"),
            self.usize("synth.n_pads"),
        )
    }

    pub fn solver(&self) -> SolverOptions {
        SolverOptions {
            method: self.get("solver.method").parse().expect("validated on set"),
            tol: self.float("solver.tol"),
            max_iter: match self.usize("solver.max_iter") {
                0 => None,
                n => Some(n),
            },
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.usize("train.epochs"),
            batch_size: self.usize("train.batch_size"),
            adam: AdamConfig {
                lr: self.float("train.lr"),
                decay: self.float("train.decay_rate"),
                decay_steps: self.usize("train.decay_steps"),
                beta1: self.float("train.beta1"),
                beta2: self.float("train.beta2"),
                eps: self.float("train.eps"),
                l2: self.float("train.l2_rate"),
            },
            seed: self.seed(),
            checkpoint_interval: self.usize("train.checkpoint_interval"),
            checkpoint_dir: None,
            patience: match self.usize("train.patience") {
                0 => None,
                n => Some(n),
            },
            architecture: None,
            augment: self.boolean("train.augment"),
        }
    }

    pub fn split(&self) -> SplitSpec {
        SplitSpec {
            train: self.float("split.train"),
            val: self.float("split.val"),
            test: self.float("split.test"),
            seed: self.seed(),
        }
    }
}
