// SPDX-License-Identifier: Apache-2.0

//! Model input channels and dataset normalization.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::gridio::{self, GridError, GridKind, GridMap, GridSequence};
use crate::synth::PadLayout;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("empty pad set")]
    NoPads,
    #[error("missing input `{0}` for task {1}")]
    MissingInput(&'static str, Task),
    #[error("channel {channel} has zero variance")]
    ZeroVariance { channel: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("no training data to fit normalization")]
    Empty,
    #[error("{path}:{line}: {msg}")]
    Format {
        path: std::path::PathBuf,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    ThermalStatic,
    IrStatic,
    ThermalTransient,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::ThermalStatic => "thermal_static",
            Task::IrStatic => "ir_static",
            Task::ThermalTransient => "thermal_transient",
        }
    }

    pub fn input_channels(self) -> usize {
        match self {
            Task::IrStatic => 3,
            Task::ThermalStatic | Task::ThermalTransient => 1,
        }
    }

    pub fn is_transient(self) -> bool {
        self == Task::ThermalTransient
    }

    pub fn label_kind(self) -> GridKind {
        match self {
            Task::IrStatic => GridKind::IrDrop,
            _ => GridKind::Temperature,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "thermal_static" => Ok(Task::ThermalStatic),
            "ir_static" => Ok(Task::IrStatic),
            "thermal_transient" => Ok(Task::ThermalTransient),
            o => Err(format!(
                "unknown task `{o}` (expected thermal_static, ir_static or thermal_transient)"
            )),
        }
    }
}

/// Harmonic aggregate `1 / sum(1 / d_i)` of a set of distances.
pub fn harmonic_distance(distances: &[f64]) -> f64 {
    1.0 / distances.iter().map(|d| 1.0 / d).sum::<f64>()
}

/// Effective distance (um) from every tile center to the pad set.
///
/// Center-to-center Euclidean distances are clamped below at half a pixel so
/// a tile holding a pad stays finite.
pub fn effective_pad_distance(
    pads: &PadLayout,
    rows: usize,
    cols: usize,
    pixel_size_um: f64,
) -> Result<GridMap> {
    if pads.pads().is_empty() {
        return Err(FeatureError::NoPads);
    }
    let floor = pixel_size_um / 2.0;
    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut inv_sum = 0.0;
            for &(pr, pc) in pads.pads() {
                let dr = r as f64 - pr as f64;
                let dc = c as f64 - pc as f64;
                let d = (pixel_size_um * (dr * dr + dc * dc).sqrt()).max(floor);
                inv_sum += 1.0 / d;
            }
            values.push(1.0 / inv_sum);
        }
    }
    Ok(GridMap::new(rows, cols, pixel_size_um, GridKind::PadDistance, values)?)
}

/// Ordered, dimension-identical input channels of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    channels: Vec<GridMap>,
}

impl FeatureTensor {
    pub fn new(channels: Vec<GridMap>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| FeatureError::Shape("feature tensor needs at least one channel".into()))?;
        let dims = first.dims();
        if let Some(i) = channels.iter().position(|c| c.dims() != dims) {
            return Err(FeatureError::Shape(format!(
                "channel {i} is {:?}, channel 0 is {dims:?}",
                channels[i].dims()
            )));
        }
        Ok(Self { channels })
    }

    pub fn channels(&self) -> &[GridMap] {
        &self.channels
    }

    /// `(C, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let (h, w) = self.channels[0].dims();
        (self.channels.len(), h, w)
    }

    pub fn pixel_size_um(&self) -> f64 {
        self.channels[0].pixel_size_um()
    }
}

/// Raw inputs of one testcase; which ones are required depends on the task.
#[derive(Debug, Clone, Default)]
pub struct CaseInputs {
    pub power: Option<GridMap>,
    pub density: Option<GridMap>,
    pub pads: Option<PadLayout>,
    pub power_sequence: Option<GridSequence>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Features {
    Static(FeatureTensor),
    Sequence(Vec<FeatureTensor>),
}

impl Features {
    pub fn frames(&self) -> &[FeatureTensor] {
        match self {
            Features::Static(t) => std::slice::from_ref(t),
            Features::Sequence(v) => v,
        }
    }
}

/// Stacks channels in the fixed per-task order: IR is `[power, pdn_density, pad_distance]`.
pub fn assemble_features(inputs: &CaseInputs, task: Task) -> Result<Features> {
    match task {
        Task::ThermalStatic => {
            let power = inputs.power.clone().ok_or(FeatureError::MissingInput("power", task))?;
            Ok(Features::Static(FeatureTensor::new(vec![power])?))
        }
        Task::IrStatic => {
            let power = inputs.power.as_ref().ok_or(FeatureError::MissingInput("power", task))?;
            let density = inputs.density.as_ref().ok_or(FeatureError::MissingInput("pdn_density", task))?;
            let pads = inputs.pads.as_ref().ok_or(FeatureError::MissingInput("pads", task))?;
            if pads.dims() != power.dims() {
                return Err(FeatureError::Shape(format!(
                    "pad layout is {:?}, power map is {:?}",
                    pads.dims(),
                    power.dims()
                )));
            }
            let dist = effective_pad_distance(pads, power.rows(), power.cols(), power.pixel_size_um())?;
            Ok(Features::Static(FeatureTensor::new(vec![
                power.clone(),
                density.clone(),
                dist,
            ])?))
        }
        Task::ThermalTransient => {
            let seq = inputs
                .power_sequence
                .as_ref()
                .ok_or(FeatureError::MissingInput("power_sequence", task))?;
            let frames = seq
                .frames()
                .iter()
                .map(|f| FeatureTensor::new(vec![f.clone()]))
                .collect::<Result<_>>()?;
            Ok(Features::Sequence(frames))
        }
    }
}

/// Per-channel and label mean/standard deviation (population) from the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub channels: Vec<(f64, f64)>,
    pub label: (f64, f64),
}

fn mean_std<'a>(name: &str, planes: impl Iterator<Item = &'a [f64]> + Clone) -> Result<(f64, f64)> {
    let (mut n, mut sum) = (0usize, 0.0);
    for p in planes.clone() {
        n += p.len();
        sum += p.iter().sum::<f64>();
    }
    if n == 0 {
        return Err(FeatureError::Empty);
    }
    let mean = sum / n as f64;
    let var = planes
        .flat_map(|p| p.iter())
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    if !(std > 0.0) || std <= 1e-12 * mean.abs() {
        return Err(FeatureError::ZeroVariance {
            channel: name.to_string(),
        });
    }
    Ok((mean, std))
}

impl NormStats {
    /// Fits over every pixel of every frame of the given training samples.
    pub fn fit(features: &[&Features], labels: &[&[GridMap]]) -> Result<Self> {
        let first = features.first().ok_or(FeatureError::Empty)?;
        let n_ch = first.frames()[0].dims().0;
        let mut channels = Vec::with_capacity(n_ch);
        for ch in 0..n_ch {
            let planes = features
                .iter()
                .flat_map(|f| f.frames().iter())
                .map(move |t| t.channels()[ch].values());
            channels.push(mean_std(&format!("{ch}"), planes)?);
        }
        let label = mean_std("label", labels.iter().flat_map(|l| l.iter()).map(|m| m.values()))?;
        Ok(Self { channels, label })
    }

    pub fn apply(&self, t: &FeatureTensor) -> Result<FeatureTensor> {
        self.map_channels(t, |v, (m, s)| (v - m) / s)
    }

    pub fn invert(&self, t: &FeatureTensor) -> Result<FeatureTensor> {
        self.map_channels(t, |v, (m, s)| v * s + m)
    }

    fn map_channels(&self, t: &FeatureTensor, f: impl Fn(f64, (f64, f64)) -> f64) -> Result<FeatureTensor> {
        if t.channels().len() != self.channels.len() {
            return Err(FeatureError::Shape(format!(
                "tensor has {} channels, stats have {}",
                t.channels().len(),
                self.channels.len()
            )));
        }
        let channels = t
            .channels()
            .iter()
            .zip(&self.channels)
            .map(|(c, &ms)| {
                // Normalized planes are not physical quantities, so store them as temperature (unconstrained).
                let kind = GridKind::Temperature;
                c.with_values(kind, c.values().iter().map(|&v| f(v, ms)).collect())
            })
            .collect::<std::result::Result<_, _>>()?;
        FeatureTensor::new(channels)
    }

    pub fn normalize_label(&self, v: f64) -> f64 {
        (v - self.label.0) / self.label.1
    }

    pub fn denormalize_label(&self, v: f64) -> f64 {
        v * self.label.1 + self.label.0
    }

    pub fn format(&self) -> String {
        let mut out = String::from("EDGENORM v1\n");
        for (i, (m, s)) in self.channels.iter().enumerate() {
            out.push_str(&format!("{i} {m} {s}\n"));
        }
        out.push_str(&format!("label {} {}\n", self.label.0, self.label.1));
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: &str| FeatureError::Format {
            path: path.to_path_buf(),
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, l)) if l.trim() == "EDGENORM v1" => {}
            _ => return Err(err(1, "wrong magic, expected `EDGENORM v1`")),
        }
        let mut channels = Vec::new();
        let mut label = None;
        for (i, line) in lines {
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.len() != 3 {
                return Err(err(i + 1, "expected `channel mean std`"));
            }
            let m: f64 = tok[1].parse().map_err(|_| err(i + 1, "bad mean"))?;
            let s: f64 = tok[2].parse().map_err(|_| err(i + 1, "bad std"))?;
            if tok[0] == "label" {
                label = Some((m, s));
            } else if tok[0].parse::<usize>().ok() == Some(channels.len()) {
                channels.push((m, s));
            } else {
                return Err(err(i + 1, "channel indices must be consecutive from 0"));
            }
        }
        let label = label.ok_or_else(|| err(1, "missing label line"))?;
        if channels.is_empty() {
            return Err(err(1, "no channel lines"));
        }
        Ok(Self { channels, label })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(gridio::write_text(path, &self.format())?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&gridio::read_text(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pad_distance_is_identity() {
        let pads = PadLayout::new(9, 0, 0, 1, 4).unwrap();
        let m = effective_pad_distance(&pads, 1, 4, 10.0).unwrap();
        assert_eq!(m.values(), &[5.0, 10.0, 20.0, 30.0]);
    }

    #[test]
    fn harmonic_examples() {
        assert!((harmonic_distance(&[7.0]) - 7.0).abs() < 1e-12);
        assert!((harmonic_distance(&[6.0; 4]) - 1.5).abs() < 1e-12);
        assert!((harmonic_distance(&[1.0, 3.0]) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn equidistant_pads_divide_distance() {
        // Center tile of a 3x3 die with pads at the four corners (pitch 2 checkerboard: (0,0),(2,2) only).
        let pads = PadLayout::new(2, 0, 0, 3, 3).unwrap();
        let m = effective_pad_distance(&pads, 3, 3, 1.0).unwrap();
        let d = 2f64.sqrt();
        assert!((m.get(1, 1) - d / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ir_features_order_and_shape() {
        let power = GridMap::filled(34, 32, 250.0, GridKind::Power, 0.01).unwrap();
        let density = GridMap::filled(34, 32, 250.0, GridKind::PdnDensity, 0.5).unwrap();
        let pads = PadLayout::new(4, 1, 1, 34, 32).unwrap();
        let inputs = CaseInputs {
            power: Some(power),
            density: Some(density),
            pads: Some(pads),
            power_sequence: None,
        };
        let Features::Static(t) = assemble_features(&inputs, Task::IrStatic).unwrap() else {
            panic!("expected static features");
        };
        assert_eq!(t.dims(), (3, 34, 32));
        let kinds: Vec<_> = t.channels().iter().map(|c| c.kind()).collect();
        assert_eq!(kinds, [GridKind::Power, GridKind::PdnDensity, GridKind::PadDistance]);

        let Features::Static(th) = assemble_features(&inputs, Task::ThermalStatic).unwrap() else {
            panic!()
        };
        assert_eq!(th.dims(), (1, 34, 32));
    }

    #[test]
    fn transient_features_per_frame() {
        let f = GridMap::filled(4, 4, 250.0, GridKind::Power, 0.1).unwrap();
        let inputs = CaseInputs {
            power_sequence: Some(GridSequence::new(vec![f; 200], 15.0).unwrap()),
            ..Default::default()
        };
        let feats = assemble_features(&inputs, Task::ThermalTransient).unwrap();
        assert_eq!(feats.frames().len(), 200);
        assert!(feats.frames().iter().all(|t| t.dims() == (1, 4, 4)));
    }

    #[test]
    fn missing_input_named() {
        let err = assemble_features(&CaseInputs::default(), Task::IrStatic).unwrap_err();
        assert!(err.to_string().contains("power"));
        let power = GridMap::filled(2, 2, 1.0, GridKind::Power, 1.0).unwrap();
        let inputs = CaseInputs {
            power: Some(power),
            ..Default::default()
        };
        let err = assemble_features(&inputs, Task::IrStatic).unwrap_err();
        assert!(err.to_string().contains("pdn_density"));
    }

    #[test]
    fn zero_variance_rejected() {
        let f = Features::Static(FeatureTensor::new(vec![GridMap::filled(2, 2, 1.0, GridKind::Power, 3.0).unwrap()]).unwrap());
        let l = [GridMap::new(2, 2, 1.0, GridKind::Temperature, vec![1.0, 2.0, 3.0, 4.0]).unwrap()];
        let err = NormStats::fit(&[&f], &[&l]).unwrap_err();
        assert!(matches!(err, FeatureError::ZeroVariance { .. }));
    }

    #[test]
    fn norm_file_roundtrip() {
        let s = NormStats {
            channels: vec![(0.1, 0.2), (3.0, 4.5)],
            label: (25.5, 1e-3),
        };
        let parsed = NormStats::parse(&s.format(), Path::new("n")).unwrap();
        assert_eq!(parsed, s);
    }
}
