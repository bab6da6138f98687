// SPDX-License-Identifier: Apache-2.0

//! Grid data model and its text formats.
//!
//! An EDGEGRID v1 file looks like
//!
//! ```text
//! EDGEGRID v1 power
//! 2 2 250
//! 1 2
//! 3 4
//! ```
//!
//! Values are printed with Rust's shortest round-trip decimal representation.
//! Sequences are stored as an EDGESEQ v1 manifest listing one grid file per
//! frame, relative to the manifest's directory.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("{path}: file not found")]
    NotFound { path: PathBuf },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: wrong magic, expected `{expected}`")]
    BadMagic {
        path: PathBuf,
        line: usize,
        expected: &'static str,
    },
    #[error("{path}:{line}: malformed header: {msg}")]
    BadHeader {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}:{line}: row-count mismatch: header declares {expected} rows, body has {found}")]
    RowCountMismatch {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}:{line}: column-count mismatch: expected {expected} values, found {found}")]
    ColumnCountMismatch {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}:{line}: cannot parse token `{token}` at row {row} col {col}")]
    Parse {
        path: PathBuf,
        line: usize,
        row: usize,
        col: usize,
        token: String,
    },
    #[error("invalid grid: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, GridError>;

pub(crate) fn io_err(path: &Path, source: io::Error) -> GridError {
    if source.kind() == io::ErrorKind::NotFound {
        GridError::NotFound {
            path: path.to_path_buf(),
        }
    } else {
        GridError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GridKind {
    Power,
    Temperature,
    IrDrop,
    PdnDensity,
    PadDistance,
}

impl GridKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GridKind::Power => "power",
            GridKind::Temperature => "temperature",
            GridKind::IrDrop => "ir_drop",
            GridKind::PdnDensity => "pdn_density",
            GridKind::PadDistance => "pad_distance",
        }
    }
}

impl fmt::Display for GridKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GridKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "power" => GridKind::Power,
            "temperature" => GridKind::Temperature,
            "ir_drop" => GridKind::IrDrop,
            "pdn_density" => GridKind::PdnDensity,
            "pad_distance" => GridKind::PadDistance,
            other => return Err(format!("unknown grid kind `{other}`")),
        })
    }
}

/// A 2-D scalar field over die tiles, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    rows: usize,
    cols: usize,
    pixel_size_um: f64,
    kind: GridKind,
    values: Vec<f64>,
}

impl GridMap {
    pub fn new(
        rows: usize,
        cols: usize,
        pixel_size_um: f64,
        kind: GridKind,
        values: Vec<f64>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(GridError::Invalid(format!("dimensions {rows}x{cols} must be positive")));
        }
        if !(pixel_size_um.is_finite() && pixel_size_um > 0.0) {
            return Err(GridError::Invalid(format!("pixel size {pixel_size_um} must be positive")));
        }
        if values.len() != rows * cols {
            return Err(GridError::Invalid(format!(
                "{} values for a {rows}x{cols} grid",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::Invalid(format!("non-finite value at index {i}")));
        }
        match kind {
            GridKind::Power | GridKind::PadDistance => {
                if let Some(i) = values.iter().position(|&v| v < 0.0) {
                    return Err(GridError::Invalid(format!(
                        "{kind} map has negative value at index {i}"
                    )));
                }
            }
            GridKind::PdnDensity => {
                if let Some(i) = values.iter().position(|&v| !(v > 0.0 && v <= 1.0)) {
                    return Err(GridError::Invalid(format!(
                        "density {} at index {i} outside (0, 1]",
                        values[i]
                    )));
                }
            }
            GridKind::Temperature | GridKind::IrDrop => {}
        }
        Ok(Self {
            rows,
            cols,
            pixel_size_um,
            kind,
            values,
        })
    }

    pub fn filled(rows: usize, cols: usize, pixel_size_um: f64, kind: GridKind, v: f64) -> Result<Self> {
        Self::new(rows, cols, pixel_size_um, kind, vec![v; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn pixel_size_um(&self) -> f64 {
        self.pixel_size_um
    }

    pub fn kind(&self) -> GridKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Same geometry, new kind and values.
    pub fn with_values(&self, kind: GridKind, values: Vec<f64>) -> Result<Self> {
        Self::new(self.rows, self.cols, self.pixel_size_um, kind, values)
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        self.with_values(self.kind, self.values.iter().map(|v| v * factor).collect())
    }
}

/// A uniformly time-stepped sequence of equally sized maps.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSequence {
    frames: Vec<GridMap>,
    dt_seconds: f64,
}

impl GridSequence {
    pub fn new(frames: Vec<GridMap>, dt_seconds: f64) -> Result<Self> {
        if frames.is_empty() {
            return Err(GridError::Invalid("sequence has no frames".into()));
        }
        if !(dt_seconds.is_finite() && dt_seconds > 0.0) {
            return Err(GridError::Invalid(format!("dt {dt_seconds} must be positive")));
        }
        let (dims, kind) = (frames[0].dims(), frames[0].kind());
        if let Some(i) = frames.iter().position(|f| f.dims() != dims || f.kind() != kind) {
            return Err(GridError::Invalid(format!("frame {i} differs in dims or kind from frame 0")));
        }
        Ok(Self { frames, dt_seconds })
    }

    pub fn frames(&self) -> &[GridMap] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<GridMap> {
        self.frames
    }

    pub fn dt_seconds(&self) -> f64 {
        self.dt_seconds
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.frames.len() as f64 * self.dt_seconds
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }
}

/// Die geometry plus the fixed technology/package constants used by the golden solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct ChipSpec {
    pub rows: usize,
    pub cols: usize,
    pub pixel_size_um: f64,
    pub vdd_volts: f64,
    pub ambient_c: f64,
    pub thermal_corner_c: f64,
    pub lateral_thermal_conductance_w_per_c: f64,
    pub ambient_thermal_conductance_w_per_c: f64,
    pub thermal_capacitance_j_per_c: f64,
    pub unit_sheet_conductance_s: f64,
}

impl Default for ChipSpec {
    /// 34x32 tiles of 250 um (an 8.5 mm x 8 mm die) at 0.7 V.
    fn default() -> Self {
        Self {
            rows: 34,
            cols: 32,
            pixel_size_um: 250.0,
            vdd_volts: 0.7,
            ambient_c: 25.0,
            thermal_corner_c: 105.0,
            lateral_thermal_conductance_w_per_c: 5e-2,
            ambient_thermal_conductance_w_per_c: 5e-3,
            thermal_capacitance_j_per_c: 0.75,
            unit_sheet_conductance_s: 40.0,
        }
    }
}

impl ChipSpec {
    pub fn with_dims(mut self, rows: usize, cols: usize) -> Self {
        self.rows = rows;
        self.cols = cols;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("pixel_size_um", self.pixel_size_um),
            ("vdd_volts", self.vdd_volts),
            ("lateral_thermal_conductance", self.lateral_thermal_conductance_w_per_c),
            ("ambient_thermal_conductance", self.ambient_thermal_conductance_w_per_c),
            ("thermal_capacitance", self.thermal_capacitance_j_per_c),
            ("unit_sheet_conductance", self.unit_sheet_conductance_s),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(GridError::Invalid(format!("chip.{name} = {v} must be positive")));
            }
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(GridError::Invalid("chip dimensions must be positive".into()));
        }
        if !(self.thermal_corner_c > self.ambient_c) {
            return Err(GridError::Invalid(format!(
                "thermal corner {} must exceed ambient {}",
                self.thermal_corner_c, self.ambient_c
            )));
        }
        Ok(())
    }

    /// First-order settling time constant `C / g_amb` in seconds.
    pub fn thermal_time_constant_s(&self) -> f64 {
        self.thermal_capacitance_j_per_c / self.ambient_thermal_conductance_w_per_c
    }
}

pub fn format_grid(map: &GridMap) -> String {
    let mut out = format!(
        "EDGEGRID v1 {}\n{} {} {}\n",
        map.kind, map.rows, map.cols, map.pixel_size_um
    );
    for r in 0..map.rows {
        let row = &map.values[r * map.cols..(r + 1) * map.cols];
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_grid(map: &GridMap, path: &Path) -> Result<()> {
    write_text(path, &format_grid(map))
}

pub fn parse_grid(text: &str, path: &Path) -> Result<GridMap> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let mut parts = header.split_whitespace();
    if parts.next() != Some("EDGEGRID") || parts.next() != Some("v1") {
        return Err(GridError::BadMagic {
            path: path.to_path_buf(),
            line: 1,
            expected: "EDGEGRID v1",
        });
    }
    let bad_header = |line: usize, msg: String| GridError::BadHeader {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let kind: GridKind = parts
        .next()
        .ok_or_else(|| bad_header(1, "missing kind".into()))?
        .parse()
        .map_err(|e: String| bad_header(1, e))?;

    let dims_line = lines.next().ok_or_else(|| bad_header(2, "missing dimensions line".into()))?;
    let dims: Vec<&str> = dims_line.split_whitespace().collect();
    if dims.len() != 3 {
        return Err(bad_header(2, format!("expected `rows cols pixel_size_um`, got `{dims_line}`")));
    }
    let rows: usize = dims[0].parse().map_err(|_| bad_header(2, format!("bad rows `{}`", dims[0])))?;
    let cols: usize = dims[1].parse().map_err(|_| bad_header(2, format!("bad cols `{}`", dims[1])))?;
    let pixel: f64 = dims[2].parse().map_err(|_| bad_header(2, format!("bad pixel size `{}`", dims[2])))?;

    let body: Vec<&str> = lines.filter(|l| !l.trim().is_empty()).collect();
    if body.len() != rows {
        return Err(GridError::RowCountMismatch {
            path: path.to_path_buf(),
            line: 3 + body.len().min(rows),
            expected: rows,
            found: body.len(),
        });
    }
    let mut values = Vec::with_capacity(rows * cols);
    for (r, line) in body.iter().enumerate() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != cols {
            return Err(GridError::ColumnCountMismatch {
                path: path.to_path_buf(),
                line: r + 3,
                expected: cols,
                found: tokens.len(),
            });
        }
        for (c, tok) in tokens.iter().enumerate() {
            let v: f64 = tok.parse().map_err(|_| GridError::Parse {
                path: path.to_path_buf(),
                line: r + 3,
                row: r + 1,
                col: c + 1,
                token: tok.to_string(),
            })?;
            values.push(v);
        }
    }
    GridMap::new(rows, cols, pixel, kind, values)
}

pub fn read_grid(path: &Path) -> Result<GridMap> {
    parse_grid(&read_text(path)?, path)
}

/// Writes `frames` as `<stem>_NNN.grid` next to `manifest_path` plus the EDGESEQ manifest.
pub fn write_sequence(seq: &GridSequence, manifest_path: &Path, stem: &str) -> Result<()> {
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let width = (seq.len().max(1) - 1).to_string().len().max(3);
    let mut manifest = format!("EDGESEQ v1 {}\n", seq.dt_seconds());
    for (i, frame) in seq.frames().iter().enumerate() {
        let name = format!("{stem}_{i:0width$}.grid");
        write_grid(frame, &dir.join(&name))?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    write_text(manifest_path, &manifest)
}

pub fn read_sequence(manifest_path: &Path) -> Result<GridSequence> {
    let text = read_text(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let mut parts = header.split_whitespace();
    if parts.next() != Some("EDGESEQ") || parts.next() != Some("v1") {
        return Err(GridError::BadMagic {
            path: manifest_path.to_path_buf(),
            line: 1,
            expected: "EDGESEQ v1",
        });
    }
    let dt: f64 = parts
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| GridError::BadHeader {
            path: manifest_path.to_path_buf(),
            line: 1,
            msg: "missing or malformed dt_seconds".into(),
        })?;
    let mut frames = Vec::new();
    for line in lines.map(str::trim).filter(|l| !l.is_empty()) {
        frames.push(read_grid(&dir.join(line))?);
    }
    GridSequence::new(frames, dt)
}

/// Rows/cols added on each side by [`pad_to_multiple`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CropRecord {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl CropRecord {
    pub fn for_dims(rows: usize, cols: usize, m: usize) -> Self {
        assert!(m >= 1, "padding multiple must be positive");
        let extra_r = rows.div_ceil(m) * m - rows;
        let extra_c = cols.div_ceil(m) * m - cols;
        Self {
            top: extra_r / 2,
            bottom: extra_r - extra_r / 2,
            left: extra_c / 2,
            right: extra_c - extra_c / 2,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.top + self.bottom + self.left + self.right == 0
    }

    pub fn padded_dims(&self, rows: usize, cols: usize) -> (usize, usize) {
        (rows + self.top + self.bottom, cols + self.left + self.right)
    }
}

/// Edge-replicating pad of a row-major plane.
pub fn pad_plane<T: Copy>(src: &[T], rows: usize, cols: usize, rec: &CropRecord) -> Vec<T> {
    let (pr, pc) = rec.padded_dims(rows, cols);
    let mut out = Vec::with_capacity(pr * pc);
    for r in 0..pr {
        let sr = r.saturating_sub(rec.top).min(rows - 1);
        for c in 0..pc {
            let sc = c.saturating_sub(rec.left).min(cols - 1);
            out.push(src[sr * cols + sc]);
        }
    }
    out
}

/// Inverse of [`pad_plane`]: extracts the original window.
pub fn crop_plane<T: Copy>(src: &[T], padded_cols: usize, rows: usize, cols: usize, rec: &CropRecord) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let start = (r + rec.top) * padded_cols + rec.left;
        out.extend_from_slice(&src[start..start + cols]);
    }
    out
}

pub fn pad_to_multiple(map: &GridMap, m: usize) -> Result<(GridMap, CropRecord)> {
    if m == 0 {
        return Err(GridError::Invalid("padding multiple must be >= 1".into()));
    }
    let rec = CropRecord::for_dims(map.rows, map.cols, m);
    let (pr, pc) = rec.padded_dims(map.rows, map.cols);
    let values = pad_plane(&map.values, map.rows, map.cols, &rec);
    Ok((GridMap::new(pr, pc, map.pixel_size_um, map.kind, values)?, rec))
}

pub fn crop(map: &GridMap, rec: &CropRecord) -> Result<GridMap> {
    if rec.top + rec.bottom >= map.rows || rec.left + rec.right >= map.cols {
        return Err(GridError::Invalid("crop record larger than map".into()));
    }
    let rows = map.rows - rec.top - rec.bottom;
    let cols = map.cols - rec.left - rec.right;
    let values = crop_plane(&map.values, map.cols, rows, cols, rec);
    GridMap::new(rows, cols, map.pixel_size_um, map.kind, values)
}

/// Linear min-max mapping to 0..=255, rounding half up; a constant map maps to 0.
pub fn pgm_levels(map: &GridMap) -> Vec<u8> {
    let (lo, hi) = (map.min(), map.max());
    let span = hi - lo;
    map.values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

pub fn format_pgm(map: &GridMap) -> String {
    let levels = pgm_levels(map);
    let mut out = format!("P2\n# min={} max={}\n{} {}\n255\n", map.min(), map.max(), map.cols, map.rows);
    for r in 0..map.rows {
        let row: Vec<String> = levels[r * map.cols..(r + 1) * map.cols]
            .iter()
            .map(|v| v.to_string())
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn export_pgm(map: &GridMap, path: &Path) -> Result<()> {
    write_text(path, &format_pgm(map))
}
