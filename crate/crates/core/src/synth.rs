// SPDX-License-Identifier: Apache-2.0

//! Synthetic testcase generation.
//!
//! Each generator is a pure function of `(seed, case_index, config)` and draws
//! from its own tagged [`Pcg32`] stream (`"power"`, `"waveform"`, `"pdn"`,
//! `"pads"`), so adding a new generator never perturbs the existing ones.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::gridio::{self, ChipSpec, GridError, GridKind, GridMap, GridSequence};
use crate::rng::Pcg32;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("no power sources: zero background and zero hotspots")]
    NoPowerSources,
    #[error("empty pad layout: pitch {pitch} with offsets ({offset_row}, {offset_col}) leaves no pad on a {rows}x{cols} die")]
    EmptyPadLayout {
        pitch: usize,
        offset_row: usize,
        offset_col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("{path}:{line}: {msg}")]
    Format { path: PathBuf, line: usize, msg: String },
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Checkerboard power-pad layout on a regular lattice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PadLayout {
    pitch_tiles: usize,
    offset_row: usize,
    offset_col: usize,
    rows: usize,
    cols: usize,
    pads: Vec<(usize, usize)>,
}

impl PadLayout {
    pub fn new(pitch: usize, offset_row: usize, offset_col: usize, rows: usize, cols: usize) -> Result<Self> {
        if pitch == 0 || offset_row >= pitch || offset_col >= pitch {
            return Err(SynthError::Config(format!(
                "pad pitch {pitch} must be positive and exceed offsets ({offset_row}, {offset_col})"
            )));
        }
        let mut pads = Vec::new();
        for r in (offset_row..rows).step_by(pitch) {
            for c in (offset_col..cols).step_by(pitch) {
                if Self::is_pad_site(pitch, offset_row, offset_col, r, c) {
                    pads.push((r, c));
                }
            }
        }
        if pads.is_empty() {
            return Err(SynthError::EmptyPadLayout {
                pitch,
                offset_row,
                offset_col,
                rows,
                cols,
            });
        }
        Ok(Self {
            pitch_tiles: pitch,
            offset_row,
            offset_col,
            rows,
            cols,
            pads,
        })
    }

    /// Checkerboard predicate: on the lattice and with even lattice-coordinate parity.
    pub fn is_pad_site(pitch: usize, offset_row: usize, offset_col: usize, r: usize, c: usize) -> bool {
        if r < offset_row || c < offset_col {
            return false;
        }
        let (dr, dc) = (r - offset_row, c - offset_col);
        dr % pitch == 0 && dc % pitch == 0 && (dr / pitch + dc / pitch) % 2 == 0
    }

    pub fn pitch(&self) -> usize {
        self.pitch_tiles
    }

    pub fn offsets(&self) -> (usize, usize) {
        (self.offset_row, self.offset_col)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn pads(&self) -> &[(usize, usize)] {
        &self.pads
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        r < self.rows && c < self.cols && Self::is_pad_site(self.pitch_tiles, self.offset_row, self.offset_col, r, c)
    }

    pub fn format(&self) -> String {
        let mut out = format!(
            "EDGEPADS v1\n{} {} {}\n",
            self.pitch_tiles, self.offset_row, self.offset_col
        );
        for (r, c) in &self.pads {
            out.push_str(&format!("{r} {c}\n"));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(gridio::write_text(path, &self.format())?)
    }

    /// Reads a pad file; the die dimensions come from the accompanying grids.
    pub fn read(path: &Path, rows: usize, cols: usize) -> Result<Self> {
        let text = gridio::read_text(path)?;
        let fmt_err = |line: usize, msg: &str| SynthError::Format {
            path: path.to_path_buf(),
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("EDGEPADS v1") {
            return Err(fmt_err(1, "wrong magic, expected `EDGEPADS v1`"));
        }
        let nums: Vec<usize> = lines
            .next()
            .unwrap_or("")
            .split_whitespace()
            .map(|t| t.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| fmt_err(2, "malformed `pitch offset_row offset_col` line"))?;
        if nums.len() != 3 {
            return Err(fmt_err(2, "expected `pitch offset_row offset_col`"));
        }
        let layout = Self::new(nums[0], nums[1], nums[2], rows, cols)?;
        let mut listed = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rc: Vec<usize> = line
                .split_whitespace()
                .map(|t| t.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| fmt_err(i + 3, "malformed pad coordinate"))?;
            if rc.len() != 2 {
                return Err(fmt_err(i + 3, "expected `r c`"));
            }
            listed.push((rc[0], rc[1]));
        }
        if listed != layout.pads {
            return Err(fmt_err(3, "listed pads disagree with pitch/offsets on this die"));
        }
        Ok(layout)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdnTemplate {
    High,
    Medium,
    Low,
}

impl PdnTemplate {
    pub const ALL: [PdnTemplate; 3] = [PdnTemplate::High, PdnTemplate::Medium, PdnTemplate::Low];
}

/// Metal density of each PDN template.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemplateDensities {
    pub high: f64,
    pub medium: f64,
    pub low: f64,
}

impl Default for TemplateDensities {
    fn default() -> Self {
        Self {
            high: 1.0,
            medium: 0.5,
            low: 0.25,
        }
    }
}

impl TemplateDensities {
    pub fn density(&self, t: PdnTemplate) -> f64 {
        match t {
            PdnTemplate::High => self.high,
            PdnTemplate::Medium => self.medium,
            PdnTemplate::Low => self.low,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.high <= 1.0 && self.high > self.medium && self.medium > self.low && self.low > 0.0;
        if !ok {
            return Err(SynthError::Config(format!(
                "template densities must satisfy 1 >= high > medium > low > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Template per region of a 3x3 partition of the die.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionAssignment(pub [[PdnTemplate; 3]; 3]);

impl RegionAssignment {
    pub fn uniform(t: PdnTemplate) -> Self {
        Self([[t; 3]; 3])
    }

    /// Region (band row, band col) holding tile `(r, c)`.
    pub fn region_of(r: usize, c: usize, rows: usize, cols: usize) -> (usize, usize) {
        (r * 3 / rows, c * 3 / cols)
    }

    pub fn density_map(
        &self,
        densities: &TemplateDensities,
        rows: usize,
        cols: usize,
        pixel_size_um: f64,
    ) -> Result<GridMap> {
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let (br, bc) = Self::region_of(r, c, rows, cols);
                values.push(densities.density(self.0[br][bc]));
            }
        }
        Ok(GridMap::new(rows, cols, pixel_size_um, GridKind::PdnDensity, values)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub chip: ChipSpec,
    /// Inclusive hotspot-count range.
    pub hotspots: (usize, usize),
    /// Hotspot Gaussian sigma range in tiles.
    pub sigma_tiles: (f64, f64),
    pub budget_w: f64,
    pub background_fraction: f64,
    pub frames: usize,
    pub dt_seconds: f64,
    /// Inclusive pad-pitch range in tiles.
    pub pad_pitch: (usize, usize),
    pub densities: TemplateDensities,
    /// Also emit a transient power sequence per testcase.
    pub emit_sequences: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            chip: ChipSpec::default(),
            hotspots: (2, 6),
            sigma_tiles: (1.0, 4.0),
            budget_w: 10.0,
            background_fraction: 0.2,
            frames: 200,
            dt_seconds: 15.0,
            pad_pitch: (3, 6),
            densities: TemplateDensities::default(),
            emit_sequences: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.chip.validate()?;
        self.densities.validate()?;
        let cfg = |m: String| Err(SynthError::Config(m));
        if self.hotspots.0 > self.hotspots.1 {
            return cfg(format!("empty hotspot range {:?}", self.hotspots));
        }
        let (s0, s1) = self.sigma_tiles;
        if !(s0 > 0.0 && s0 <= s1 && s1.is_finite()) {
            return cfg(format!("invalid sigma range {:?}", self.sigma_tiles));
        }
        if !(self.budget_w > 0.0 && self.budget_w.is_finite()) {
            return cfg(format!("power budget {} must be positive", self.budget_w));
        }
        if !(0.0..1.0).contains(&self.background_fraction) {
            return cfg(format!("background fraction {} outside [0, 1)", self.background_fraction));
        }
        if self.frames == 0 || !(self.dt_seconds > 0.0) {
            return cfg("frames and dt_seconds must be positive".into());
        }
        let (p0, p1) = self.pad_pitch;
        if p0 == 0 || p0 > p1 {
            return cfg(format!("invalid pad pitch range {:?}", self.pad_pitch));
        }
        if p0 > self.chip.rows.min(self.chip.cols) {
            return cfg(format!(
                "pad pitch {p0} exceeds die {}x{}",
                self.chip.rows, self.chip.cols
            ));
        }
        Ok(())
    }

    fn tiles(&self) -> usize {
        self.chip.rows * self.chip.cols
    }
}

/// Background level per tile and each hotspot's field, already scaled so that
/// `background * tiles + sum(fields)` equals the budget.
struct PowerComponents {
    background: f64,
    hotspots: Vec<Vec<f64>>,
}

fn power_components(cfg: &SynthConfig, case_index: u64) -> Result<PowerComponents> {
    cfg.validate()?;
    let (rows, cols) = (cfg.chip.rows, cfg.chip.cols);
    let mut rng = Pcg32::stream(cfg.seed, case_index, "power");
    let k = rng.range_inclusive(cfg.hotspots.0, cfg.hotspots.1);
    if k == 0 && cfg.background_fraction == 0.0 {
        return Err(SynthError::NoPowerSources);
    }
    let mut fields = Vec::with_capacity(k);
    for _ in 0..k {
        let cr = rng.uniform(0.0, rows as f64);
        let cc = rng.uniform(0.0, cols as f64);
        let sigma = rng.uniform(cfg.sigma_tiles.0, cfg.sigma_tiles.1);
        let amp = rng.uniform(0.5, 1.5);
        let inv = 1.0 / (2.0 * sigma * sigma);
        let mut f = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let (dr, dc) = (r as f64 + 0.5 - cr, c as f64 + 0.5 - cc);
                f.push(amp * (-(dr * dr + dc * dc) * inv).exp());
            }
        }
        fields.push(f);
    }
    let hot_budget = if k == 0 {
        0.0
    } else {
        cfg.budget_w * (1.0 - cfg.background_fraction)
    };
    let bg_budget = cfg.budget_w - hot_budget;
    let raw_total: f64 = fields.iter().flatten().sum();
    if k > 0 && raw_total <= 0.0 {
        return Err(SynthError::NoPowerSources);
    }
    for f in &mut fields {
        for v in f.iter_mut() {
            *v *= hot_budget / raw_total;
        }
    }
    Ok(PowerComponents {
        background: bg_budget / cfg.tiles() as f64,
        hotspots: fields,
    })
}

fn combine(components: &PowerComponents, weights: &[f64], tiles: usize) -> Vec<f64> {
    let mut out = vec![components.background; tiles];
    for (f, &w) in components.hotspots.iter().zip(weights) {
        for (o, v) in out.iter_mut().zip(f) {
            *o += w * v;
        }
    }
    out
}

fn rescale_to_budget(values: &mut [f64], budget: f64) {
    let total: f64 = values.iter().sum();
    if total > 0.0 {
        let s = budget / total;
        values.iter_mut().for_each(|v| *v *= s);
    }
}

pub fn gen_power_map(cfg: &SynthConfig, case_index: u64) -> Result<GridMap> {
    let comp = power_components(cfg, case_index)?;
    let mut values = combine(&comp, &vec![1.0; comp.hotspots.len()], cfg.tiles());
    rescale_to_budget(&mut values, cfg.budget_w);
    Ok(GridMap::new(
        cfg.chip.rows,
        cfg.chip.cols,
        cfg.chip.pixel_size_um,
        GridKind::Power,
        values,
    )?)
}

/// Per-hotspot amplitude multipliers over `frames` steps, each in `[0, 2]` and
/// starting at exactly 1.
///
/// A bounded random walk (steps uniform in +-0.15) is overridden by square
/// pulses: when idle, a pulse starts with probability 0.08, lasts 2..=8 frames
/// and holds a level uniform in `[0, 2]`.
pub fn hotspot_waveforms(cfg: &SynthConfig, case_index: u64, hotspots: usize) -> Vec<Vec<f64>> {
    let mut rng = Pcg32::stream(cfg.seed, case_index, "waveform");
    (0..hotspots)
        .map(|_| {
            let mut walk = 1.0f64;
            let mut pulse: Option<(usize, f64)> = None;
            let mut w = Vec::with_capacity(cfg.frames);
            w.push(1.0);
            for _ in 1..cfg.frames {
                walk = (walk + rng.uniform(-0.15, 0.15)).clamp(0.0, 2.0);
                pulse = match pulse {
                    Some((left, level)) if left > 1 => Some((left - 1, level)),
                    Some(_) => None,
                    None if rng.next_f64() < 0.08 => Some((rng.range_inclusive(2, 8), rng.uniform(0.0, 2.0))),
                    None => None,
                };
                w.push(pulse.map_or(walk, |(_, level)| level).clamp(0.0, 2.0));
            }
            w
        })
        .collect()
}

pub fn gen_power_sequence(cfg: &SynthConfig, case_index: u64) -> Result<GridSequence> {
    let comp = power_components(cfg, case_index)?;
    let mut static_values = combine(&comp, &vec![1.0; comp.hotspots.len()], cfg.tiles());
    // Same normalization as the static map so frame 0 reproduces it exactly.
    let total: f64 = static_values.iter().sum();
    let scale = if total > 0.0 { cfg.budget_w / total } else { 1.0 };
    rescale_to_budget(&mut static_values, cfg.budget_w);
    let waves = hotspot_waveforms(cfg, case_index, comp.hotspots.len());
    let mut frames = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let values = if t == 0 {
            static_values.clone()
        } else {
            let weights: Vec<f64> = waves.iter().map(|w| w[t]).collect();
            combine(&comp, &weights, cfg.tiles())
                .into_iter()
                .map(|v| v * scale)
                .collect()
        };
        frames.push(GridMap::new(
            cfg.chip.rows,
            cfg.chip.cols,
            cfg.chip.pixel_size_um,
            GridKind::Power,
            values,
        )?);
    }
    Ok(GridSequence::new(frames, cfg.dt_seconds)?)
}

pub fn gen_region_assignment(cfg: &SynthConfig, case_index: u64) -> RegionAssignment {
    let mut rng = Pcg32::stream(cfg.seed, case_index, "pdn");
    let mut grid = [[PdnTemplate::High; 3]; 3];
    for row in grid.iter_mut() {
        for t in row.iter_mut() {
            *t = PdnTemplate::ALL[rng.below(3) as usize];
        }
    }
    RegionAssignment(grid)
}

pub fn gen_pdn_density(cfg: &SynthConfig, case_index: u64) -> Result<GridMap> {
    cfg.validate()?;
    gen_region_assignment(cfg, case_index).density_map(
        &cfg.densities,
        cfg.chip.rows,
        cfg.chip.cols,
        cfg.chip.pixel_size_um,
    )
}

pub fn gen_pad_layout(cfg: &SynthConfig, case_index: u64) -> Result<PadLayout> {
    cfg.validate()?;
    let (rows, cols) = (cfg.chip.rows, cfg.chip.cols);
    let mut rng = Pcg32::stream(cfg.seed, case_index, "pads");
    let max_pitch = cfg.pad_pitch.1.min(rows.min(cols));
    let pitch = rng.range_inclusive(cfg.pad_pitch.0, max_pitch);
    let orow = rng.below(pitch as u32) as usize;
    let ocol = rng.below(pitch as u32) as usize;
    PadLayout::new(pitch, orow, ocol, rows, cols)
}

/// One testcase line of an EDGESET manifest; paths are relative to the manifest directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseEntry {
    pub id: String,
    pub power: PathBuf,
    pub pdn: PathBuf,
    pub pads: PathBuf,
    pub sequence: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    /// Directory the entry paths are relative to.
    pub base_dir: PathBuf,
    pub seed: Option<u64>,
    pub cases: Vec<CaseEntry>,
}

impl Manifest {
    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.base_dir.join(rel)
    }

    /// Directory holding a case's files.
    pub fn case_dir(&self, entry: &CaseEntry) -> PathBuf {
        self.resolve(entry.power.parent().unwrap_or(Path::new("")))
    }

    pub fn format(&self) -> String {
        let mut out = String::from("EDGESET v1\n");
        if let Some(seed) = self.seed {
            out.push_str(&format!("# seed {seed}\n"));
        }
        for c in &self.cases {
            out.push_str(&format!(
                "{} {} {} {}",
                c.id,
                c.power.display(),
                c.pdn.display(),
                c.pads.display()
            ));
            if let Some(s) = &c.sequence {
                out.push_str(&format!(" {}", s.display()));
            }
            out.push('\n');
        }
        out
    }

    /// Writes the manifest; entry paths must already be relative to `path`'s directory.
    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(gridio::write_text(path, &self.format())?)
    }

    /// Re-bases entries onto `path`'s directory and writes there.
    pub fn write_rebased(&self, path: &Path) -> Result<Manifest> {
        let dir = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &Path| relative_to(&self.resolve(p), dir);
        let out = Manifest {
            base_dir: dir.to_path_buf(),
            seed: self.seed,
            cases: self
                .cases
                .iter()
                .map(|c| CaseEntry {
                    id: c.id.clone(),
                    power: rebase(&c.power),
                    pdn: rebase(&c.pdn),
                    pads: rebase(&c.pads),
                    sequence: c.sequence.as_deref().map(rebase),
                })
                .collect(),
        };
        out.write(path)?;
        Ok(out)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = gridio::read_text(path)?;
        let fmt_err = |line: usize, msg: String| SynthError::Format {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == "EDGESET v1" => {}
            _ => return Err(fmt_err(1, "wrong magic, expected `EDGESET v1`".into())),
        }
        let mut seed = None;
        let mut cases = Vec::new();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let mut t = rest.split_whitespace();
                if t.next() == Some("seed") {
                    seed = t.next().and_then(|s| s.parse().ok());
                }
                continue;
            }
            let tok: Vec<&str> = line.split_whitespace().collect();
            if !(4..=5).contains(&tok.len()) {
                return Err(fmt_err(
                    i + 1,
                    format!("expected 4 or 5 fields, found {}", tok.len()),
                ));
            }
            cases.push(CaseEntry {
                id: tok[0].to_string(),
                power: tok[1].into(),
                pdn: tok[2].into(),
                pads: tok[3].into(),
                sequence: tok.get(4).map(PathBuf::from),
            });
        }
        Ok(Self {
            base_dir: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
            seed,
            cases,
        })
    }
}

fn relative_to(target: &Path, base: &Path) -> PathBuf {
    let t: Vec<_> = target.components().collect();
    let b: Vec<_> = base.components().collect();
    let common = t.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &t[common..] {
        out.push(c.as_os_str());
    }
    out
}

pub const POWER_FILE: &str = "power.grid";
pub const PDN_FILE: &str = "pdn.grid";
pub const PADS_FILE: &str = "pads.txt";
pub const SEQUENCE_FILE: &str = "power_seq.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Writes `n_power * n_pdn * n_pads` testcases plus `manifest.txt` under `out_dir`.
///
/// Case `(i, j, k)` uses power stream `i`, PDN stream `i * n_pdn + j` and pad
/// stream `(i * n_pdn + j) * n_pads + k`, so every PDN and pad pattern is distinct.
pub fn gen_dataset(
    cfg: &SynthConfig,
    n_power: usize,
    n_pdn: usize,
    n_pads: usize,
    out_dir: &Path,
) -> Result<Manifest> {
    if n_power == 0 || n_pdn == 0 || n_pads == 0 {
        return Err(SynthError::Config("dataset counts must be >= 1".into()));
    }
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| gridio::io_err(out_dir, e))?;
    let width = |n: usize| (n - 1).to_string().len();
    let (wi, wj, wk) = (width(n_power), width(n_pdn), width(n_pads));
    let mut cases = Vec::with_capacity(n_power * n_pdn * n_pads);
    for i in 0..n_power {
        let power = gen_power_map(cfg, i as u64)?;
        let sequence = if cfg.emit_sequences {
            Some(gen_power_sequence(cfg, i as u64)?)
        } else {
            None
        };
        for j in 0..n_pdn {
            let pdn_index = (i * n_pdn + j) as u64;
            let pdn = gen_pdn_density(cfg, pdn_index)?;
            for k in 0..n_pads {
                let pads = gen_pad_layout(cfg, pdn_index * n_pads as u64 + k as u64)?;
                let id = format!("c{i:0wi$}_{j:0wj$}_{k:0wk$}");
                let dir = out_dir.join(&id);
                fs::create_dir_all(&dir).map_err(|e| gridio::io_err(&dir, e))?;
                gridio::write_grid(&power, &dir.join(POWER_FILE))?;
                gridio::write_grid(&pdn, &dir.join(PDN_FILE))?;
                pads.write(&dir.join(PADS_FILE))?;
                let seq_rel = match &sequence {
                    Some(seq) => {
                        gridio::write_sequence(seq, &dir.join(SEQUENCE_FILE), "power")?;
                        Some(Path::new(&id).join(SEQUENCE_FILE))
                    }
                    None => None,
                };
                cases.push(CaseEntry {
                    power: Path::new(&id).join(POWER_FILE),
                    pdn: Path::new(&id).join(PDN_FILE),
                    pads: Path::new(&id).join(PADS_FILE),
                    sequence: seq_rel,
                    id,
                });
            }
        }
    }
    let manifest = Manifest {
        base_dir: out_dir.to_path_buf(),
        seed: Some(cfg.seed),
        cases,
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
