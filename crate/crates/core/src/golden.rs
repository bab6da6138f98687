// SPDX-License-Identifier: Apache-2.0

//! Ground-truth solvers for `G x = J` on tile conductance networks.
//!
//! IR drop is solved directly in drop coordinates: the unknown at a tile is
//! `VDD - V`, pads are Dirichlet nodes at drop 0 and each tile sinks
//! `P / VDD` amperes. Thermal networks solve for the rise above ambient with
//! every node tied to ambient through `g_amb`.

use thiserror::Error;

use crate::gridio::{ChipSpec, GridError, GridKind, GridMap, GridSequence};
use crate::synth::PadLayout;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("disconnected PDN: tile ({row}, {col}) has zero density")]
    DisconnectedPdn { row: usize, col: usize },
    #[error("no power pads on die")]
    NoPads,
    #[error("input dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("CG did not converge in {iterations} iterations (relative residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("IR drop {drop} V at tile {tile} reaches VDD {vdd} V")]
    ExcessiveDrop { tile: usize, drop: f64, vdd: f64 },
    #[error("invalid solver options: {0}")]
    Options(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T> = std::result::Result<T, SolveError>;

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds an `n x n` matrix, summing duplicate entries.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < n && c < n, "triplet ({r}, {c}) outside {n}x{n}");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(j, _)| j == c).map_or(0.0, |(_, v)| v)
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        for (r, yr) in y.iter_mut().enumerate().take(self.n) {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *yr = acc;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Exact (bitwise) symmetry.
    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|r| self.row(r).all(|(c, v)| self.get(c, r).to_bits() == v.to_bits()))
    }

    /// Positive diagonal that dominates the absolute off-diagonal row sum.
    pub fn is_diagonally_dominant(&self) -> bool {
        (0..self.n).all(|r| {
            let (mut diag, mut off) = (0.0, 0.0);
            for (c, v) in self.row(r) {
                if c == r {
                    diag = v;
                } else {
                    off += v.abs();
                }
            }
            diag > 0.0 && diag >= off
        })
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n * self.n];
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                d[r * self.n + c] = v;
            }
        }
        d
    }

    /// `self + shift * I`.
    pub fn shifted(&self, shift: f64) -> Self {
        let mut t = Vec::with_capacity(self.nnz() + self.n);
        for r in 0..self.n {
            t.extend(self.row(r).map(|(c, v)| (r, c, v)));
            t.push((r, r, shift));
        }
        Self::from_triplets(self.n, t)
    }
}

/// How unknowns map back to a physical quantity per tile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reference {
    /// Unknowns are drops below this supply voltage.
    Supply(f64),
    /// Unknowns are rises above this ambient temperature.
    Ambient(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConductanceSystem {
    pub rows: usize,
    pub cols: usize,
    pub g: CsrMatrix,
    pub j: Vec<f64>,
    /// Unknown index for each tile, `None` for Dirichlet tiles.
    pub node_of_tile: Vec<Option<usize>>,
    /// Dirichlet tiles and their fixed unknown-space value.
    pub dirichlet: Vec<(usize, f64)>,
    pub reference: Reference,
}

impl ConductanceSystem {
    pub fn n(&self) -> usize {
        self.g.n()
    }

    /// Unknown-space value at every tile (Dirichlet tiles take their fixed value).
    pub fn scatter(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for (t, node) in self.node_of_tile.iter().enumerate() {
            if let Some(i) = node {
                out[t] = x[*i];
            }
        }
        for &(t, v) in &self.dirichlet {
            out[t] = v;
        }
        out
    }

    /// Physical node value at every tile: voltage for IR systems, temperature for thermal ones.
    pub fn tile_values(&self, x: &[f64]) -> Vec<f64> {
        let s = self.scatter(x);
        match self.reference {
            Reference::Supply(vdd) => s.into_iter().map(|d| vdd - d).collect(),
            Reference::Ambient(t0) => s.into_iter().map(|d| t0 + d).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverMethod {
    CgJacobi,
    DenseDirect,
}

impl std::str::FromStr for SolverMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "cg_jacobi" => Ok(Self::CgJacobi),
            "dense_direct" => Ok(Self::DenseDirect),
            o => Err(format!("unknown solver method `{o}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub method: SolverMethod,
    pub tol: f64,
    /// Defaults to `20 * n` when `None`.
    pub max_iter: Option<usize>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            method: SolverMethod::CgJacobi,
            tol: 1e-10,
            max_iter: None,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(SolveError::Options(format!("tol {} outside (0, 1)", self.tol)));
        }
        if self.max_iter == Some(0) {
            return Err(SolveError::Options("max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

fn harmonic_mean(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

fn check_dims(a: &GridMap, b: &GridMap) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(SolveError::DimensionMismatch(format!(
            "{} is {:?} but {} is {:?}",
            a.kind(),
            a.dims(),
            b.kind(),
            b.dims()
        )));
    }
    Ok(())
}

/// Visits each 4-neighbor tile pair once as `(a, b)` with `a < b`.
fn for_each_edge(rows: usize, cols: usize, mut f: impl FnMut(usize, usize)) {
    for r in 0..rows {
        for c in 0..cols {
            let t = r * cols + c;
            if c + 1 < cols {
                f(t, t + 1);
            }
            if r + 1 < rows {
                f(t, t + cols);
            }
        }
    }
}

pub fn build_ir_system(
    power: &GridMap,
    density: &GridMap,
    pads: &PadLayout,
    chip: &ChipSpec,
) -> Result<ConductanceSystem> {
    chip.validate()?;
    check_dims(power, density)?;
    let (rows, cols) = power.dims();
    if pads.dims() != (rows, cols) {
        return Err(SolveError::DimensionMismatch(format!(
            "pad layout is {:?} but power map is {:?}",
            pads.dims(),
            (rows, cols)
        )));
    }
    if pads.pads().is_empty() {
        return Err(SolveError::NoPads);
    }
    if let Some(t) = density.values().iter().position(|&d| d <= 0.0) {
        return Err(SolveError::DisconnectedPdn {
            row: t / cols,
            col: t % cols,
        });
    }
    let mut node_of_tile = vec![None; rows * cols];
    let mut dirichlet = Vec::with_capacity(pads.pads().len());
    for &(r, c) in pads.pads() {
        dirichlet.push((r * cols + c, 0.0));
    }
    let mut n = 0;
    for (t, slot) in node_of_tile.iter_mut().enumerate() {
        if !pads.contains(t / cols, t % cols) {
            *slot = Some(n);
            n += 1;
        }
    }
    if n == 0 {
        // every tile is a pad; nothing to solve
        return Ok(ConductanceSystem {
            rows,
            cols,
            g: CsrMatrix::from_triplets(0, vec![]),
            j: vec![],
            node_of_tile,
            dirichlet,
            reference: Reference::Supply(chip.vdd_volts),
        });
    }
    let d = density.values();
    let mut trip = Vec::with_capacity(5 * n);
    for_each_edge(rows, cols, |a, b| {
        let g = chip.unit_sheet_conductance_s * harmonic_mean(d[a], d[b]);
        match (node_of_tile[a], node_of_tile[b]) {
            (Some(i), Some(k)) => {
                trip.push((i, i, g));
                trip.push((k, k, g));
                trip.push((i, k, -g));
                trip.push((k, i, -g));
            }
            // Pad neighbor at drop 0 folds into the diagonal only.
            (Some(i), None) | (None, Some(i)) => trip.push((i, i, g)),
            (None, None) => {}
        }
    });
    let mut j = vec![0.0; n];
    for (t, node) in node_of_tile.iter().enumerate() {
        if let Some(i) = node {
            j[*i] = power.values()[t] / chip.vdd_volts;
        }
    }
    Ok(ConductanceSystem {
        rows,
        cols,
        g: CsrMatrix::from_triplets(n, trip),
        j,
        node_of_tile,
        dirichlet,
        reference: Reference::Supply(chip.vdd_volts),
    })
}

pub fn build_thermal_system(power: &GridMap, chip: &ChipSpec) -> Result<ConductanceSystem> {
    chip.validate()?;
    let (rows, cols) = power.dims();
    let n = rows * cols;
    let g_lat = chip.lateral_thermal_conductance_w_per_c;
    let mut trip = Vec::with_capacity(5 * n);
    for i in 0..n {
        trip.push((i, i, chip.ambient_thermal_conductance_w_per_c));
    }
    for_each_edge(rows, cols, |a, b| {
        trip.push((a, a, g_lat));
        trip.push((b, b, g_lat));
        trip.push((a, b, -g_lat));
        trip.push((b, a, -g_lat));
    });
    Ok(ConductanceSystem {
        rows,
        cols,
        g: CsrMatrix::from_triplets(n, trip),
        j: power.values().to_vec(),
        node_of_tile: (0..n).map(Some).collect(),
        dirichlet: vec![],
        reference: Reference::Ambient(chip.ambient_c),
    })
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned conjugate gradient from initial guess `x`.
pub fn cg_jacobi(g: &CsrMatrix, b: &[f64], x: &mut [f64], tol: f64, max_iter: usize) -> Result<usize> {
    let n = g.n();
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(0);
    }
    let inv_diag: Vec<f64> = g
        .diagonal()
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            if d > 0.0 {
                Ok(1.0 / d)
            } else {
                Err(SolveError::NotPositiveDefinite(format!("diagonal entry {i} is {d}")))
            }
        })
        .collect::<Result<_>>()?;
    let mut r = g.mul_vec(x);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, d)| a * d).collect();
    let mut p = z.clone();
    let mut q = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut residual = norm2(&r) / bnorm;
    for iter in 0..max_iter {
        if residual <= tol {
            return Ok(iter);
        }
        g.mul_vec_into(&p, &mut q);
        let pq = dot(&p, &q);
        if !(pq > 0.0) {
            return Err(SolveError::NotPositiveDefinite(format!(
                "non-positive curvature {pq:e} at iteration {iter}"
            )));
        }
        let alpha = rz / pq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        residual = norm2(&r) / bnorm;
    }
    if residual <= tol {
        return Ok(max_iter);
    }
    Err(SolveError::NotConverged {
        iterations: max_iter,
        residual,
    })
}

/// Dense Cholesky solve; rejects non-positive pivots.
pub fn dense_cholesky_solve(g: &CsrMatrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = g.n();
    let mut l = g.to_dense();
    for k in 0..n {
        let mut d = l[k * n + k];
        for m in 0..k {
            d -= l[k * n + m] * l[k * n + m];
        }
        if !(d > 0.0) {
            return Err(SolveError::NotPositiveDefinite(format!("pivot {k} is {d:e}")));
        }
        let d = d.sqrt();
        l[k * n + k] = d;
        for i in k + 1..n {
            let mut s = l[i * n + k];
            for m in 0..k {
                s -= l[i * n + m] * l[k * n + m];
            }
            l[i * n + k] = s / d;
        }
    }
    let mut y = b.to_vec();
    for i in 0..n {
        for m in 0..i {
            y[i] -= l[i * n + m] * y[m];
        }
        y[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for m in i + 1..n {
            y[i] -= l[m * n + i] * y[m];
        }
        y[i] /= l[i * n + i];
    }
    Ok(y)
}

fn solve_matrix(g: &CsrMatrix, b: &[f64], guess: Option<&[f64]>, opts: &SolverOptions) -> Result<Vec<f64>> {
    opts.validate()?;
    match opts.method {
        SolverMethod::CgJacobi => {
            let mut x = guess.map_or_else(|| vec![0.0; g.n()], <[f64]>::to_vec);
            let max_iter = opts.max_iter.unwrap_or(20 * g.n().max(1));
            cg_jacobi(g, b, &mut x, opts.tol, max_iter)?;
            Ok(x)
        }
        SolverMethod::DenseDirect => dense_cholesky_solve(g, b),
    }
}

pub fn solve(sys: &ConductanceSystem, opts: &SolverOptions) -> Result<Vec<f64>> {
    solve_matrix(&sys.g, &sys.j, None, opts)
}

pub fn ir_drop_map(
    power: &GridMap,
    density: &GridMap,
    pads: &PadLayout,
    chip: &ChipSpec,
    opts: &SolverOptions,
) -> Result<GridMap> {
    let sys = build_ir_system(power, density, pads, chip)?;
    let x = solve(&sys, opts)?;
    // Exact solution is nonnegative (inverse M-matrix); clamp solver round-off.
    let drops: Vec<f64> = sys.scatter(&x).into_iter().map(|d| d.max(0.0)).collect();
    if let Some(t) = drops.iter().position(|&d| d >= chip.vdd_volts) {
        return Err(SolveError::ExcessiveDrop {
            tile: t,
            drop: drops[t],
            vdd: chip.vdd_volts,
        });
    }
    Ok(power.with_values(GridKind::IrDrop, drops)?)
}

pub fn temperature_map(power: &GridMap, chip: &ChipSpec, opts: &SolverOptions) -> Result<GridMap> {
    let sys = build_thermal_system(power, chip)?;
    let x = solve(&sys, opts)?;
    Ok(power.with_values(GridKind::Temperature, sys.tile_values(&x))?)
}

/// Backward-Euler transient: `(C/dt I + K) T_{k+1} = C/dt T_k + P_{k+1}` from ambient.
///
/// Output frame `k` is the temperature at the end of the step driven by input frame `k`.
pub fn solve_transient_thermal(
    seq: &GridSequence,
    chip: &ChipSpec,
    opts: &SolverOptions,
) -> Result<GridSequence> {
    let first = &seq.frames()[0];
    let k = build_thermal_system(first, chip)?;
    let c_over_dt = chip.thermal_capacitance_j_per_c / seq.dt_seconds();
    let a = k.g.shifted(c_over_dt);
    let mut rise = vec![0.0; k.n()];
    let mut out = Vec::with_capacity(seq.len());
    for frame in seq.frames() {
        let rhs: Vec<f64> = rise
            .iter()
            .zip(frame.values())
            .map(|(t, p)| c_over_dt * t + p)
            .collect();
        rise = solve_matrix(&a, &rhs, Some(&rise), opts)?;
        out.push(frame.with_values(GridKind::Temperature, k.tile_values(&rise))?);
    }
    Ok(GridSequence::new(out, seq.dt_seconds())?)
}
