//! Periodic grid on `T^d` and the Eulerian triple `(rho, B, P)`.
//!
//! Loop ensembles are turned into grid fields by depositing every sample
//! `X(s_m)` with a mollifying kernel:
//!
//! ```text
//! rho(x) = sum_a w_a / M sum_m K(x - X_m)
//! B(x)   = sum_a w_a / M sum_m K(x - X_m) X_s(s_m)
//! P(x)   = sum_a w_a / M sum_m K(x - X_m) X_t(s_m)
//! ```
//!
//! The kernel is a tensor product of 1-D weights that are renormalised per
//! sample to sum to one, so total mass and circulation are exact up to
//! rounding whatever the kernel width.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loops::{LoopEnsemble, LoopSamples};
use crate::vector::{self, Vector, MAX_DIM, ZERO};

/// Cells with `rho <= RHO_FLOOR_REL * max(rho)` are treated as vacuum.
pub const RHO_FLOOR_REL: f64 = 1e-10;

/// A vacuum cell may carry `|B|` up to this fraction of `max(rho)`.
pub const VACUUM_FLUX_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldsError {
    #[error("grid dimension must be between 1 and {MAX_DIM}, got {0}")]
    Dimension(usize),
    #[error("grid resolution must be at least 8, got {0}")]
    Resolution(usize),
    #[error("kernel width {0} is not usable (bspline needs >= 0.75, gaussian >= 0.5 grid units)")]
    KernelWidth(f64),
    #[error("kernel footprint of {footprint} cells does not fit a periodic axis of {n} cells")]
    KernelTooWide { footprint: usize, n: usize },
    #[error("ensemble dimension {ensemble} does not match grid dimension {grid}")]
    DimensionMismatch { ensemble: usize, grid: usize },
    #[error("{samples} samples per loop are too few: need at least {required}")]
    TooFewSamples { samples: usize, required: usize },
    #[error("kernel weight is not finite (loop sample escaped the numeric range)")]
    NonFiniteWeight,
    #[error("grids differ: {0}")]
    GridMismatch(String),
    #[error("vacuum cell {cell} carries |B| = {flux} (rho = {rho})")]
    VacuumFlux { cell: usize, flux: f64, rho: f64 },
    #[error(transparent)]
    Loop(#[from] crate::loops::LoopError),
}

/// Uniform periodic grid with `n` cells per axis, spacing `h = 1/n`, cell
/// centres at `(i + 1/2) h`. Cells are numbered row-major (last axis fastest).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PeriodicGrid {
    dim: usize,
    n: usize,
}

impl PeriodicGrid {
    pub fn new(dim: usize, n: usize) -> Result<Self, FieldsError> {
        if dim == 0 || dim > MAX_DIM {
            return Err(FieldsError::Dimension(dim));
        }
        if n < 8 {
            return Err(FieldsError::Resolution(n));
        }
        Ok(Self { dim, n })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.h().powi(self.dim as i32)
    }

    pub fn cells(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.n.pow((self.dim - 1 - axis) as u32)
    }

    pub fn unravel(&self, idx: usize) -> [usize; MAX_DIM] {
        let mut out = [0; MAX_DIM];
        let mut rem = idx;
        for axis in (0..self.dim).rev() {
            out[axis] = rem % self.n;
            rem /= self.n;
        }
        out
    }

    pub fn ravel(&self, multi: &[usize; MAX_DIM]) -> usize {
        (0..self.dim).fold(0, |acc, axis| acc * self.n + multi[axis])
    }

    pub fn center(&self, idx: usize) -> Vector {
        let m = self.unravel(idx);
        let h = self.h();
        let mut x = ZERO;
        for axis in 0..self.dim {
            x[axis] = (m[axis] as f64 + 0.5) * h;
        }
        x
    }

    /// Periodic neighbour `offset` cells away along `axis`.
    #[inline]
    pub fn neighbor(&self, idx: usize, axis: usize, offset: isize) -> usize {
        let stride = self.stride(axis);
        let i = (idx / stride) % self.n;
        let j = (i as isize + offset).rem_euclid(self.n as isize) as usize;
        idx + j * stride - i * stride
    }

    pub fn check_same(&self, other: &PeriodicGrid) -> Result<(), FieldsError> {
        if self != other {
            return Err(FieldsError::GridMismatch(format!(
                "d={} n={} vs d={} n={}",
                self.dim, self.n, other.dim, other.n
            )));
        }
        Ok(())
    }

    /// Central difference of a scalar field along `axis`.
    #[inline]
    pub fn central_diff(&self, f: &[f64], idx: usize, axis: usize) -> f64 {
        (f[self.neighbor(idx, axis, 1)] - f[self.neighbor(idx, axis, -1)]) * 0.5 * self.n as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    /// Quadratic B-spline; `sigma` is the half-support (1.5 = standard
    /// three-cell spline).
    #[serde(alias = "bspline")]
    QuadraticBSpline,
    /// Periodic Gaussian with standard deviation `sigma`, truncated at `4 sigma`.
    Gaussian,
}

/// Mollifier for the delta measures along loops. `sigma` is in grid units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepositionKernel {
    pub kind: KernelKind,
    pub sigma: f64,
}

impl Default for DepositionKernel {
    fn default() -> Self {
        Self {
            kind: KernelKind::QuadraticBSpline,
            sigma: 1.5,
        }
    }
}

fn quadratic_bspline(r: f64) -> f64 {
    let a = r.abs();
    if a < 0.5 {
        0.75 - a * a
    } else if a < 1.5 {
        let t = 1.5 - a;
        0.5 * t * t
    } else {
        0.0
    }
}

impl DepositionKernel {
    pub fn bspline(sigma: f64) -> Self {
        Self {
            kind: KernelKind::QuadraticBSpline,
            sigma,
        }
    }

    pub fn gaussian(sigma: f64) -> Self {
        Self {
            kind: KernelKind::Gaussian,
            sigma,
        }
    }

    /// Support (or truncation) radius in grid units.
    pub fn radius(&self) -> f64 {
        match self.kind {
            KernelKind::QuadraticBSpline => self.sigma,
            KernelKind::Gaussian => 4.0 * self.sigma,
        }
    }

    /// Physical width `sigma * h`.
    pub fn physical_sigma(&self, grid: &PeriodicGrid) -> f64 {
        self.sigma * grid.h()
    }

    pub fn validate(&self, grid: &PeriodicGrid) -> Result<(), FieldsError> {
        let min = match self.kind {
            KernelKind::QuadraticBSpline => 0.75,
            KernelKind::Gaussian => 0.5,
        };
        if !self.sigma.is_finite() || self.sigma < min {
            return Err(FieldsError::KernelWidth(self.sigma));
        }
        let footprint = 2 * self.radius().ceil() as usize + 1;
        if footprint > grid.n() {
            return Err(FieldsError::KernelTooWide { footprint, n: grid.n() });
        }
        Ok(())
    }

    fn profile(&self, r: f64) -> f64 {
        match self.kind {
            KernelKind::QuadraticBSpline => {
                let ell = self.sigma / 1.5;
                quadratic_bspline(r / ell)
            }
            KernelKind::Gaussian => {
                if r.abs() > 4.0 * self.sigma {
                    0.0
                } else {
                    (-0.5 * r * r / (self.sigma * self.sigma)).exp()
                }
            }
        }
    }

    /// Normalised 1-D weights for a point at physical coordinate `y` on an
    /// axis of `n` cells. Returns `false` if a weight is not finite.
    pub fn weights_1d(&self, y: f64, n: usize, out: &mut Vec<(usize, f64)>) -> bool {
        out.clear();
        let u = y * n as f64 - 0.5;
        let r = self.radius();
        let lo = (u - r).ceil() as i64;
        let hi = (u + r).floor() as i64;
        let mut total = 0.0;
        for i in lo..=hi {
            let w = self.profile(i as f64 - u);
            if w > 0.0 {
                out.push((i.rem_euclid(n as i64) as usize, w));
                total += w;
            }
        }
        if !(total > 0.0) || !total.is_finite() {
            return false;
        }
        for (_, w) in out.iter_mut() {
            *w /= total;
        }
        true
    }
}

/// `(rho, B, P)` on a periodic grid at time `t`. Vector fields are stored
/// component-major: `b[i][cell]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFields {
    pub grid: PeriodicGrid,
    pub t: f64,
    pub rho: Vec<f64>,
    pub b: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
}

impl GridFields {
    pub fn zeros(grid: PeriodicGrid, t: f64) -> Self {
        let cells = grid.cells();
        Self {
            grid,
            t,
            rho: vec![0.0; cells],
            b: vec![vec![0.0; cells]; grid.dim()],
            p: vec![vec![0.0; cells]; grid.dim()],
        }
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn b_at(&self, idx: usize) -> Vector {
        let mut v = ZERO;
        for (k, c) in self.b.iter().enumerate() {
            v[k] = c[idx];
        }
        v
    }

    pub fn p_at(&self, idx: usize) -> Vector {
        let mut v = ZERO;
        for (k, c) in self.p.iter().enumerate() {
            v[k] = c[idx];
        }
        v
    }

    pub fn max_rho(&self) -> f64 {
        self.rho.iter().copied().fold(0.0, f64::max)
    }

    /// `RHO_FLOOR_REL * max(rho)`.
    pub fn rho_floor(&self) -> f64 {
        RHO_FLOOR_REL * self.max_rho()
    }

    /// Indices of cells with `rho` above the floor.
    pub fn support(&self) -> Vec<usize> {
        let floor = self.rho_floor();
        (0..self.rho.len()).filter(|&i| self.rho[i] > floor).collect()
    }

    /// `int rho`.
    pub fn mass(&self) -> f64 {
        self.rho.iter().sum::<f64>() * self.grid.cell_volume()
    }

    /// `int B`.
    pub fn circulation(&self) -> Vector {
        let mut c = ZERO;
        let vol = self.grid.cell_volume();
        for (k, comp) in self.b.iter().enumerate() {
            c[k] = comp.iter().sum::<f64>() * vol;
        }
        c
    }

    /// Fails if a vacuum cell carries a non-negligible `B`.
    pub fn check_vacuum(&self) -> Result<(), FieldsError> {
        let floor = self.rho_floor();
        let tol = VACUUM_FLUX_TOL * self.max_rho();
        for i in 0..self.rho.len() {
            if self.rho[i] <= floor {
                let flux = vector::norm2(&self.b_at(i)).sqrt();
                if flux > tol {
                    return Err(FieldsError::VacuumFlux {
                        cell: i,
                        flux,
                        rho: self.rho[i],
                    });
                }
            }
        }
        Ok(())
    }

    /// `self += weight * other`.
    pub fn add_scaled(&mut self, other: &GridFields, weight: f64) -> Result<(), FieldsError> {
        self.grid.check_same(&other.grid)?;
        for (a, b) in self.rho.iter_mut().zip(&other.rho) {
            *a += weight * b;
        }
        for (ca, cb) in self.b.iter_mut().zip(&other.b) {
            for (a, b) in ca.iter_mut().zip(cb) {
                *a += weight * b;
            }
        }
        for (ca, cb) in self.p.iter_mut().zip(&other.p) {
            for (a, b) in ca.iter_mut().zip(cb) {
                *a += weight * b;
            }
        }
        Ok(())
    }

    /// Reduced field `b = B / rho` on the support, zero in vacuum.
    pub fn reduced_b(&self) -> Vec<Vec<f64>> {
        let floor = self.rho_floor();
        self.b
            .iter()
            .map(|comp| {
                comp.iter()
                    .zip(&self.rho)
                    .map(|(&bi, &r)| if r > floor { bi / r } else { 0.0 })
                    .collect()
            })
            .collect()
    }
}

/// Deposits pre-sampled loops `(samples, weight)` onto the grid.
pub fn deposit_samples(
    sampled: &[(&LoopSamples, f64)],
    t: f64,
    grid: PeriodicGrid,
    kernel: &DepositionKernel,
) -> Result<GridFields, FieldsError> {
    kernel.validate(&grid)?;
    let partial: Vec<GridFields> = sampled
        .par_iter()
        .map(|(s, w)| deposit_one(s, *w, t, grid, kernel))
        .collect::<Result<_, _>>()?;
    // fixed summation order keeps the result independent of the thread count
    let mut out = GridFields::zeros(grid, t);
    for part in &partial {
        out.add_scaled(part, 1.0)?;
    }
    Ok(out)
}

fn deposit_one(
    samples: &LoopSamples,
    weight: f64,
    t: f64,
    grid: PeriodicGrid,
    kernel: &DepositionKernel,
) -> Result<GridFields, FieldsError> {
    let dim = grid.dim();
    if samples.dim != dim {
        return Err(FieldsError::DimensionMismatch {
            ensemble: samples.dim,
            grid: dim,
        });
    }
    let mut out = GridFields::zeros(grid, t);
    let per_sample = weight / samples.len() as f64 / grid.cell_volume();
    let mut axis_weights: Vec<Vec<(usize, f64)>> = vec![Vec::new(); dim];
    for m in 0..samples.len() {
        let x = samples.torus_position(m);
        for axis in 0..dim {
            if !x[axis].is_finite() || !kernel.weights_1d(x[axis], grid.n(), &mut axis_weights[axis]) {
                return Err(FieldsError::NonFiniteWeight);
            }
        }
        let tangent = samples.tangents[m];
        let velocity = samples.velocities[m];
        let mut visit = |idx: usize, w: f64| {
            let kw = per_sample * w;
            out.rho[idx] += kw;
            for k in 0..dim {
                out.b[k][idx] += kw * tangent[k];
                out.p[k][idx] += kw * velocity[k];
            }
        };
        match dim {
            1 => {
                for &(i, wi) in &axis_weights[0] {
                    visit(i, wi);
                }
            }
            2 => {
                let n = grid.n();
                for &(i, wi) in &axis_weights[0] {
                    for &(j, wj) in &axis_weights[1] {
                        visit(i * n + j, wi * wj);
                    }
                }
            }
            _ => {
                let n = grid.n();
                for &(i, wi) in &axis_weights[0] {
                    for &(j, wj) in &axis_weights[1] {
                        for &(k, wk) in &axis_weights[2] {
                            visit((i * n + j) * n + k, wi * wj * wk);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Minimum samples per loop for deposition: `max(4K + 4, 4n)`.
pub fn required_samples(max_mode: u32, grid: &PeriodicGrid) -> usize {
    (4 * max_mode as usize + 4).max(4 * grid.n())
}

/// Evolves the ensemble exactly to time `t` and deposits it.
pub fn deposit(
    ensemble: &LoopEnsemble,
    t: f64,
    grid: PeriodicGrid,
    kernel: &DepositionKernel,
    samples: usize,
) -> Result<GridFields, FieldsError> {
    if ensemble.dim() != grid.dim() {
        return Err(FieldsError::DimensionMismatch {
            ensemble: ensemble.dim(),
            grid: grid.dim(),
        });
    }
    let required = required_samples(ensemble.max_mode(), &grid);
    if samples < required {
        return Err(FieldsError::TooFewSamples { samples, required });
    }
    let sampled: Vec<LoopSamples> = ensemble
        .loops()
        .par_iter()
        .map(|l| l.evolve_exact(t).sample(samples))
        .collect::<Result<_, _>>()?;
    let pairs: Vec<(&LoopSamples, f64)> = sampled.iter().zip(ensemble.weights().iter().copied()).collect();
    deposit_samples(&pairs, t, grid, kernel)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceResidual {
    /// `max |div_h B|`.
    pub raw: f64,
    /// `raw / max |B|` (zero when `B` vanishes).
    pub relative: f64,
}

/// Central-difference divergence of `B`, as a max-norm.
pub fn divergence_residual(fields: &GridFields) -> DivergenceResidual {
    let grid = fields.grid;
    let raw = (0..grid.cells())
        .into_par_iter()
        .map(|idx| {
            let div: f64 = (0..grid.dim())
                .map(|axis| grid.central_diff(&fields.b[axis], idx, axis))
                .sum();
            div.abs()
        })
        .reduce(|| 0.0, f64::max);
    let max_b = (0..grid.cells())
        .map(|i| vector::norm2(&fields.b_at(i)).sqrt())
        .fold(0.0, f64::max);
    DivergenceResidual {
        raw,
        relative: if max_b > 0.0 { raw / max_b } else { 0.0 },
    }
}

/// The two sides of `int |B|^2 / rho <= sum_a w_a int |X_s|^2 ds`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CauchySchwarzGap {
    pub lhs: f64,
    pub rhs: f64,
}

impl CauchySchwarzGap {
    pub fn gap(&self) -> f64 {
        self.rhs - self.lhs
    }
}

/// `int |B|^2/rho` over the support of `fields` against the spectral value
/// of `sum_a w_a int |X_s(t)|^2 ds`.
pub fn cauchy_schwarz_gap(ensemble: &LoopEnsemble, fields: &GridFields, t: f64) -> CauchySchwarzGap {
    CauchySchwarzGap {
        lhs: flux_ratio_integral(fields),
        rhs: 2.0 * ensemble.evolve_exact(t).energy(),
    }
}

/// `int |B|^2 / rho` with the vacuum convention.
pub fn flux_ratio_integral(fields: &GridFields) -> f64 {
    let floor = fields.rho_floor();
    let sum: f64 = (0..fields.rho.len())
        .filter(|&i| fields.rho[i] > floor)
        .map(|i| vector::norm2(&fields.b_at(i)) / fields.rho[i])
        .sum();
    sum * fields.grid.cell_volume()
}
