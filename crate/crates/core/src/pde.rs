//! Explicit grid solvers for the non-conservative system
//! `d_t b^i = b^j b^k d_jk b^i` and its companion continuity equation,
//! plus the momentum operator and residuals of the conservative form.
//!
//! The system is degenerate: there is no diffusion transverse to `b`. An
//! optional `nu * Laplacian(b)` term exists for stability studies and is
//! off by default.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::{FieldsError, GridFields, PeriodicGrid};
use crate::vector::{Vector, MAX_DIM, ZERO};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PdeError {
    #[error("time step {dt} exceeds the stability bound {bound}")]
    Unstable { dt: f64, bound: f64 },
    #[error("time step {dt} violates the upwind CFL bound {bound} for the density")]
    Cfl { dt: f64, bound: f64 },
    #[error("non-finite values after stepping to t = {t}")]
    Blowup { t: f64 },
    #[error("state has {got} components on a {expected}-dimensional grid")]
    Components { got: usize, expected: usize },
    #[error("negative density {value} in cell {cell}")]
    NegativeDensity { cell: usize, value: f64 },
    #[error("need at least 3 snapshots, got {0}")]
    TooFewSnapshots(usize),
    #[error("snapshot times are not uniformly spaced")]
    NonUniformTimes,
    #[error("operation needs a density field")]
    MissingDensity,
    #[error(transparent)]
    Fields(#[from] FieldsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdeConfig {
    /// Coefficient of the optional `nu * Laplacian(b)` regularisation.
    pub viscosity: f64,
}

impl Default for PdeConfig {
    fn default() -> Self {
        Self { viscosity: 0.0 }
    }
}

/// Reduced field `b = B / rho` with an optional companion density.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedState {
    pub grid: PeriodicGrid,
    pub t: f64,
    pub b: Vec<Vec<f64>>,
    pub rho: Option<Vec<f64>>,
}

impl ReducedState {
    pub fn new(grid: PeriodicGrid, t: f64, b: Vec<Vec<f64>>, rho: Option<Vec<f64>>) -> Result<Self, PdeError> {
        if b.len() != grid.dim() || b.iter().any(|c| c.len() != grid.cells()) {
            return Err(PdeError::Components {
                got: b.len(),
                expected: grid.dim(),
            });
        }
        if let Some(r) = &rho {
            if r.len() != grid.cells() {
                return Err(PdeError::Components {
                    got: r.len(),
                    expected: grid.cells(),
                });
            }
            if let Some((cell, &value)) = r.iter().enumerate().find(|(_, v)| **v < 0.0) {
                return Err(PdeError::NegativeDensity { cell, value });
            }
        }
        Ok(Self { grid, t, b, rho })
    }

    /// Samples `b(x)` (and optionally `rho(x)`) at the cell centres.
    pub fn from_fn(
        grid: PeriodicGrid,
        t: f64,
        b: impl Fn(&Vector) -> Vector,
        rho: Option<&dyn Fn(&Vector) -> f64>,
    ) -> Result<Self, PdeError> {
        let dim = grid.dim();
        let mut comps = vec![vec![0.0; grid.cells()]; dim];
        for idx in 0..grid.cells() {
            let v = b(&grid.center(idx));
            for k in 0..dim {
                comps[k][idx] = v[k];
            }
        }
        let rho = rho.map(|f| (0..grid.cells()).map(|i| f(&grid.center(i))).collect());
        Self::new(grid, t, comps, rho)
    }

    /// `b = B / rho` and `rho` from grid fields (vacuum cells get `b = 0`).
    pub fn from_fields(fields: &GridFields) -> Self {
        Self {
            grid: fields.grid,
            t: fields.t,
            b: fields.reduced_b(),
            rho: Some(fields.rho.clone()),
        }
    }

    pub fn b_at(&self, idx: usize) -> Vector {
        let mut v = ZERO;
        for (k, c) in self.b.iter().enumerate() {
            v[k] = c[idx];
        }
        v
    }

    pub fn max_b2(&self) -> f64 {
        (0..self.grid.cells())
            .map(|i| self.b.iter().map(|c| c[i] * c[i]).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// `dt <= h^2 / (2 d (max|b|^2 + nu))`.
    pub fn stable_dt(&self, config: &PdeConfig) -> f64 {
        let h = self.grid.h();
        let denom = 2.0 * self.grid.dim() as f64 * (self.max_b2() + config.viscosity);
        if denom > 0.0 {
            h * h / denom
        } else {
            f64::INFINITY
        }
    }

    /// Velocity `v = (b . grad) b`.
    pub fn velocity(&self) -> Vec<Vec<f64>> {
        convective_velocity(&self.grid, &self.b)
    }

    /// `(rho, B = rho b, P = rho v)`; requires the density.
    pub fn to_fields(&self) -> Result<GridFields, PdeError> {
        let rho = self.rho.as_ref().ok_or(PdeError::MissingDensity)?;
        let v = self.velocity();
        let mut out = GridFields::zeros(self.grid, self.t);
        out.rho.clone_from(rho);
        for k in 0..self.grid.dim() {
            for i in 0..self.grid.cells() {
                out.b[k][i] = rho[i] * self.b[k][i];
                out.p[k][i] = rho[i] * v[k][i];
            }
        }
        Ok(out)
    }
}

/// `v^i = b^j d_j b^i` with central differences.
pub fn convective_velocity(grid: &PeriodicGrid, b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = grid.dim();
    (0..dim)
        .map(|i| {
            (0..grid.cells())
                .into_par_iter()
                .map(|idx| (0..dim).map(|j| b[j][idx] * grid.central_diff(&b[i], idx, j)).sum())
                .collect()
        })
        .collect()
}

#[inline]
fn second_diff(grid: &PeriodicGrid, f: &[f64], idx: usize, j: usize, k: usize) -> f64 {
    let inv_h2 = (grid.n() * grid.n()) as f64;
    if j == k {
        let p = grid.neighbor(idx, j, 1);
        let m = grid.neighbor(idx, j, -1);
        (f[p] - 2.0 * f[idx] + f[m]) * inv_h2
    } else {
        let jp = grid.neighbor(idx, j, 1);
        let jm = grid.neighbor(idx, j, -1);
        let pp = grid.neighbor(jp, k, 1);
        let pm = grid.neighbor(jp, k, -1);
        let mp = grid.neighbor(jm, k, 1);
        let mm = grid.neighbor(jm, k, -1);
        (f[pp] - f[pm] - f[mp] + f[mm]) * 0.25 * inv_h2
    }
}

/// One explicit Euler step of `d_t b^i = b^j b^k d_jk b^i (+ nu Lap b^i)`.
///
/// A density, if present, is advanced by first-order upwind fluxes with
/// face velocities averaged from `v = (b . grad) b`.
pub fn step_nonconservative(state: &ReducedState, dt: f64, config: &PdeConfig) -> Result<ReducedState, PdeError> {
    let grid = state.grid;
    let dim = grid.dim();
    let bound = state.stable_dt(config);
    if !(dt >= 0.0) || dt > bound * (1.0 + 1e-12) {
        return Err(PdeError::Unstable { dt, bound });
    }
    let nu = config.viscosity;
    let b = &state.b;
    let new_b: Vec<Vec<f64>> = (0..dim)
        .map(|i| {
            (0..grid.cells())
                .into_par_iter()
                .map(|idx| {
                    let mut rhs = 0.0;
                    for j in 0..dim {
                        for k in 0..dim {
                            rhs += b[j][idx] * b[k][idx] * second_diff(&grid, &b[i], idx, j, k);
                        }
                        if nu != 0.0 {
                            rhs += nu * second_diff(&grid, &b[i], idx, j, j);
                        }
                    }
                    b[i][idx] + dt * rhs
                })
                .collect()
        })
        .collect();

    let new_rho = match &state.rho {
        None => None,
        Some(rho) => {
            let v = state.velocity();
            let h = grid.h();
            let max_v: f64 = (0..dim).map(|j| v[j].iter().fold(0.0f64, |m, x| m.max(x.abs()))).sum();
            if max_v > 0.0 && dt * max_v > h * (1.0 + 1e-12) {
                return Err(PdeError::Cfl { dt, bound: h / max_v });
            }
            // flux through the face between idx and idx + e_j
            let face_flux = |idx: usize, j: usize| -> f64 {
                let nb = grid.neighbor(idx, j, 1);
                let vf = 0.5 * (v[j][idx] + v[j][nb]);
                if vf > 0.0 {
                    vf * rho[idx]
                } else {
                    vf * rho[nb]
                }
            };
            Some(
                (0..grid.cells())
                    .into_par_iter()
                    .map(|idx| {
                        let div: f64 = (0..dim)
                            .map(|j| face_flux(idx, j) - face_flux(grid.neighbor(idx, j, -1), j))
                            .sum();
                        rho[idx] - dt / h * div
                    })
                    .collect(),
            )
        }
    };

    let t = state.t + dt;
    let finite = new_b.iter().flatten().all(|x| x.is_finite())
        && new_rho
            .as_ref()
            .is_none_or(|r: &Vec<f64>| r.iter().all(|x| x.is_finite()));
    if !finite {
        return Err(PdeError::Blowup { t });
    }
    Ok(ReducedState {
        grid,
        t,
        b: new_b,
        rho: new_rho,
    })
}

/// Advances by `duration` in equal sub-steps of at most `safety * stable_dt`.
pub fn advance(state: &ReducedState, duration: f64, config: &PdeConfig, safety: f64) -> Result<ReducedState, PdeError> {
    if duration <= 0.0 {
        return Ok(state.clone());
    }
    let limit = safety * state.stable_dt(config);
    let steps = if limit.is_finite() {
        (duration / limit).ceil().max(1.0) as usize
    } else {
        1
    };
    let dt = duration / steps as f64;
    let t_end = state.t + duration;
    let mut cur = state.clone();
    for _ in 0..steps {
        cur = step_nonconservative(&cur, dt, config)?;
    }
    cur.t = t_end;
    Ok(cur)
}

/// `P^i = d_j (B^i B^j / rho)` by central differences; the tensor is zero
/// on vacuum cells. Along the flow this is also the steepest-descent field.
pub fn compute_momentum(grid: &PeriodicGrid, rho: &[f64], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = grid.dim();
    let floor = crate::fields::RHO_FLOOR_REL * rho.iter().copied().fold(0.0, f64::max);
    let tensor: Vec<Vec<Vec<f64>>> = (0..dim)
        .map(|i| {
            (0..dim)
                .map(|j| {
                    (0..grid.cells())
                        .map(|c| {
                            if rho[c] > floor {
                                b[i][c] * b[j][c] / rho[c]
                            } else {
                                0.0
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    (0..dim)
        .map(|i| {
            (0..grid.cells())
                .into_par_iter()
                .map(|idx| (0..dim).map(|j| grid.central_diff(&tensor[i][j], idx, j)).sum())
                .collect()
        })
        .collect()
}

/// Max-norm residuals of the conservative system.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConservativeResidual {
    pub t: f64,
    /// `d_t B + div((B (x) P - P (x) B) / rho)`.
    pub induction: f64,
    /// `d_t rho + div P`.
    pub continuity: f64,
}

/// Residual series at every interior snapshot (centred time differences).
pub fn conservative_residual_series(trajectory: &[GridFields]) -> Result<Vec<ConservativeResidual>, PdeError> {
    if trajectory.len() < 3 {
        return Err(PdeError::TooFewSnapshots(trajectory.len()));
    }
    let grid = trajectory[0].grid;
    for f in trajectory {
        grid.check_same(&f.grid)?;
    }
    let dt = uniform_step(trajectory)?;
    let dim = grid.dim();
    let mut out = Vec::with_capacity(trajectory.len() - 2);
    for w in trajectory.windows(3) {
        let (prev, cur, next) = (&w[0], &w[1], &w[2]);
        let floor = cur.rho_floor();
        // F^{ij} = (B^i P^j - P^i B^j) / rho
        let flux: Vec<Vec<Vec<f64>>> = (0..dim)
            .map(|i| {
                (0..dim)
                    .map(|j| {
                        (0..grid.cells())
                            .map(|c| {
                                if cur.rho[c] > floor {
                                    (cur.b[i][c] * cur.p[j][c] - cur.p[i][c] * cur.b[j][c]) / cur.rho[c]
                                } else {
                                    0.0
                                }
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let (induction, continuity) = (0..grid.cells())
            .into_par_iter()
            .map(|idx| {
                let mut ind: f64 = 0.0;
                for i in 0..dim {
                    let dbdt = (next.b[i][idx] - prev.b[i][idx]) / (2.0 * dt);
                    let div: f64 = (0..dim).map(|j| grid.central_diff(&flux[i][j], idx, j)).sum();
                    ind = ind.max((dbdt + div).abs());
                }
                let drdt = (next.rho[idx] - prev.rho[idx]) / (2.0 * dt);
                let divp: f64 = (0..dim).map(|j| grid.central_diff(&cur.p[j], idx, j)).sum();
                (ind, (drdt + divp).abs())
            })
            .reduce(|| (0.0, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1)));
        out.push(ConservativeResidual {
            t: cur.t,
            induction,
            continuity,
        });
    }
    Ok(out)
}

/// Worst residuals over the whole trajectory.
pub fn conservative_residual(trajectory: &[GridFields]) -> Result<(f64, f64), PdeError> {
    let series = conservative_residual_series(trajectory)?;
    Ok(series
        .iter()
        .fold((0.0, 0.0), |acc, r| (acc.0.max(r.induction), acc.1.max(r.continuity))))
}

/// Common step of a trajectory; errors if the spacing is not uniform.
pub fn uniform_step(trajectory: &[GridFields]) -> Result<f64, PdeError> {
    if trajectory.len() < 2 {
        return Err(PdeError::TooFewSnapshots(trajectory.len()));
    }
    let dt = trajectory[1].t - trajectory[0].t;
    if !(dt > 0.0) {
        return Err(PdeError::NonUniformTimes);
    }
    for w in trajectory.windows(2) {
        if ((w[1].t - w[0].t) - dt).abs() > 1e-9 * dt.max(w[1].t.abs()) {
            return Err(PdeError::NonUniformTimes);
        }
    }
    Ok(dt)
}

/// Max over cells (optionally restricted) of `|a - b|` for vector fields.
pub fn sup_difference(a: &[Vec<f64>], b: &[Vec<f64>], cells: impl Iterator<Item = usize>) -> f64 {
    let mut worst: f64 = 0.0;
    for c in cells {
        for k in 0..a.len().min(MAX_DIM) {
            worst = worst.max((a[k][c] - b[k][c]).abs());
        }
    }
    worst
}
