//! The energy `F[rho, B] = int |B|^2 / (2 rho)`, its dual representation
//! `F = sup { int theta rho + Theta . B : theta + |Theta|^2/2 <= 0 }`, the
//! `rho`-weighted transport metric and the dissipation identity
//! `dF/dt = -int |P|^2 / rho` along the flow.
//!
//! Only the quadratic energy with the `rho`-weighted `L^2` metric is
//! implemented. For a general `F(rho, B)` and metric the same steepest
//! descent argument gives `G = div(B (x) dF/dB - ...)`; for the quadratic
//! case this reduces to `G = div(B (x) B / rho)`, see
//! [`crate::pde::compute_momentum`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::{self, FieldsError, GridFields, PeriodicGrid};
use crate::pde::{self, PdeError};
use crate::trial::{RandomTrialSpec, TrialFields, TrigField};
use crate::vector::{self, Vector, ZERO};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnergyError {
    #[error(transparent)]
    Fields(#[from] FieldsError),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error("negative slack {0} in a dual test pair")]
    NegativeSlack(f64),
    #[error("dual pair violates theta + |Theta|^2/2 <= 0 by {excess} at cell {cell}")]
    Inadmissible { cell: usize, excess: f64 },
    #[error("dual pair has dimension {got}, fields have {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("field lengths do not match the grid")]
    Shape,
}

/// `F = int |B|^2 / (2 rho)` over the support; vacuum flux is an error.
pub fn energy(fields: &GridFields) -> Result<f64, EnergyError> {
    fields.check_vacuum()?;
    Ok(0.5 * fields::flux_ratio_integral(fields))
}

/// An admissible pair `(theta, Theta)` for the dual representation.
#[derive(Clone, Debug, PartialEq)]
pub enum DualTestPair {
    /// Trigonometric `Theta` with `theta = -|Theta|^2/2 - slack`.
    Trig { big_theta: TrigField, slack: f64 },
    /// Cell values on a grid.
    Grid {
        grid: PeriodicGrid,
        theta: Vec<f64>,
        big_theta: Vec<Vec<f64>>,
    },
}

impl DualTestPair {
    pub fn zero(dim: usize) -> Self {
        Self::Trig {
            big_theta: TrigField::zero(dim),
            slack: 0.0,
        }
    }

    pub fn trig(big_theta: TrigField, slack: f64) -> Result<Self, EnergyError> {
        if !(slack >= 0.0) {
            return Err(EnergyError::NegativeSlack(slack));
        }
        big_theta.validate().map_err(|_| EnergyError::Dimension {
            got: big_theta.components.len(),
            expected: big_theta.dim,
        })?;
        Ok(Self::Trig { big_theta, slack })
    }

    /// Random trigonometric `Theta` drawn from `seed`.
    pub fn random(dim: usize, seed: u64, spec: &RandomTrialSpec, slack: f64) -> Result<Self, EnergyError> {
        Self::trig(TrialFields::random(dim, seed, spec).b, slack)
    }

    /// Grid pair, checked pointwise for admissibility.
    pub fn grid(grid: PeriodicGrid, theta: Vec<f64>, big_theta: Vec<Vec<f64>>) -> Result<Self, EnergyError> {
        if big_theta.len() != grid.dim() {
            return Err(EnergyError::Dimension {
                got: big_theta.len(),
                expected: grid.dim(),
            });
        }
        if theta.len() != grid.cells() || big_theta.iter().any(|c| c.len() != grid.cells()) {
            return Err(EnergyError::Shape);
        }
        for (cell, &th) in theta.iter().enumerate() {
            let half_sq: f64 = 0.5 * big_theta.iter().map(|c| c[cell] * c[cell]).sum::<f64>();
            let excess = th + half_sq;
            if excess > 1e-12 * (1.0 + half_sq) {
                return Err(EnergyError::Inadmissible { cell, excess });
            }
        }
        Ok(Self::Grid { grid, theta, big_theta })
    }

    /// `Theta = B / rho`, `theta = -|Theta|^2/2`: attains the supremum.
    pub fn saturating(fields: &GridFields) -> Self {
        let big_theta = fields.reduced_b();
        let theta = (0..fields.grid.cells())
            .map(|c| -0.5 * big_theta.iter().map(|comp| comp[c] * comp[c]).sum::<f64>())
            .collect();
        Self::Grid {
            grid: fields.grid,
            theta,
            big_theta,
        }
    }

    fn at(&self, fields: &GridFields, cell: usize) -> (f64, Vector) {
        match self {
            Self::Trig { big_theta, slack } => {
                let th = big_theta.value(fields.t, &fields.grid.center(cell));
                (-0.5 * vector::norm2(&th) - slack, th)
            }
            Self::Grid { theta, big_theta, .. } => {
                let mut th = ZERO;
                for (k, comp) in big_theta.iter().enumerate() {
                    th[k] = comp[cell];
                }
                (theta[cell], th)
            }
        }
    }

    fn check(&self, fields: &GridFields) -> Result<(), EnergyError> {
        match self {
            Self::Trig { big_theta, slack } => {
                if !(*slack >= 0.0) {
                    return Err(EnergyError::NegativeSlack(*slack));
                }
                if big_theta.dim != fields.dim() {
                    return Err(EnergyError::Dimension {
                        got: big_theta.dim,
                        expected: fields.dim(),
                    });
                }
            }
            Self::Grid { grid, .. } => grid.check_same(&fields.grid)?,
        }
        Ok(())
    }

    /// `int theta rho + Theta . B`.
    pub fn pairing(&self, fields: &GridFields) -> Result<f64, EnergyError> {
        self.check(fields)?;
        let sum: f64 = (0..fields.grid.cells())
            .into_par_iter()
            .map(|c| {
                let (th, big) = self.at(fields, c);
                th * fields.rho[c] + vector::dot(&big, &fields.b_at(c))
            })
            .collect::<Vec<_>>()
            .iter()
            .sum();
        Ok(sum * fields.grid.cell_volume())
    }
}

/// `max` over the pairs of `int theta rho + Theta . B`; `-inf` for no pairs.
pub fn energy_dual_lower_bound(fields: &GridFields, pairs: &[DualTestPair]) -> Result<f64, EnergyError> {
    let mut best = f64::NEG_INFINITY;
    for pair in pairs {
        best = best.max(pair.pairing(fields)?);
    }
    Ok(best)
}

/// Norms of the `rho`-weighted transport metric, over the support.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricNorms {
    /// `(int |v|^2 rho)^{1/2}`.
    pub primal: f64,
    /// `(int |G|^2 / rho)^{1/2}`.
    pub dual: f64,
    /// `int G . v`.
    pub pairing: f64,
}

impl MetricNorms {
    /// `primal^2/2 + dual^2/2 - pairing`, nonnegative by Fenchel.
    pub fn fenchel_slack(&self) -> f64 {
        0.5 * self.primal * self.primal + 0.5 * self.dual * self.dual - self.pairing
    }
}

/// All three integrals run over cells with `rho` above the floor.
pub fn metric_norms(
    grid: &PeriodicGrid,
    v: &[Vec<f64>],
    g: &[Vec<f64>],
    rho: &[f64],
) -> Result<MetricNorms, EnergyError> {
    let dim = grid.dim();
    let cells = grid.cells();
    if v.len() != dim || g.len() != dim {
        return Err(EnergyError::Dimension {
            got: v.len().max(g.len()),
            expected: dim,
        });
    }
    if rho.len() != cells || v.iter().chain(g).any(|c| c.len() != cells) {
        return Err(EnergyError::Shape);
    }
    let floor = fields::RHO_FLOOR_REL * rho.iter().copied().fold(0.0, f64::max);
    let (mut p2, mut d2, mut pair) = (0.0, 0.0, 0.0);
    for c in 0..cells {
        if rho[c] <= floor {
            continue;
        }
        let (mut vv, mut gg, mut gv) = (0.0, 0.0, 0.0);
        for k in 0..dim {
            vv += v[k][c] * v[k][c];
            gg += g[k][c] * g[k][c];
            gv += g[k][c] * v[k][c];
        }
        p2 += vv * rho[c];
        d2 += gg / rho[c];
        pair += gv;
    }
    let vol = grid.cell_volume();
    Ok(MetricNorms {
        primal: (p2 * vol).sqrt(),
        dual: (d2 * vol).sqrt(),
        pairing: pair * vol,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DissipationPoint {
    pub t: f64,
    /// Centred difference of `F`.
    pub df_dt: f64,
    /// `int |P|^2 / rho`.
    pub dissipation: f64,
    /// `|dF/dt + dissipation|`.
    pub residual: f64,
}

impl DissipationPoint {
    /// Residual relative to the dissipation (absolute if it vanishes).
    pub fn relative(&self) -> f64 {
        if self.dissipation > 0.0 {
            self.residual / self.dissipation
        } else {
            self.residual
        }
    }
}

/// `dF/dt + int |P|^2/rho` at every interior snapshot.
pub fn dissipation_identity(trajectory: &[GridFields]) -> Result<Vec<DissipationPoint>, EnergyError> {
    if trajectory.len() < 3 {
        return Err(PdeError::TooFewSnapshots(trajectory.len()).into());
    }
    for f in trajectory {
        trajectory[0].grid.check_same(&f.grid)?;
    }
    let dt = pde::uniform_step(trajectory)?;
    let energies: Vec<f64> = trajectory.iter().map(energy).collect::<Result<_, _>>()?;
    Ok(trajectory
        .windows(3)
        .enumerate()
        .map(|(k, w)| {
            let cur = &w[1];
            let df_dt = (energies[k + 2] - energies[k]) / (2.0 * dt);
            let floor = cur.rho_floor();
            let dissipation = (0..cur.grid.cells())
                .filter(|&c| cur.rho[c] > floor)
                .map(|c| vector::norm2(&cur.p_at(c)) / cur.rho[c])
                .sum::<f64>()
                * cur.grid.cell_volume();
            DissipationPoint {
                t: cur.t,
                df_dt,
                dissipation,
                residual: (df_dt + dissipation).abs(),
            }
        })
        .collect())
}
