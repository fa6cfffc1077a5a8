//! Relative entropy against smooth trial fields `(b*, v*)`.
//!
//! Grid side: `E = int |B - rho b*|^2 / (2 rho)`, the dissipation
//! `int U^T Q_r U / (2 rho)` with `U = (B - rho b*, P - rho v*)`, the
//! remainder `R = int rho L1 + B . L2 + P . L3`, and the certifier of
//!
//! ```text
//! E(t) e^{-rt} + int_0^t e^{-rt'} (D_r - R) dt' <= E(0).
//! ```
//!
//! Loop side: the per-loop entropy `int |X_s - b*(X)|^2 / 2 ds` and the
//! identity `dE/dt + int W^T Q W / 2 ds - R = 0`, together with its
//! three-term decomposition.
//!
//! Jacobians follow `grad[i][j] = d_j f_i` throughout.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::{FieldsError, GridFields};
use crate::loops::{LoopEnsemble, LoopError, LoopSamples, WindingLoop};
use crate::pde::{self, PdeError};
use crate::trial::{TrialFields, TrialPoint};
use crate::vector::{self, Matrix, Vector, ZERO};

/// Multiplier applied to the bisection result.
pub const R0_SAFETY_FACTOR: f64 = 1.1;
const R0_CAP: f64 = 1e12;
const R0_REL_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EntropyError {
    #[error("r = {r} is below the certified r0 = {r0}")]
    BelowR0 { r: f64, r0: f64 },
    #[error("no r values given")]
    NoRValues,
    #[error("trial fields have dimension {trial}, data has {data}")]
    Dimension { trial: usize, data: usize },
    #[error("need at least {needed} time points, got {got}")]
    TooFewTimes { needed: usize, got: usize },
    #[error(transparent)]
    Fields(#[from] FieldsError),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Loop(#[from] LoopError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LOperators {
    pub l1: f64,
    pub l2: Vector,
    pub l3: Vector,
}

/// `L1 = |v|^2 + D_t(|b|^2/2) - (b.grad)(b.v)`, `L2 = -D_t b + (b.grad) v`,
/// `L3 = -v + (b.grad) b` with `D_t = d_t + v.grad`.
pub fn l_operators_at(p: &TrialPoint, dim: usize) -> LOperators {
    let (b, v, jb, jv) = (&p.b, &p.v, &p.grad_b, &p.grad_v);
    let mut dtb = ZERO;
    for i in 0..dim {
        dtb[i] = p.db_dt[i] + (0..dim).map(|j| v[j] * jb[i][j]).sum::<f64>();
    }
    let mut l1 = vector::norm2(v) + vector::dot(b, &dtb);
    for i in 0..dim {
        for j in 0..dim {
            l1 -= b[j] * (jb[i][j] * v[i] + b[i] * jv[i][j]);
        }
    }
    let mut l2 = ZERO;
    let mut l3 = ZERO;
    for i in 0..dim {
        let bv: f64 = (0..dim).map(|j| b[j] * jv[i][j]).sum();
        let bb: f64 = (0..dim).map(|j| b[j] * jb[i][j]).sum();
        l2[i] = -dtb[i] + bv;
        l3[i] = -v[i] + bb;
    }
    LOperators { l1, l2, l3 }
}

pub fn l_operators(trial: &TrialFields, t: f64, x: &Vector) -> LOperators {
    l_operators_at(&trial.evaluate(t, x), trial.dim())
}

/// `C_ij = d_j b_i - d_i b_j`.
fn curl_block(grad_b: &Matrix, dim: usize) -> Matrix {
    let mut c = [ZERO; 3];
    for i in 0..dim {
        for j in 0..dim {
            c[i][j] = grad_b[i][j] - grad_b[j][i];
        }
    }
    c
}

/// `S_ij = d_j v_i + d_i v_j`.
fn strain_block(grad_v: &Matrix, dim: usize) -> Matrix {
    let mut s = [ZERO; 3];
    for i in 0..dim {
        for j in 0..dim {
            s[i][j] = grad_v[i][j] + grad_v[j][i];
        }
    }
    s
}

/// `W^T Q_0 W = -w1^T S w1 + 2 w1^T C w2 + 2 |w2|^2`.
fn q0_form(p: &TrialPoint, dim: usize, w1: &Vector, w2: &Vector) -> f64 {
    let s = strain_block(&p.grad_v, dim);
    let c = curl_block(&p.grad_b, dim);
    let mut acc = 2.0 * vector::norm2(w2);
    for i in 0..dim {
        for j in 0..dim {
            acc += -w1[i] * s[i][j] * w1[j] + 2.0 * w1[i] * c[i][j] * w2[j];
        }
    }
    acc
}

/// The symmetric `2d x 2d` matrix
/// `[[-grad v - grad v^T + r I, C], [-C, 2 I]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QMatrix {
    pub dim: usize,
    pub r: f64,
    pub matrix: DMatrix<f64>,
}

impl QMatrix {
    pub fn from_point(p: &TrialPoint, dim: usize, r: f64) -> Self {
        let s = strain_block(&p.grad_v, dim);
        let c = curl_block(&p.grad_b, dim);
        let mut m = DMatrix::zeros(2 * dim, 2 * dim);
        for i in 0..dim {
            for j in 0..dim {
                m[(i, j)] = -s[i][j];
                m[(i, dim + j)] = c[i][j];
                m[(dim + i, j)] = -c[i][j];
            }
            m[(i, i)] += r;
            m[(dim + i, dim + i)] = 2.0;
        }
        Self { dim, r, matrix: m }
    }

    pub fn is_symmetric(&self) -> bool {
        self.matrix == self.matrix.transpose()
    }

    /// Ascending eigenvalues.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.matrix.clone())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    pub fn lambda_min(&self) -> f64 {
        self.eigenvalues()[0]
    }

    /// `(u1, u2)^T Q (u1, u2)`.
    pub fn quadratic_form(&self, u1: &Vector, u2: &Vector) -> f64 {
        let d = self.dim;
        let u = DMatrix::from_fn(2 * d, 1, |k, _| if k < d { u1[k] } else { u2[k - d] });
        (u.transpose() * &self.matrix * &u)[(0, 0)]
    }
}

pub fn q_matrix(trial: &TrialFields, r: f64, t: f64, x: &Vector) -> QMatrix {
    QMatrix::from_point(&trial.evaluate(t, x), trial.dim(), r)
}

/// Tensor-product sample lattice over `[0, T] x T^d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct R0Sampling {
    pub time_samples: usize,
    pub space_per_axis: usize,
}

impl R0Sampling {
    /// `max(16, 8 K)` points per axis for highest wave number `K`, and at
    /// least 11 times (more when the fields vary quickly in `t`).
    pub fn for_trial(trial: &TrialFields, horizon: f64) -> Self {
        let k = trial.max_wave().max(0) as usize;
        let by_rate = (4.0 * horizon * trial.max_rate()).ceil() as usize + 1;
        Self {
            time_samples: by_rate.max(11),
            space_per_axis: (8 * k).max(16),
        }
    }

    fn points(&self, dim: usize, horizon: f64) -> Vec<(f64, Vector)> {
        let nt = self.time_samples.max(1);
        let ns = self.space_per_axis.max(1);
        let cells = ns.pow(dim as u32);
        let mut out = Vec::with_capacity(nt * cells);
        for it in 0..nt {
            let t = if nt == 1 {
                0.0
            } else {
                horizon * it as f64 / (nt - 1) as f64
            };
            for c in 0..cells {
                let mut x = ZERO;
                let mut rest = c;
                for k in (0..dim).rev() {
                    x[k] = (rest % ns) as f64 / ns as f64;
                    rest /= ns;
                }
                out.push((t, x));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct R0Estimate {
    /// Smallest sampled-feasible `r` found by bisection.
    pub bisection: f64,
    pub safety_factor: f64,
    /// `safety_factor * bisection`; the certified `r0`.
    pub value: f64,
    pub time_samples: usize,
    pub space_per_axis: usize,
    pub sample_count: usize,
    /// Bisection hit the upper cap without finding a feasible `r`.
    pub capped: bool,
    /// Sampled `min lambda_min(Q_value)`.
    pub lambda_min_at_value: f64,
}

fn base_matrices(trial: &TrialFields, horizon: f64, sampling: &R0Sampling) -> Vec<QMatrix> {
    let dim = trial.dim();
    sampling
        .points(dim, horizon)
        .into_par_iter()
        .map(|(t, x)| q_matrix(trial, 0.0, t, &x))
        .collect()
}

fn min_lambda(base: &[QMatrix], r: f64) -> f64 {
    base.par_iter()
        .map(|q| {
            let mut m = q.matrix.clone();
            for i in 0..q.dim {
                m[(i, i)] += r;
            }
            SymmetricEigen::new(m).eigenvalues.min()
        })
        .reduce(|| f64::INFINITY, f64::min)
}

/// Sampled `min lambda_min(Q_r)` over `[0, T] x T^d`.
pub fn sampled_lambda_min(trial: &TrialFields, horizon: f64, sampling: &R0Sampling, r: f64) -> f64 {
    min_lambda(&base_matrices(trial, horizon, sampling), r)
}

/// Bisection for the smallest `r` with sampled `lambda_min(Q_r) >= 1`.
pub fn estimate_r0(trial: &TrialFields, horizon: f64, sampling: &R0Sampling) -> R0Estimate {
    let base = base_matrices(trial, horizon, sampling);
    let feasible = |r: f64| min_lambda(&base, r) >= 1.0;
    let mut capped = false;
    let bisection = if feasible(0.0) {
        0.0
    } else {
        let mut lo = 0.0;
        let mut hi = 1.0;
        while !feasible(hi) {
            lo = hi;
            hi *= 2.0;
            if hi > R0_CAP {
                capped = true;
                break;
            }
        }
        if !capped {
            while hi - lo > R0_REL_TOL * hi {
                let mid = 0.5 * (lo + hi);
                if feasible(mid) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
        }
        hi
    };
    let value = R0_SAFETY_FACTOR * bisection;
    R0Estimate {
        bisection,
        safety_factor: R0_SAFETY_FACTOR,
        value,
        time_samples: sampling.time_samples,
        space_per_axis: sampling.space_per_axis,
        sample_count: base.len(),
        capped,
        lambda_min_at_value: min_lambda(&base, value),
    }
}

/// Grid integrals at one snapshot, over the support.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotTerms {
    pub t: f64,
    /// `E = int |U1|^2 / (2 rho)`.
    pub entropy: f64,
    /// `int U^T Q_0 U / (2 rho)`; the `r`-dissipation is `d0 + r E`.
    pub d0: f64,
    /// `R = int rho L1 + B . L2 + P . L3`.
    pub remainder: f64,
}

impl SnapshotTerms {
    pub fn dissipation(&self, r: f64) -> f64 {
        self.d0 + r * self.entropy
    }
}

fn check_dim(trial: &TrialFields, dim: usize) -> Result<(), EntropyError> {
    if trial.dim() != dim {
        return Err(EntropyError::Dimension {
            trial: trial.dim(),
            data: dim,
        });
    }
    Ok(())
}

pub fn snapshot_terms(fields: &GridFields, trial: &TrialFields) -> Result<SnapshotTerms, EntropyError> {
    check_dim(trial, fields.dim())?;
    fields.check_vacuum()?;
    let dim = fields.dim();
    let t = fields.t;
    let parts: Vec<(f64, f64, f64)> = fields
        .support()
        .into_par_iter()
        .map(|c| {
            let rho = fields.rho[c];
            let b = fields.b_at(c);
            let p = fields.p_at(c);
            let tp = trial.evaluate(t, &fields.grid.center(c));
            let u1 = vector::sub(&b, &vector::scale(&tp.b, rho));
            let u2 = vector::sub(&p, &vector::scale(&tp.v, rho));
            let l = l_operators_at(&tp, dim);
            (
                0.5 * vector::norm2(&u1) / rho,
                0.5 * q0_form(&tp, dim, &u1, &u2) / rho,
                rho * l.l1 + vector::dot(&b, &l.l2) + vector::dot(&p, &l.l3),
            )
        })
        .collect();
    let vol = fields.grid.cell_volume();
    let (mut e, mut d, mut r) = (0.0, 0.0, 0.0);
    for (a, b, c) in parts {
        e += a;
        d += b;
        r += c;
    }
    Ok(SnapshotTerms {
        t,
        entropy: e * vol,
        d0: d * vol,
        remainder: r * vol,
    })
}

pub fn relative_entropy(fields: &GridFields, trial: &TrialFields) -> Result<f64, EntropyError> {
    Ok(snapshot_terms(fields, trial)?.entropy)
}

pub fn remainder(fields: &GridFields, trial: &TrialFields) -> Result<f64, EntropyError> {
    Ok(snapshot_terms(fields, trial)?.remainder)
}

/// `int U^T Q_r U / (2 rho)`.
pub fn dissipation(fields: &GridFields, trial: &TrialFields, r: f64) -> Result<f64, EntropyError> {
    Ok(snapshot_terms(fields, trial)?.dissipation(r))
}

/// `int_0^h e^{-r u} du` and `int_0^h u e^{-r u} du`.
fn exp_moments(r: f64, h: f64) -> (f64, f64) {
    let x = r * h;
    if x.abs() < 0.5 {
        // sum_k (-x)^k / (k+1)! and sum_k (-x)^k / (k! (k+2)); the closed
        // forms cancel catastrophically for small x
        let (mut s0, mut s1, mut term) = (0.0, 0.0, 1.0);
        for k in 0..20 {
            let kf = k as f64;
            s0 += term / (kf + 1.0);
            s1 += term / (kf + 2.0);
            term *= -x / (kf + 1.0);
        }
        (h * s0, h * h * s1)
    } else {
        let e = (-x).exp();
        (-(-x).exp_m1() / r, (1.0 - e * (1.0 + x)) / (r * r))
    }
}

/// `int_{t_0}^{t_k} e^{-r (t - t_0)} f(t) dt` for piecewise-linear `f`,
/// with the exponential weight integrated exactly on each step.
pub fn exp_weighted_integral(times: &[f64], values: &[f64], r: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(times.len());
    let mut acc = 0.0;
    out.push(0.0);
    for k in 1..times.len() {
        let h = times[k] - times[k - 1];
        let (i0, i1) = exp_moments(r, h);
        let w = (-r * (times[k - 1] - times[0])).exp();
        acc += w * (values[k - 1] * i0 + (values[k] - values[k - 1]) / h * i1);
        out.push(acc);
    }
    out
}

/// Margins for one value of `r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RMargins {
    pub r: f64,
    /// `D_r(t) = int U^T Q_r U / (2 rho)`.
    pub dissipation: Vec<f64>,
    /// `E(0) - [E(t) e^{-rt} + int_0^t e^{-rt'} (D_r - R) dt']`.
    pub margin: Vec<f64>,
    pub min_margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub family: String,
    pub seed: Option<u64>,
    pub r0: f64,
    pub tol: f64,
    pub times: Vec<f64>,
    pub entropy: Vec<f64>,
    pub d0: Vec<f64>,
    pub remainder: Vec<f64>,
    pub per_r: Vec<RMargins>,
    pub pass: bool,
}

impl EntropyReport {
    pub fn min_margin(&self) -> f64 {
        self.per_r.iter().map(|m| m.min_margin).fold(f64::INFINITY, f64::min)
    }
}

/// Default certification tolerance `1e-6 max(1, E(0))`.
pub fn default_tolerance(e0: f64) -> f64 {
    1e-6 * e0.max(1.0)
}

/// Evaluates the dissipative inequality along a trajectory; passes iff
/// every margin is at least `-tol`. Values of `r` below `r0` are refused.
pub fn certify(
    trajectory: &[GridFields],
    trial: &TrialFields,
    r_values: &[f64],
    r0: f64,
    tol: f64,
) -> Result<EntropyReport, EntropyError> {
    if r_values.is_empty() {
        return Err(EntropyError::NoRValues);
    }
    if let Some(&r) = r_values.iter().find(|&&r| !(r >= r0 * (1.0 - 1e-12))) {
        return Err(EntropyError::BelowR0 { r, r0 });
    }
    if trajectory.len() < 2 {
        return Err(EntropyError::TooFewTimes {
            needed: 2,
            got: trajectory.len(),
        });
    }
    for f in trajectory {
        trajectory[0].grid.check_same(&f.grid)?;
    }
    pde::uniform_step(trajectory)?;
    let terms: Vec<SnapshotTerms> = trajectory
        .iter()
        .map(|f| snapshot_terms(f, trial))
        .collect::<Result<_, _>>()?;
    Ok(report_from_terms(&terms, trial, r_values, r0, tol))
}

/// Builds the report from precomputed per-snapshot integrals.
pub fn report_from_terms(
    terms: &[SnapshotTerms],
    trial: &TrialFields,
    r_values: &[f64],
    r0: f64,
    tol: f64,
) -> EntropyReport {
    let times: Vec<f64> = terms.iter().map(|s| s.t).collect();
    let entropy: Vec<f64> = terms.iter().map(|s| s.entropy).collect();
    let e0 = entropy[0];
    let per_r: Vec<RMargins> = r_values
        .iter()
        .map(|&r| {
            let dissipation: Vec<f64> = terms.iter().map(|s| s.dissipation(r)).collect();
            let integrand: Vec<f64> = terms.iter().map(|s| s.dissipation(r) - s.remainder).collect();
            let integral = exp_weighted_integral(&times, &integrand, r);
            let margin: Vec<f64> = (0..terms.len())
                .map(|k| e0 - (entropy[k] * (-r * (times[k] - times[0])).exp() + integral[k]))
                .collect();
            let min_margin = margin.iter().copied().fold(f64::INFINITY, f64::min);
            RMargins {
                r,
                dissipation,
                margin,
                min_margin,
            }
        })
        .collect();
    let pass = per_r.iter().all(|m| m.min_margin >= -tol);
    EntropyReport {
        family: trial.family.clone(),
        seed: trial.seed,
        r0,
        tol,
        times,
        entropy,
        d0: terms.iter().map(|s| s.d0).collect(),
        remainder: terms.iter().map(|s| s.remainder).collect(),
        per_r,
        pass,
    }
}

/// Per-loop quantities at one time, all `s`-integrals by the trapezoid rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopEntropyTerms {
    pub t: f64,
    /// `int |X_s|^2 / 2`.
    pub e1: f64,
    /// `-int X_s . b*(X)`.
    pub e2: f64,
    /// `int |b*(X)|^2 / 2`.
    pub e3: f64,
    /// `int |X_s - b*(X)|^2 / 2`.
    pub entropy: f64,
    /// `int W^T Q_0 W / 2`.
    pub d0: f64,
    /// `int L1 + X_s . L2 + X_t . L3`.
    pub remainder: f64,
    /// Closed form of `de1/dt` through the primed operators.
    pub de1_closed: f64,
    /// `-int |X_t|^2`.
    pub de1_heat: f64,
    /// Closed form of `de2/dt` through the double-primed operators.
    pub de2_closed: f64,
    /// `int (d_t b* + X_t . grad b*) . b*`.
    pub de3_closed: f64,
}

impl LoopEntropyTerms {
    pub fn dissipation(&self, r: f64) -> f64 {
        self.d0 + r * self.entropy
    }
}

pub fn loop_entropy_terms_from_samples(
    samples: &LoopSamples,
    t: f64,
    trial: &TrialFields,
) -> Result<LoopEntropyTerms, EntropyError> {
    check_dim(trial, samples.dim)?;
    let dim = samples.dim;
    let per: Vec<[f64; 10]> = (0..samples.len())
        .into_par_iter()
        .map(|m| {
            let xs = samples.tangents[m];
            let xt = samples.velocities[m];
            let p = trial.evaluate(t, &samples.positions[m]);
            let w1 = vector::sub(&xs, &p.b);
            let w2 = vector::sub(&xt, &p.v);
            let l = l_operators_at(&p, dim);
            let s = strain_block(&p.grad_v, dim);
            let c = curl_block(&p.grad_b, dim);
            // primed operators
            let mut l1p = vector::norm2(&p.v);
            let mut l2p = ZERO;
            let mut sform = 0.0;
            let mut cform = 0.0;
            let mut l1pp = 0.0;
            let mut l2pp = ZERO;
            let mut l3pp = ZERO;
            let mut de3 = 0.0;
            for i in 0..dim {
                let mut conv = 0.0;
                for j in 0..dim {
                    l1p -= p.b[i] * p.b[j] * p.grad_v[i][j];
                    l2p[i] += s[i][j] * p.b[j];
                    sform += w1[i] * s[i][j] * w1[j];
                    cform += w1[i] * c[i][j] * w2[j];
                    l1pp += c[i][j] * p.b[i] * p.v[j];
                    l2pp[i] -= c[i][j] * p.v[j];
                    l3pp[i] += c[i][j] * p.b[j];
                    conv += xt[j] * p.grad_b[i][j];
                }
                l2pp[i] -= p.db_dt[i];
                de3 += (p.db_dt[i] + conv) * p.b[i];
            }
            let de1 = -vector::norm2(&w2) + l1p + vector::dot(&xs, &l2p) - vector::dot(&xt, &p.v) + 0.5 * sform;
            let de2 = -cform + l1pp + vector::dot(&xs, &l2pp) + vector::dot(&xt, &l3pp);
            [
                0.5 * vector::norm2(&xs),
                -vector::dot(&xs, &p.b),
                0.5 * vector::norm2(&p.b),
                0.5 * vector::norm2(&w1),
                0.5 * q0_form(&p, dim, &w1, &w2),
                l.l1 + vector::dot(&xs, &l.l2) + vector::dot(&xt, &l.l3),
                de1,
                -vector::norm2(&xt),
                de2,
                de3,
            ]
        })
        .collect();
    let mut acc = [0.0; 10];
    for row in &per {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    let inv = 1.0 / samples.len() as f64;
    let a = acc.map(|v| v * inv);
    Ok(LoopEntropyTerms {
        t,
        e1: a[0],
        e2: a[1],
        e3: a[2],
        entropy: a[3],
        d0: a[4],
        remainder: a[5],
        de1_closed: a[6],
        de1_heat: a[7],
        de2_closed: a[8],
        de3_closed: a[9],
    })
}

/// Terms for `lp` already evolved to time `t`.
pub fn loop_entropy_terms(
    lp: &WindingLoop,
    t: f64,
    trial: &TrialFields,
    samples: usize,
) -> Result<LoopEntropyTerms, EntropyError> {
    loop_entropy_terms_from_samples(&lp.sample(samples)?, t, trial)
}

/// Residuals of the per-loop identity at one time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityPoint {
    pub t: f64,
    pub entropy: f64,
    /// Centred difference of the entropy.
    pub de_dt: f64,
    pub d0: f64,
    pub remainder: f64,
    /// `|dE/dt + d0 - R|`.
    pub residual: f64,
    pub de1_fd: f64,
    pub de1_closed: f64,
    pub de1_heat: f64,
    pub de2_fd: f64,
    pub de2_closed: f64,
    pub de3_fd: f64,
    pub de3_closed: f64,
}

impl IdentityPoint {
    /// Largest mismatch among the three component derivatives.
    pub fn component_residual(&self) -> f64 {
        (self.de1_fd - self.de1_closed)
            .abs()
            .max((self.de1_fd - self.de1_heat).abs())
            .max((self.de2_fd - self.de2_closed).abs())
            .max((self.de3_fd - self.de3_closed).abs())
    }
}

/// Checks `dE/dt + int W^T Q W / 2 - R = 0` for the exactly evolved
/// `loop0` at each time, with `dE/dt` by centred differences of step `dt`.
pub fn loop_identity_check(
    loop0: &WindingLoop,
    times: &[f64],
    trial: &TrialFields,
    samples: usize,
    dt: f64,
) -> Result<Vec<IdentityPoint>, EntropyError> {
    check_dim(trial, loop0.dim())?;
    times
        .par_iter()
        .map(|&t| {
            let at = |tau: f64| -> Result<LoopEntropyTerms, EntropyError> {
                // negative times run the (smooth, truncated) series backwards
                loop_entropy_terms(&loop0.heat_propagate(tau), tau, trial, samples)
            };
            let mid = at(t)?;
            let plus = at(t + dt)?;
            let minus = at(t - dt)?;
            let d = |f: fn(&LoopEntropyTerms) -> f64| (f(&plus) - f(&minus)) / (2.0 * dt);
            let de_dt = d(|x| x.entropy);
            Ok(IdentityPoint {
                t,
                entropy: mid.entropy,
                de_dt,
                d0: mid.d0,
                remainder: mid.remainder,
                residual: (de_dt + mid.d0 - mid.remainder).abs(),
                de1_fd: d(|x| x.e1),
                de1_closed: mid.de1_closed,
                de1_heat: mid.de1_heat,
                de2_fd: d(|x| x.e2),
                de2_closed: mid.de2_closed,
                de3_fd: d(|x| x.e3),
                de3_closed: mid.de3_closed,
            })
        })
        .collect()
}

/// Weighted sums over an ensemble at time `t` (the loops are evolved here).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleEntropy {
    pub entropy: f64,
    pub d0: f64,
    pub remainder: f64,
}

impl EnsembleEntropy {
    pub fn dissipation(&self, r: f64) -> f64 {
        self.d0 + r * self.entropy
    }
}

pub fn ensemble_entropy(
    ensemble: &LoopEnsemble,
    t: f64,
    trial: &TrialFields,
    samples: usize,
) -> Result<EnsembleEntropy, EntropyError> {
    let mut out = EnsembleEntropy {
        entropy: 0.0,
        d0: 0.0,
        remainder: 0.0,
    };
    for (lp, w) in ensemble.iter() {
        let terms = loop_entropy_terms(&lp.evolve_exact(t), t, trial, samples)?;
        out.entropy += w * terms.entropy;
        out.d0 += w * terms.d0;
        out.remainder += w * terms.remainder;
    }
    Ok(out)
}
