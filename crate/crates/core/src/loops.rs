//! Winding loops on the flat torus and their heat-equation evolution.
//!
//! A loop is stored as its lift `X(s) = mean + N s + sum_k c_k exp(2 pi i k s)`
//! with integer winding `N`. Only the modes `k >= 1` are kept; `c_{-k}` is
//! always the complex conjugate of `c_k`, so the curve is real. The heat
//! equation `X_t = X_ss` is diagonal in this basis: each mode decays by
//! `exp(-4 pi^2 k^2 t)` while the winding and mean are untouched.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vector::{self, Vector, MAX_DIM, ZERO};

pub const DEFAULT_TRUNCATION: u32 = 16;

/// Tolerance on `sum w_a = 1`.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

pub type ModeCoefficient = [Complex64; MAX_DIM];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LoopError {
    #[error("dimension must be between 1 and {MAX_DIM}, got {0}")]
    Dimension(usize),
    #[error("{field} has {got} components, expected {expected}")]
    Length {
        field: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("mode k = 0 is not allowed (the mean carries the constant term)")]
    ZeroMode,
    #[error("mode |k| = {k} exceeds the truncation K = {truncation}")]
    Truncation { k: u64, truncation: u32 },
    #[error("truncation K must be at least 1")]
    ZeroTruncation,
    #[error("modes k = {k} and k = -{k} are not complex conjugates")]
    Reality { k: u64 },
    #[error("non-finite loop data in {0}")]
    NonFinite(&'static str),
    #[error("ensemble has no loops")]
    EmptyEnsemble,
    #[error("ensemble has {loops} loops but {weights} weights")]
    WeightCount { loops: usize, weights: usize },
    #[error("weight {0} is negative")]
    NegativeWeight(f64),
    #[error("weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("loops in an ensemble must share one dimension")]
    MixedDimension,
    #[error("{samples} samples cannot resolve mode {mode}: need at least {required}")]
    TooFewSamples { samples: usize, mode: u32, required: usize },
    #[error("finite-difference evolution needs at least 8 samples, got {0}")]
    FdTooFewSamples(usize),
    #[error("time step {dt} exceeds the explicit stability bound {bound}")]
    Unstable { dt: f64, bound: f64 },
    #[error("sample parameters are not a uniform grid starting at s = 0")]
    NonUniformSamples,
}

/// A closed curve in `T^d` given by winding, mean and Fourier modes.
#[derive(Clone, Debug, PartialEq)]
pub struct WindingLoop {
    dim: usize,
    winding: [i64; MAX_DIM],
    mean: Vector,
    modes: BTreeMap<u32, ModeCoefficient>,
    truncation: u32,
}

impl WindingLoop {
    /// A straight loop `X(s) = mean + N s`.
    pub fn line(winding: &[i64], mean: &[f64]) -> Result<Self, LoopError> {
        let dim = winding.len();
        if dim == 0 || dim > MAX_DIM {
            return Err(LoopError::Dimension(dim));
        }
        if mean.len() != dim {
            return Err(LoopError::Length {
                field: "mean",
                got: mean.len(),
                expected: dim,
            });
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(LoopError::NonFinite("mean"));
        }
        let mut w = [0i64; MAX_DIM];
        w[..dim].copy_from_slice(winding);
        let mut m = ZERO;
        for (dst, src) in m.iter_mut().zip(mean) {
            *dst = vector::wrap_unit(*src);
        }
        Ok(Self {
            dim,
            winding: w,
            mean: m,
            modes: BTreeMap::new(),
            truncation: DEFAULT_TRUNCATION,
        })
    }

    /// The graph loop with winding `e_along` and
    /// `X_across(s) = height + amplitude * sin(2 pi k s)`.
    pub fn graph_sine(
        dim: usize,
        along: usize,
        across: usize,
        height: f64,
        amplitude: f64,
        k: u32,
    ) -> Result<Self, LoopError> {
        if dim == 0 || dim > MAX_DIM || along >= dim || across >= dim || along == across {
            return Err(LoopError::Dimension(dim));
        }
        let mut winding = vec![0i64; dim];
        winding[along] = 1;
        let mut mean = vec![0.0; dim];
        mean[across] = height;
        let mut c = [Complex64::new(0.0, 0.0); MAX_DIM];
        // a sin(2 pi k s) = c e^{i 2 pi k s} + conj(c) e^{-i 2 pi k s} with c = -i a / 2
        c[across] = Complex64::new(0.0, -0.5 * amplitude);
        let truncation = k.max(DEFAULT_TRUNCATION);
        Self::line(&winding, &mean)?
            .with_truncation(truncation)?
            .with_mode(i64::from(k), &c[..dim])
    }

    /// Sets the truncation order `K`; existing modes must fit.
    pub fn with_truncation(mut self, truncation: u32) -> Result<Self, LoopError> {
        if truncation == 0 {
            return Err(LoopError::ZeroTruncation);
        }
        if let Some((&k, _)) = self.modes.iter().next_back() {
            if k > truncation {
                return Err(LoopError::Truncation {
                    k: u64::from(k),
                    truncation,
                });
            }
        }
        self.truncation = truncation;
        Ok(self)
    }

    /// Sets mode `c_k`; for negative `k` the conjugate is stored at `|k|`.
    pub fn with_mode(mut self, k: i64, coefficient: &[Complex64]) -> Result<Self, LoopError> {
        if k == 0 {
            return Err(LoopError::ZeroMode);
        }
        if coefficient.len() != self.dim {
            return Err(LoopError::Length {
                field: "mode",
                got: coefficient.len(),
                expected: self.dim,
            });
        }
        if coefficient.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(LoopError::NonFinite("mode"));
        }
        let abs_k = k.unsigned_abs();
        if abs_k > u64::from(self.truncation) {
            return Err(LoopError::Truncation {
                k: abs_k,
                truncation: self.truncation,
            });
        }
        let mut c = [Complex64::new(0.0, 0.0); MAX_DIM];
        for (dst, src) in c.iter_mut().zip(coefficient) {
            *dst = if k > 0 { *src } else { src.conj() };
        }
        self.modes.insert(abs_k as u32, c);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn winding(&self) -> &[i64] {
        &self.winding[..self.dim]
    }

    pub fn winding_vector(&self) -> Vector {
        let mut n = ZERO;
        for k in 0..self.dim {
            n[k] = self.winding[k] as f64;
        }
        n
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean[..self.dim]
    }

    pub fn truncation(&self) -> u32 {
        self.truncation
    }

    /// Highest stored mode, 0 for a straight loop.
    pub fn max_mode(&self) -> u32 {
        self.modes.keys().next_back().copied().unwrap_or(0)
    }

    /// `c_k` for any nonzero `k`, zero when the mode is absent.
    pub fn mode(&self, k: i64) -> ModeCoefficient {
        let zero = [Complex64::new(0.0, 0.0); MAX_DIM];
        match self.modes.get(&(k.unsigned_abs() as u32)) {
            None => zero,
            Some(c) if k > 0 => *c,
            Some(c) => {
                let mut out = zero;
                for (o, ci) in out.iter_mut().zip(c) {
                    *o = ci.conj();
                }
                out
            }
        }
    }

    /// Stored modes `k >= 1` in increasing order.
    pub fn modes(&self) -> impl Iterator<Item = (u32, &ModeCoefficient)> {
        self.modes.iter().map(|(k, c)| (*k, c))
    }

    /// Lifted position, tangent `X_s` and second derivative `X_ss` at `s`.
    pub fn evaluate(&self, s: f64) -> (Vector, Vector, Vector) {
        let n = self.winding_vector();
        let mut x = ZERO;
        let mut xs = n;
        let mut xss = ZERO;
        for i in 0..self.dim {
            x[i] = self.mean[i] + n[i] * s;
        }
        for (&k, c) in &self.modes {
            let kf = f64::from(k);
            let omega = 2.0 * PI * kf;
            let e = Complex64::from_polar(1.0, omega * s);
            for i in 0..self.dim {
                let z = c[i] * e;
                // c e + conj(c e) = 2 Re(c e)
                x[i] += 2.0 * z.re;
                xs[i] += 2.0 * (Complex64::new(0.0, omega) * z).re;
                xss[i] += -2.0 * omega * omega * z.re;
            }
        }
        (x, xs, xss)
    }

    /// Exact heat flow by time `t >= 0`.
    ///
    /// # Panics
    /// Panics if `t` is negative or not finite.
    pub fn evolve_exact(&self, t: f64) -> WindingLoop {
        assert!(t >= 0.0 && t.is_finite(), "evolve_exact needs t >= 0, got {t}");
        self.heat_propagate(t)
    }

    /// Mode multipliers `exp(-4 pi^2 k^2 tau)` for any real `tau`. Backward
    /// propagation is well defined for finitely many modes and is used for
    /// centred time differences around `t = 0`.
    pub(crate) fn heat_propagate(&self, tau: f64) -> WindingLoop {
        let mut out = self.clone();
        for (&k, c) in out.modes.iter_mut() {
            let kf = f64::from(k);
            let factor = (-4.0 * PI * PI * kf * kf * tau).exp();
            for ci in c.iter_mut() {
                *ci *= factor;
            }
        }
        out
    }

    /// `1/2 int |X_s|^2 ds` by Parseval.
    pub fn energy(&self) -> f64 {
        let n = self.winding_vector();
        let mut e = 0.5 * vector::norm2(&n);
        for (&k, c) in &self.modes {
            let kf = f64::from(k);
            let c2: f64 = c[..self.dim].iter().map(|z| z.norm_sqr()).sum();
            // +k and -k each contribute 2 pi^2 k^2 |c_k|^2
            e += 4.0 * PI * PI * kf * kf * c2;
        }
        e
    }

    /// Uniform samples `s_m = m / M` of position, tangent and velocity.
    pub fn sample(&self, samples: usize) -> Result<LoopSamples, LoopError> {
        let required = 4 * self.max_mode() as usize + 4;
        if samples < required {
            return Err(LoopError::TooFewSamples {
                samples,
                mode: self.max_mode(),
                required,
            });
        }
        let mut out = LoopSamples {
            dim: self.dim,
            winding: self.winding,
            s_values: Vec::with_capacity(samples),
            positions: Vec::with_capacity(samples),
            tangents: Vec::with_capacity(samples),
            velocities: Vec::with_capacity(samples),
        };
        for m in 0..samples {
            let s = m as f64 / samples as f64;
            let (x, xs, xss) = self.evaluate(s);
            out.s_values.push(s);
            out.positions.push(x);
            out.tangents.push(xs);
            out.velocities.push(xss);
        }
        Ok(out)
    }
}

/// Free-function form of [`WindingLoop::evolve_exact`].
pub fn evolve_exact(lp: &WindingLoop, t: f64) -> WindingLoop {
    lp.evolve_exact(t)
}

/// Free-function form of [`WindingLoop::energy`].
pub fn loop_energy(lp: &WindingLoop) -> f64 {
    lp.energy()
}

/// Free-function form of [`WindingLoop::sample`].
pub fn sample(lp: &WindingLoop, samples: usize) -> Result<LoopSamples, LoopError> {
    lp.sample(samples)
}

/// Serialized loop: `{ winding, mean, modes: [{k, re, im}], truncation }`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LoopSpec {
    pub winding: Vec<i64>,
    pub mean: Vec<f64>,
    #[serde(default)]
    pub modes: Vec<ModeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<u32>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModeSpec {
    pub k: i64,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl TryFrom<&LoopSpec> for WindingLoop {
    type Error = LoopError;

    fn try_from(spec: &LoopSpec) -> Result<Self, LoopError> {
        let mut lp = WindingLoop::line(&spec.winding, &spec.mean)?;
        if let Some(t) = spec.truncation {
            lp = lp.with_truncation(t)?;
        }
        let dim = lp.dim;
        let mut seen: BTreeMap<i64, Vec<Complex64>> = BTreeMap::new();
        for m in &spec.modes {
            if m.re.len() != dim || m.im.len() != dim {
                return Err(LoopError::Length {
                    field: "mode",
                    got: m.re.len().min(m.im.len()),
                    expected: dim,
                });
            }
            let c: Vec<Complex64> = m.re.iter().zip(&m.im).map(|(&r, &i)| Complex64::new(r, i)).collect();
            if let Some(other) = seen.get(&-m.k) {
                let conj_ok = c
                    .iter()
                    .zip(other)
                    .all(|(a, b)| (a - b.conj()).norm() <= 1e-12 * (1.0 + a.norm()));
                if !conj_ok {
                    return Err(LoopError::Reality { k: m.k.unsigned_abs() });
                }
            }
            seen.insert(m.k, c.clone());
            lp = lp.with_mode(m.k, &c)?;
        }
        Ok(lp)
    }
}

impl From<&WindingLoop> for LoopSpec {
    fn from(lp: &WindingLoop) -> Self {
        LoopSpec {
            winding: lp.winding().to_vec(),
            mean: lp.mean().to_vec(),
            modes: lp
                .modes()
                .map(|(k, c)| ModeSpec {
                    k: i64::from(k),
                    re: c[..lp.dim].iter().map(|z| z.re).collect(),
                    im: c[..lp.dim].iter().map(|z| z.im).collect(),
                })
                .collect(),
            truncation: Some(lp.truncation),
        }
    }
}

/// Uniform samples of a loop. Positions are lifted (not wrapped); use
/// [`LoopSamples::torus_position`] for the point in `[0,1)^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopSamples {
    pub dim: usize,
    pub winding: [i64; MAX_DIM],
    pub s_values: Vec<f64>,
    pub positions: Vec<Vector>,
    pub tangents: Vec<Vector>,
    pub velocities: Vec<Vector>,
}

impl LoopSamples {
    pub fn len(&self) -> usize {
        self.s_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s_values.is_empty()
    }

    pub fn torus_position(&self, m: usize) -> Vector {
        let mut p = self.positions[m];
        for x in p.iter_mut().take(self.dim) {
            *x = vector::wrap_unit(*x);
        }
        p
    }

    fn winding_vector(&self) -> Vector {
        let mut n = ZERO;
        for k in 0..self.dim {
            n[k] = self.winding[k] as f64;
        }
        n
    }

    /// Trapezoid (uniform mean) of the tangents; equals `N` for closed loops.
    pub fn tangent_sum(&self) -> Vector {
        let mut acc = ZERO;
        for t in &self.tangents {
            for k in 0..self.dim {
                acc[k] += t[k];
            }
        }
        vector::scale(&acc, 1.0 / self.len() as f64)
    }
}

/// Explicit central-difference heat stepping of sampled loops.
///
/// Works on the periodic lift `Y(s) = X(s) - N s`; the winding is added
/// back on output. Output tangents and velocities are the central first
/// difference and the discrete Laplacian of the advanced curve.
pub fn evolve_fd(samples: &LoopSamples, dt: f64, steps: usize) -> Result<LoopSamples, LoopError> {
    let m = samples.len();
    if m < 8 {
        return Err(LoopError::FdTooFewSamples(m));
    }
    let ds = 1.0 / m as f64;
    for (i, s) in samples.s_values.iter().enumerate() {
        if (s - i as f64 * ds).abs() > 1e-12 {
            return Err(LoopError::NonUniformSamples);
        }
    }
    let bound = 0.5 * ds * ds;
    if !(dt > 0.0) || dt > bound * (1.0 + 1e-12) {
        return Err(LoopError::Unstable { dt, bound });
    }
    let dim = samples.dim;
    let n = samples.winding_vector();
    let mut y: Vec<Vector> = samples
        .positions
        .iter()
        .zip(&samples.s_values)
        .map(|(x, &s)| {
            let mut out = *x;
            for k in 0..dim {
                out[k] -= n[k] * s;
            }
            out
        })
        .collect();
    let mut next = y.clone();
    let lambda = dt / (ds * ds);
    for _ in 0..steps {
        for i in 0..m {
            let (ym, yp) = (&y[(i + m - 1) % m], &y[(i + 1) % m]);
            for k in 0..dim {
                next[i][k] = y[i][k] + lambda * (yp[k] - 2.0 * y[i][k] + ym[k]);
            }
        }
        std::mem::swap(&mut y, &mut next);
    }

    let mut out = samples.clone();
    for i in 0..m {
        let (ym, yp) = (&y[(i + m - 1) % m], &y[(i + 1) % m]);
        for k in 0..dim {
            out.positions[i][k] = y[i][k] + n[k] * samples.s_values[i];
            out.tangents[i][k] = (yp[k] - ym[k]) / (2.0 * ds) + n[k];
            out.velocities[i][k] = (yp[k] - 2.0 * y[i][k] + ym[k]) / (ds * ds);
        }
    }
    Ok(out)
}

/// Finite weighted family of loops.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopEnsemble {
    loops: Vec<WindingLoop>,
    weights: Vec<f64>,
}

impl LoopEnsemble {
    pub fn new(loops: Vec<WindingLoop>, weights: Vec<f64>) -> Result<Self, LoopError> {
        if loops.is_empty() {
            return Err(LoopError::EmptyEnsemble);
        }
        if loops.len() != weights.len() {
            return Err(LoopError::WeightCount {
                loops: loops.len(),
                weights: weights.len(),
            });
        }
        if let Some(&w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(LoopError::NegativeWeight(w));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(LoopError::WeightSum(sum));
        }
        let dim = loops[0].dim;
        if loops.iter().any(|l| l.dim != dim) {
            return Err(LoopError::MixedDimension);
        }
        Ok(Self { loops, weights })
    }

    pub fn single(lp: WindingLoop) -> Self {
        Self {
            loops: vec![lp],
            weights: vec![1.0],
        }
    }

    /// Equal weights `1 / len`.
    pub fn uniform(loops: Vec<WindingLoop>) -> Result<Self, LoopError> {
        let n = loops.len().max(1);
        let weights = vec![1.0 / n as f64; loops.len()];
        Self::new(loops, weights)
    }

    pub fn dim(&self) -> usize {
        self.loops[0].dim
    }

    pub fn len(&self) -> usize {
        self.loops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loops.is_empty()
    }

    pub fn loops(&self) -> &[WindingLoop] {
        &self.loops
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (&WindingLoop, f64)> {
        self.loops.iter().zip(self.weights.iter().copied())
    }

    pub fn max_mode(&self) -> u32 {
        self.loops.iter().map(WindingLoop::max_mode).max().unwrap_or(0)
    }

    pub fn evolve_exact(&self, t: f64) -> LoopEnsemble {
        LoopEnsemble {
            loops: self.loops.iter().map(|l| l.evolve_exact(t)).collect(),
            weights: self.weights.clone(),
        }
    }

    /// `sum_a w_a N(a)`.
    pub fn circulation(&self) -> Vector {
        let mut acc = ZERO;
        for (l, w) in self.iter() {
            let n = l.winding_vector();
            for k in 0..MAX_DIM {
                acc[k] += w * n[k];
            }
        }
        acc
    }

    /// `sum_a w_a * 1/2 int |X_s|^2`.
    pub fn energy(&self) -> f64 {
        self.iter().map(|(l, w)| w * l.energy()).sum()
    }
}

/// Parameters of a seeded random ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomEnsembleSpec {
    pub count: usize,
    pub seed: u64,
    #[serde(default = "default_random_max_mode")]
    pub max_mode: u32,
    /// Coefficient scale; mode `k` is drawn with scale `amplitude / k^2`.
    #[serde(default = "default_random_amplitude")]
    pub amplitude: f64,
}

fn default_random_max_mode() -> u32 {
    3
}

fn default_random_amplitude() -> f64 {
    0.02
}

/// Loops winding once along a random axis (either orientation), with random
/// means, random modes and random weights.
pub fn random_ensemble(dim: usize, spec: &RandomEnsembleSpec) -> Result<LoopEnsemble, LoopError> {
    if dim == 0 || dim > MAX_DIM {
        return Err(LoopError::Dimension(dim));
    }
    if spec.count == 0 {
        return Err(LoopError::EmptyEnsemble);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut loops = Vec::with_capacity(spec.count);
    let mut weights = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let mut winding = vec![0i64; dim];
        winding[rng.gen_range(0..dim)] = if rng.gen_bool(0.5) { 1 } else { -1 };
        let mean: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut lp = WindingLoop::line(&winding, &mean)?.with_truncation(spec.max_mode.max(1))?;
        for k in 1..=spec.max_mode {
            let scale = spec.amplitude / f64::from(k * k);
            let c: Vec<Complex64> = (0..dim)
                .map(|_| Complex64::new(rng.gen_range(-scale..=scale), rng.gen_range(-scale..=scale)))
                .collect();
            lp = lp.with_mode(i64::from(k), &c)?;
        }
        loops.push(lp);
        weights.push(rng.gen_range(0.5..1.5));
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    // renormalise exactly so the sum check is not at the mercy of rounding
    let last = weights.len() - 1;
    weights[last] = 1.0 - weights[..last].iter().sum::<f64>();
    LoopEnsemble::new(loops, weights)
}

/// Minimum toroidal distance between samples of distinct loops and between
/// non-adjacent samples of the same loop. Zero signals an intersection.
pub fn min_separation(ensemble: &LoopEnsemble, samples: usize) -> Result<f64, LoopError> {
    separation_with_gap(ensemble, samples, 2)
}

/// Like [`min_separation`], but same-loop pairs closer than `window` in the
/// (cyclic) parameter are ignored. With `window = 1/4` a smooth loop only
/// reports genuine near-crossings, not its own sample spacing.
pub fn min_separation_excluding(ensemble: &LoopEnsemble, samples: usize, window: f64) -> Result<f64, LoopError> {
    let gap = ((window * samples as f64).ceil() as usize).max(2);
    separation_with_gap(ensemble, samples, gap)
}

fn separation_with_gap(ensemble: &LoopEnsemble, samples: usize, min_index_gap: usize) -> Result<f64, LoopError> {
    let dim = ensemble.dim();
    let sampled: Vec<LoopSamples> = ensemble
        .loops
        .iter()
        .map(|l| l.sample(samples))
        .collect::<Result<_, _>>()?;
    let points: Vec<Vec<Vector>> = sampled
        .iter()
        .map(|s| (0..s.len()).map(|m| s.torus_position(m)).collect())
        .collect();
    let best = (0..points.len())
        .into_par_iter()
        .map(|a| {
            let mut best = f64::INFINITY;
            for (i, p) in points[a].iter().enumerate() {
                let len = points[a].len();
                for (j, q) in points[a].iter().enumerate().skip(i + 1) {
                    let gap = (j - i).min(len - (j - i));
                    if gap >= min_index_gap {
                        best = best.min(vector::torus_distance(p, q, dim));
                    }
                }
                for other in &points[a + 1..] {
                    for q in other {
                        best = best.min(vector::torus_distance(p, q, dim));
                    }
                }
            }
            best
        })
        .reduce(|| f64::INFINITY, f64::min);
    Ok(if best.is_finite() { best } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(eps: f64) -> WindingLoop {
        WindingLoop::graph_sine(2, 0, 1, 0.5, eps, 1).unwrap()
    }

    #[test]
    fn line_is_stationary() {
        let l = WindingLoop::line(&[1, 0], &[0.0, 0.25]).unwrap();
        assert_eq!(l.evolve_exact(3.0), l);
        assert_eq!(l.evolve_exact(0.0), l);
    }

    #[test]
    fn single_mode_decays_at_its_eigenvalue() {
        let eps = 0.05;
        let l = graph(eps);
        let t = 0.01;
        let e = l.evolve_exact(t);
        let expected = -0.5 * eps * (-4.0 * PI * PI * t).exp();
        let c = e.mode(1);
        assert!((c[1].im - expected).abs() < 1e-16);
        assert_eq!(c[1].re, 0.0);
        assert_eq!(e.mode(-1)[1], c[1].conj());
    }

    #[test]
    fn graph_sine_matches_closed_form() {
        let eps = 0.05;
        let l = graph(eps);
        let (x, xs, xss) = l.evaluate(0.25);
        assert!((x[1] - (0.5 + eps)).abs() < 1e-15);
        assert!((xs[0] - 1.0).abs() < 1e-15 && xs[1].abs() < 1e-15);
        assert!(xss[0].abs() < 1e-15);
        assert!((xss[1] + 4.0 * PI * PI * eps).abs() < 1e-13);
    }

    #[test]
    fn closure_shift_by_winding() {
        let l = WindingLoop::line(&[2, -1], &[0.1, 0.3])
            .unwrap()
            .with_mode(3, &[Complex64::new(0.01, 0.02), Complex64::new(-0.03, 0.0)])
            .unwrap();
        for s in [0.0, 0.13, 0.77] {
            let (a, _, _) = l.evaluate(s);
            let (b, _, _) = l.evaluate(s + 1.0);
            assert!((b[0] - a[0] - 2.0).abs() < 1e-12);
            assert!((b[1] - a[1] + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn energy_parseval_and_quadrature_agree() {
        let eps = 0.05;
        let l = graph(eps);
        assert!((l.energy() - (0.5 + PI * PI * eps * eps)).abs() < 1e-15);
        // independent route: midpoint quadrature of |X_s|^2 / 2 from closed-form X_s
        let m = 1000;
        let quad: f64 = (0..m)
            .map(|i| {
                let s = (i as f64 + 0.5) / m as f64;
                let d = 2.0 * PI * eps * (2.0 * PI * s).cos();
                0.5 * (1.0 + d * d)
            })
            .sum::<f64>()
            / m as f64;
        assert!((quad - l.energy()).abs() < 1e-14);
        let t = 0.003;
        let expected = 0.5 + PI * PI * eps * eps * (-8.0 * PI * PI * t).exp();
        assert!((l.evolve_exact(t).energy() - expected).abs() < 1e-15);
    }

    #[test]
    fn winding_line_energy() {
        let l = WindingLoop::line(&[1, 0], &[0.0, 0.0]).unwrap();
        assert_eq!(l.energy(), 0.5);
    }

    #[test]
    fn sampling_line_and_tangent_sum() {
        let l = WindingLoop::line(&[1, 0], &[0.0, 0.5]).unwrap();
        let s = l.sample(8).unwrap();
        for (t, v) in s.tangents.iter().zip(&s.velocities) {
            assert_eq!(t[..2], [1.0, 0.0]);
            assert_eq!(v[..2], [0.0, 0.0]);
        }
        let g = graph(0.05).sample(64).unwrap().tangent_sum();
        assert!((g[0] - 1.0).abs() < 1e-15 && g[1].abs() < 1e-15);
    }

    #[test]
    fn sample_rejects_underresolved_modes() {
        let l = graph(0.1);
        assert!(matches!(l.sample(7), Err(LoopError::TooFewSamples { required: 8, .. })));
        assert!(l.sample(8).is_ok());
    }

    #[test]
    fn mode_validation() {
        let l = WindingLoop::line(&[1, 0], &[0.0, 0.0]).unwrap();
        let c = [Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)];
        assert_eq!(l.clone().with_mode(0, &c), Err(LoopError::ZeroMode));
        assert!(matches!(
            l.clone().with_mode(17, &c),
            Err(LoopError::Truncation { k: 17, .. })
        ));
        assert!(l.clone().with_truncation(0).is_err());
        let spec = LoopSpec {
            winding: vec![1, 0],
            mean: vec![0.0, 0.0],
            modes: vec![
                ModeSpec {
                    k: 1,
                    re: vec![0.0, 1.0],
                    im: vec![0.0, 1.0],
                },
                ModeSpec {
                    k: -1,
                    re: vec![0.0, 1.0],
                    im: vec![0.0, 1.0],
                },
            ],
            truncation: None,
        };
        assert_eq!(WindingLoop::try_from(&spec), Err(LoopError::Reality { k: 1 }));
    }

    #[test]
    fn spec_roundtrip() {
        let l = graph(0.07);
        let spec = LoopSpec::from(&l);
        assert_eq!(WindingLoop::try_from(&spec).unwrap(), l);
    }

    #[test]
    fn fd_keeps_lines_and_checks_stability() {
        let l = WindingLoop::line(&[1, 0], &[0.0, 0.3]).unwrap();
        let s = l.sample(16).unwrap();
        let out = evolve_fd(&s, 1e-3, 50).unwrap();
        for (a, b) in out.positions.iter().zip(&s.positions) {
            assert!((a[0] - b[0]).abs() < 1e-15 && (a[1] - b[1]).abs() < 1e-15);
        }
        assert!(matches!(evolve_fd(&s, 0.01, 1), Err(LoopError::Unstable { .. })));
        let small = l.sample(4).unwrap();
        assert_eq!(evolve_fd(&small, 1e-4, 1), Err(LoopError::FdTooFewSamples(4)));
    }

    #[test]
    fn fd_tracks_two_modes() {
        let l = WindingLoop::line(&[1, 0], &[0.0, 0.5])
            .unwrap()
            .with_mode(1, &[Complex64::new(0.0, 0.0), Complex64::new(0.0, -0.02)])
            .unwrap()
            .with_mode(2, &[Complex64::new(0.0, 0.0), Complex64::new(0.01, 0.0)])
            .unwrap();
        let m = 256;
        let dt = 1e-6;
        let steps = 10_000;
        let fd = evolve_fd(&l.sample(m).unwrap(), dt, steps).unwrap();
        let exact = l.evolve_exact(dt * steps as f64).sample(m).unwrap();
        let err = fd
            .positions
            .iter()
            .zip(&exact.positions)
            .map(|(a, b)| (a[1] - b[1]).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-3, "err = {err}");
    }

    #[test]
    fn random_ensemble_is_reproducible() {
        let spec = RandomEnsembleSpec {
            count: 4,
            seed: 9,
            max_mode: 3,
            amplitude: 0.02,
        };
        let a = random_ensemble(2, &spec).unwrap();
        let b = random_ensemble(2, &spec).unwrap();
        assert_eq!(a.loops(), b.loops());
        assert_eq!(a.weights(), b.weights());
        assert!((a.weights().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let c = random_ensemble(2, &RandomEnsembleSpec { seed: 10, ..spec }).unwrap();
        assert_ne!(a.loops(), c.loops());
    }

    #[test]
    fn ensemble_validation() {
        let a = WindingLoop::line(&[1, 0], &[0.0, 0.25]).unwrap();
        let b = WindingLoop::line(&[0, 1], &[0.5, 0.0]).unwrap();
        assert!(LoopEnsemble::new(vec![a.clone(), b.clone()], vec![0.3, 0.7]).is_ok());
        assert!(matches!(
            LoopEnsemble::new(vec![a.clone(), b.clone()], vec![0.3, 0.6]),
            Err(LoopError::WeightSum(_))
        ));
        assert!(matches!(
            LoopEnsemble::new(vec![a.clone(), b], vec![-0.3, 1.3]),
            Err(LoopError::NegativeWeight(_))
        ));
        let c = WindingLoop::line(&[1, 0, 0], &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(
            LoopEnsemble::new(vec![a, c], vec![0.5, 0.5]),
            Err(LoopError::MixedDimension)
        );
    }

    #[test]
    fn separation_examples() {
        let a = WindingLoop::line(&[1, 0], &[0.0, 0.25]).unwrap();
        let b = WindingLoop::line(&[1, 0], &[0.0, 0.75]).unwrap();
        let two = LoopEnsemble::uniform(vec![a.clone(), b]).unwrap();
        // only mutual pairs and antipodal self pairs remain
        let sep = min_separation_excluding(&two, 64, 0.5).unwrap();
        assert!((sep - 0.5).abs() < 1e-15);
        let quarter = min_separation_excluding(&two, 64, 0.25).unwrap();
        assert!((quarter - 0.25).abs() < 1e-15);
        let one = LoopEnsemble::single(a.clone());
        let s = min_separation(&one, 16).unwrap();
        assert!((s - 2.0 / 16.0).abs() < 1e-15);
        let same = LoopEnsemble::uniform(vec![a.clone(), a]).unwrap();
        assert_eq!(min_separation(&same, 16).unwrap(), 0.0);
    }
}
