//! Smooth trial fields `(b*, v*)` with exact first derivatives.
//!
//! Every component is a finite sum of terms
//! `exp(-decay t) (a cos(theta) + b sin(theta))` with
//! `theta = 2 pi k . x + omega t + phase` and integer wave vector `k`, so the
//! fields are periodic in `x`, smooth in `t`, and their partial derivatives
//! are available in closed form.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loops::WindingLoop;
use crate::vector::{Matrix, Vector, MAX_DIM, ZERO};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrialError {
    #[error("trial field has {got} components, expected {expected}")]
    Components { got: usize, expected: usize },
    #[error("wave vector {0:?} does not match the field dimension")]
    WaveLength(Vec<i32>),
    #[error("loop is not a graph over one axis: {0}")]
    NotAGraph(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrigTerm {
    #[serde(default)]
    pub cos: f64,
    #[serde(default)]
    pub sin: f64,
    #[serde(default)]
    pub decay: f64,
    #[serde(default)]
    pub omega: f64,
    #[serde(default)]
    pub phase: f64,
    /// Integer wave vector; empty means the zero vector.
    #[serde(default)]
    pub wave: Vec<i32>,
}

impl TrigTerm {
    pub fn constant(value: f64) -> Self {
        Self {
            cos: value,
            sin: 0.0,
            decay: 0.0,
            omega: 0.0,
            phase: 0.0,
            wave: Vec::new(),
        }
    }

    fn wave_vector(&self) -> Vector {
        let mut k = ZERO;
        for (dst, &src) in k.iter_mut().zip(&self.wave) {
            *dst = f64::from(src);
        }
        k
    }

    fn max_wave(&self) -> i32 {
        self.wave.iter().map(|k| k.abs()).max().unwrap_or(0)
    }

    /// Value, time derivative and spatial gradient at `(t, x)`.
    #[inline]
    fn eval(&self, t: f64, x: &Vector) -> (f64, f64, Vector) {
        let k = self.wave_vector();
        let theta = 2.0 * PI * (k[0] * x[0] + k[1] * x[1] + k[2] * x[2]) + self.omega * t + self.phase;
        let (s, c) = theta.sin_cos();
        let env = (-self.decay * t).exp();
        let value = env * (self.cos * c + self.sin * s);
        // d/dtheta of the bracket
        let dtheta = env * (-self.cos * s + self.sin * c);
        let dt = -self.decay * value + self.omega * dtheta;
        let mut grad = ZERO;
        for j in 0..MAX_DIM {
            grad[j] = 2.0 * PI * k[j] * dtheta;
        }
        (value, dt, grad)
    }
}

/// A `dim`-vector field; `components[i]` lists the terms of component `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrigField {
    pub dim: usize,
    pub components: Vec<Vec<TrigTerm>>,
}

impl TrigField {
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            components: vec![Vec::new(); dim],
        }
    }

    pub fn constant(value: &[f64]) -> Self {
        Self {
            dim: value.len(),
            components: value.iter().map(|&v| vec![TrigTerm::constant(v)]).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), TrialError> {
        if self.components.len() != self.dim {
            return Err(TrialError::Components {
                got: self.components.len(),
                expected: self.dim,
            });
        }
        for term in self.components.iter().flatten() {
            if term.wave.len() > self.dim {
                return Err(TrialError::WaveLength(term.wave.clone()));
            }
        }
        Ok(())
    }

    pub fn max_wave(&self) -> i32 {
        self.components
            .iter()
            .flatten()
            .map(TrigTerm::max_wave)
            .max()
            .unwrap_or(0)
    }

    fn max_rate(&self) -> f64 {
        self.components
            .iter()
            .flatten()
            .map(|t| t.omega.abs() + t.decay.abs())
            .fold(0.0, f64::max)
    }

    /// Value, `d/dt` and Jacobian `jac[i][j] = d_j f_i`.
    pub fn eval(&self, t: f64, x: &Vector) -> (Vector, Vector, Matrix) {
        let mut value = ZERO;
        let mut dt = ZERO;
        let mut jac = [ZERO; MAX_DIM];
        for (i, terms) in self.components.iter().enumerate() {
            for term in terms {
                let (v, d, g) = term.eval(t, x);
                value[i] += v;
                dt[i] += d;
                for j in 0..MAX_DIM {
                    jac[i][j] += g[j];
                }
            }
        }
        (value, dt, jac)
    }

    /// Value only.
    pub fn value(&self, t: f64, x: &Vector) -> Vector {
        self.eval(t, x).0
    }
}

/// `b*, v*` and their first partials at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrialPoint {
    pub b: Vector,
    pub v: Vector,
    pub db_dt: Vector,
    pub dv_dt: Vector,
    /// `grad_b[i][j] = d_j b*_i`.
    pub grad_b: Matrix,
    /// `grad_v[i][j] = d_j v*_i`.
    pub grad_v: Matrix,
}

/// Ranges for randomly drawn trial pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomTrialSpec {
    /// Non-constant terms per component.
    pub terms: usize,
    pub max_wave: i32,
    pub amplitude: f64,
    pub max_decay: f64,
    pub max_omega: f64,
}

impl Default for RandomTrialSpec {
    fn default() -> Self {
        Self {
            terms: 2,
            max_wave: 2,
            amplitude: 0.3,
            max_decay: 2.0,
            max_omega: 2.0 * PI,
        }
    }
}

/// A trial pair `(b*, v*)` together with the family it was drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialFields {
    pub family: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub b: TrigField,
    pub v: TrigField,
}

impl TrialFields {
    pub fn new(family: impl Into<String>, b: TrigField, v: TrigField) -> Result<Self, TrialError> {
        b.validate()?;
        v.validate()?;
        if b.dim != v.dim {
            return Err(TrialError::Components {
                got: v.dim,
                expected: b.dim,
            });
        }
        Ok(Self {
            family: family.into(),
            seed: None,
            b,
            v,
        })
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            family: "zero".into(),
            seed: None,
            b: TrigField::zero(dim),
            v: TrigField::zero(dim),
        }
    }

    pub fn constant(b: &[f64]) -> Self {
        Self {
            family: "constant".into(),
            seed: None,
            b: TrigField::constant(b),
            v: TrigField::zero(b.len()),
        }
    }

    /// Random trigonometric pair from `seed`.
    pub fn random(dim: usize, seed: u64, spec: &RandomTrialSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let field = |rng: &mut ChaCha8Rng| TrigField {
            dim,
            components: (0..dim)
                .map(|_| {
                    let mut terms = vec![TrigTerm::constant(rng.gen_range(-spec.amplitude..=spec.amplitude))];
                    for _ in 0..spec.terms {
                        let wave = loop {
                            let w: Vec<i32> = (0..dim)
                                .map(|_| rng.gen_range(-spec.max_wave..=spec.max_wave))
                                .collect();
                            if w.iter().any(|&k| k != 0) {
                                break w;
                            }
                        };
                        terms.push(TrigTerm {
                            cos: rng.gen_range(-spec.amplitude..=spec.amplitude),
                            sin: rng.gen_range(-spec.amplitude..=spec.amplitude),
                            decay: rng.gen_range(0.0..=spec.max_decay),
                            omega: rng.gen_range(-spec.max_omega..=spec.max_omega),
                            phase: 0.0,
                            wave,
                        });
                    }
                    terms
                })
                .collect(),
        };
        let b = field(&mut rng);
        let v = field(&mut rng);
        Self {
            family: "random-trig".into(),
            seed: Some(seed),
            b,
            v,
        }
    }

    /// The exact smooth solution generated by a graph loop.
    ///
    /// The loop must wind once along a single axis `j` with no modes in that
    /// axis, so that `s = x_j - mean_j` parameterises it. Then
    /// `b*(t, x) = X_s(t, s)` and `v*(t, x) = X_ss(t, s)`, which solve the
    /// non-conservative system on the whole torus.
    pub fn from_graph_loop(lp: &WindingLoop) -> Result<Self, TrialError> {
        let dim = lp.dim();
        let axes: Vec<usize> = (0..dim).filter(|&k| lp.winding()[k] != 0).collect();
        if axes.len() != 1 || lp.winding()[axes[0]] != 1 {
            return Err(TrialError::NotAGraph(format!("winding {:?}", lp.winding())));
        }
        let j = axes[0];
        if lp.modes().any(|(_, c)| c[j].norm() != 0.0) {
            return Err(TrialError::NotAGraph(format!("axis {j} carries Fourier modes")));
        }
        let mean_j = lp.mean()[j];
        let mut b = TrigField::zero(dim);
        let mut v = TrigField::zero(dim);
        b.components[j].push(TrigTerm::constant(1.0));
        for (k, c) in lp.modes() {
            let kf = f64::from(k);
            let mut wave = vec![0; dim];
            wave[j] = k as i32;
            let decay = 4.0 * PI * PI * kf * kf;
            let phase = -2.0 * PI * kf * mean_j;
            for i in 0..dim {
                if i == j || c[i].norm() == 0.0 {
                    continue;
                }
                let (re, im) = (c[i].re, c[i].im);
                // X_s = 2 Re(2 pi i k c e^{i theta}), X_ss = 2 Re(-4 pi^2 k^2 c e^{i theta})
                b.components[i].push(TrigTerm {
                    cos: -4.0 * PI * kf * im,
                    sin: -4.0 * PI * kf * re,
                    decay,
                    omega: 0.0,
                    phase,
                    wave: wave.clone(),
                });
                v.components[i].push(TrigTerm {
                    cos: -8.0 * PI * PI * kf * kf * re,
                    sin: 8.0 * PI * PI * kf * kf * im,
                    decay,
                    omega: 0.0,
                    phase,
                    wave: wave.clone(),
                });
            }
        }
        Ok(Self {
            family: "graph-loop-exact".into(),
            seed: None,
            b,
            v,
        })
    }

    pub fn dim(&self) -> usize {
        self.b.dim
    }

    /// Highest spatial frequency in either field.
    pub fn max_wave(&self) -> i32 {
        self.b.max_wave().max(self.v.max_wave())
    }

    /// Largest `|omega| + decay` over all terms.
    pub fn max_rate(&self) -> f64 {
        self.b.max_rate().max(self.v.max_rate())
    }

    /// Same pair with both fields multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let scale = |f: &TrigField| TrigField {
            dim: f.dim,
            components: f
                .components
                .iter()
                .map(|terms| {
                    terms
                        .iter()
                        .map(|t| TrigTerm {
                            cos: t.cos * factor,
                            sin: t.sin * factor,
                            ..t.clone()
                        })
                        .collect()
                })
                .collect(),
        };
        Self {
            family: format!("{}*{}", self.family, factor),
            seed: self.seed,
            b: scale(&self.b),
            v: scale(&self.v),
        }
    }

    #[inline]
    pub fn evaluate(&self, t: f64, x: &Vector) -> TrialPoint {
        let (b, db_dt, grad_b) = self.b.eval(t, x);
        let (v, dv_dt, grad_v) = self.v.eval(t, x);
        TrialPoint {
            b,
            v,
            db_dt,
            dv_dt,
            grad_b,
            grad_v,
        }
    }
}
