//! Scenario files: one TOML document per run configuration.
//!
//! Every optional knob has a default that is written back out in the
//! resolved form stored in the manifest, so the manifest alone determines
//! a run.

use std::path::Path;

use eulerheat::fields::{required_samples, DepositionKernel, PeriodicGrid};
use eulerheat::loops::{random_ensemble, LoopEnsemble, LoopSpec, RandomEnsembleSpec, WindingLoop};
use eulerheat::trial::{RandomTrialSpec, TrialFields, TrigField};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown builtin scenario `{0}` (known: {1})")]
    UnknownBuiltin(String, String),
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("invalid scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid manifest {path}: {message}")]
    Manifest { path: String, message: String },
    #[error("scenario `{name}`: {message}")]
    Invalid { name: String, message: String },
}

const BUILTINS: &[(&str, &str)] = &[
    ("winding-line", include_str!("../scenarios/winding-line.toml")),
    ("graph-mode1", include_str!("../scenarios/graph-mode1.toml")),
    ("graph-mode1-exact", include_str!("../scenarios/graph-mode1-exact.toml")),
    (
        "graph-mode1-corrupted",
        include_str!("../scenarios/graph-mode1-corrupted.toml"),
    ),
    ("graph-mode1-pde", include_str!("../scenarios/graph-mode1-pde.toml")),
    ("two-lines-opposed", include_str!("../scenarios/two-lines-opposed.toml")),
    (
        "two-lines-parallel",
        include_str!("../scenarios/two-lines-parallel.toml"),
    ),
    (
        "random-ensemble-seeded",
        include_str!("../scenarios/random-ensemble-seeded.toml"),
    ),
    ("constant-b", include_str!("../scenarios/constant-b.toml")),
];

pub fn builtin_names() -> Vec<&'static str> {
    BUILTINS.iter().map(|(n, _)| *n).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    #[serde(default)]
    pub loops: Vec<LoopSpec>,
    /// Uniform when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random: Option<RandomEnsembleSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSpec {
    pub horizon: f64,
    pub dt: f64,
    /// Loop samples per loop; defaults to `max(4K + 4, 4n)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    /// Write a grid snapshot every this many steps (0: first and last only).
    #[serde(default)]
    pub snapshot_every: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrialFamily {
    Zero,
    Constant,
    RandomTrig,
    /// The exact smooth solution generated by the scenario's single graph loop.
    GraphLoopExact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialSpec {
    pub family: TrialFamily,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub random: RandomTrialSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constant: Option<Vec<f64>>,
}

impl Default for TrialSpec {
    fn default() -> Self {
        Self {
            family: TrialFamily::Zero,
            seeds: Vec::new(),
            random: RandomTrialSpec::default(),
            constant: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifySpec {
    /// `r` values as multiples of the estimated `r0`.
    pub r_multiples: Vec<f64>,
    /// Pass threshold: `margin >= -tol_rel * max(1, E(0))`.
    pub tol_rel: f64,
    /// Multiplies `B` at every `t > 0` before certification.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrupt_b_factor: Option<f64>,
}

impl Default for CertifySpec {
    fn default() -> Self {
        Self {
            r_multiples: vec![1.0, 2.0, 4.0],
            tol_rel: 1e-6,
            corrupt_b_factor: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialB {
    /// `B / rho` of the deposited ensemble at `t = 0` (zero in vacuum).
    Deposit,
    /// Exact tangent field of the single graph loop.
    GraphLoop,
    Constant {
        value: Vec<f64>,
    },
    Trig {
        field: TrigField,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialRho {
    None,
    Deposit,
    Uniform,
    /// `1 + amplitude sin(2 pi x_axis)`.
    Sine {
        amplitude: f64,
        axis: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeSpec {
    pub b0: InitialB,
    pub rho0: InitialRho,
    #[serde(default)]
    pub viscosity: f64,
    /// Sub-steps use at most `safety * stable_dt`.
    #[serde(default = "default_safety")]
    pub safety: f64,
}

fn default_safety() -> f64 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentitySpec {
    /// Loop samples for the `s`-integrals.
    pub samples: usize,
    /// Step of the centred time difference.
    pub fd_dt: f64,
    /// Number of evaluation times spread over `[0, horizon]`.
    pub times: usize,
}

impl Default for IdentitySpec {
    fn default() -> Self {
        Self {
            samples: 512,
            fd_dt: 1e-4,
            times: 11,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleSpec>,
    pub grid: GridSpec,
    #[serde(default)]
    pub kernel: DepositionKernel,
    pub time: TimeSpec,
    #[serde(default)]
    pub trial: TrialSpec,
    #[serde(default)]
    pub certify: CertifySpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pde: Option<PdeSpec>,
    #[serde(default)]
    pub identity: IdentitySpec,
}

/// Command-line overrides applied before validation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub n: Option<usize>,
    pub dt: Option<f64>,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    pub corrupt_b_factor: Option<f64>,
    pub viscosity: Option<f64>,
    pub snapshot_every: Option<usize>,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        Ok(toml::from_str(text)?)
    }

    pub fn builtin(name: &str) -> Result<Self, ScenarioError> {
        let text = BUILTINS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| ScenarioError::UnknownBuiltin(name.into(), builtin_names().join(", ")))?;
        Self::from_toml(text)
    }

    /// A path to a TOML file or to a run's `manifest.json`, or else the name
    /// of a builtin scenario.
    pub fn load(path_or_name: &str) -> Result<Self, ScenarioError> {
        let path = Path::new(path_or_name);
        if path.is_file() {
            let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Read {
                path: path_or_name.into(),
                source,
            })?;
            if path.extension().is_some_and(|e| e == "json") {
                return Self::from_manifest(&text).map_err(|message| ScenarioError::Manifest {
                    path: path_or_name.into(),
                    message,
                });
            }
            Self::from_toml(&text)
        } else {
            Self::builtin(path_or_name)
        }
    }

    fn from_manifest(text: &str) -> Result<Self, String> {
        let mut value: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let scenario = value.get_mut("scenario").ok_or("no `scenario` entry")?.take();
        serde_json::from_value(scenario).map_err(|e| e.to_string())
    }

    fn invalid(&self, message: impl Into<String>) -> ScenarioError {
        ScenarioError::Invalid {
            name: self.name.clone(),
            message: message.into(),
        }
    }

    /// Applies overrides, fills defaults and checks every precondition.
    pub fn resolve(mut self, overrides: &Overrides) -> Result<Self, ScenarioError> {
        if let Some(n) = overrides.n {
            self.grid.n = n;
        }
        if let Some(dt) = overrides.dt {
            self.time.dt = dt;
        }
        if let Some(m) = overrides.samples {
            self.time.samples = Some(m);
        }
        if let Some(seed) = overrides.seed {
            self.trial.seeds = vec![seed];
            if let Some(r) = self.ensemble.as_mut().and_then(|e| e.random.as_mut()) {
                r.seed = seed;
            }
        }
        if overrides.corrupt_b_factor.is_some() {
            self.certify.corrupt_b_factor = overrides.corrupt_b_factor;
        }
        if let Some(every) = overrides.snapshot_every {
            self.time.snapshot_every = every;
        }
        if let Some(nu) = overrides.viscosity {
            match self.pde.as_mut() {
                Some(pde) => pde.viscosity = nu,
                None => return Err(self.invalid("viscosity override needs a [pde] section")),
            }
        }
        let grid = self.grid().map_err(|e| self.invalid(e.to_string()))?;
        self.kernel.validate(&grid).map_err(|e| self.invalid(e.to_string()))?;
        if !(self.time.dt > 0.0) || !(self.time.horizon >= 0.0) {
            return Err(self.invalid("time.dt must be positive and time.horizon nonnegative"));
        }
        let steps = self.time.horizon / self.time.dt;
        if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
            return Err(self.invalid(format!(
                "time.horizon {} is not a multiple of time.dt {}",
                self.time.horizon, self.time.dt
            )));
        }
        if let Some(ens) = self.ensemble.as_ref() {
            if ens.random.is_some() == !ens.loops.is_empty() {
                return Err(self.invalid("ensemble needs exactly one of `loops` or `random`"));
            }
            let built = self.build_ensemble()?.expect("ensemble present");
            let required = required_samples(built.max_mode(), &grid);
            match self.time.samples {
                None => self.time.samples = Some(required),
                Some(m) if m < required => {
                    return Err(self.invalid(format!("time.samples = {m} is below the required {required}")))
                }
                Some(_) => {}
            }
        }
        if self.trial.family == TrialFamily::RandomTrig && self.trial.seeds.is_empty() {
            return Err(self.invalid("random-trig trials need at least one seed"));
        }
        if self.trial.family == TrialFamily::Constant
            && self.trial.constant.as_ref().is_none_or(|c| c.len() != self.dim)
        {
            return Err(self.invalid(format!("constant trial needs a {}-vector `constant`", self.dim)));
        }
        if self.certify.r_multiples.iter().any(|&m| !(m >= 1.0)) {
            return Err(self.invalid("certify.r_multiples must all be >= 1 (r below r0 is not certified)"));
        }
        if let Some(pde) = &self.pde {
            if !(pde.viscosity >= 0.0) || !(pde.safety > 0.0 && pde.safety <= 1.0) {
                return Err(self.invalid("pde.viscosity must be >= 0 and pde.safety in (0, 1]"));
            }
            let needs_ensemble =
                matches!(pde.b0, InitialB::Deposit | InitialB::GraphLoop) || matches!(pde.rho0, InitialRho::Deposit);
            if needs_ensemble && self.ensemble.is_none() {
                return Err(self.invalid("pde initial data refers to an ensemble, but none is given"));
            }
        }
        self.trials()?;
        Ok(self)
    }

    pub fn grid(&self) -> Result<PeriodicGrid, eulerheat::FieldsError> {
        PeriodicGrid::new(self.dim, self.grid.n)
    }

    pub fn steps(&self) -> usize {
        (self.time.horizon / self.time.dt).round() as usize
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps()).map(|k| k as f64 * self.time.dt).collect()
    }

    pub fn samples(&self) -> usize {
        self.time.samples.unwrap_or(0)
    }

    pub fn build_ensemble(&self) -> Result<Option<LoopEnsemble>, ScenarioError> {
        let Some(spec) = &self.ensemble else {
            return Ok(None);
        };
        let ens = if let Some(random) = &spec.random {
            random_ensemble(self.dim, random)
        } else {
            let loops: Vec<WindingLoop> = spec
                .loops
                .iter()
                .map(WindingLoop::try_from)
                .collect::<Result<_, _>>()
                .map_err(|e| self.invalid(e.to_string()))?;
            if let Some(l) = loops.iter().find(|l| l.dim() != self.dim) {
                return Err(self.invalid(format!("loop of dimension {} in a {}-d scenario", l.dim(), self.dim)));
            }
            match &spec.weights {
                Some(w) => LoopEnsemble::new(loops, w.clone()),
                None => LoopEnsemble::uniform(loops),
            }
        };
        ens.map(Some).map_err(|e| self.invalid(e.to_string()))
    }

    /// The trial pairs named by the scenario, in seed order.
    pub fn trials(&self) -> Result<Vec<TrialFields>, ScenarioError> {
        Ok(match self.trial.family {
            TrialFamily::Zero => vec![TrialFields::zero(self.dim)],
            TrialFamily::Constant => vec![TrialFields::constant(
                self.trial.constant.as_deref().unwrap_or(&vec![0.0; self.dim]),
            )],
            TrialFamily::RandomTrig => self
                .trial
                .seeds
                .iter()
                .map(|&s| TrialFields::random(self.dim, s, &self.trial.random))
                .collect(),
            TrialFamily::GraphLoopExact => {
                let ens = self
                    .build_ensemble()?
                    .ok_or_else(|| self.invalid("graph-loop-exact trial needs an ensemble"))?;
                if ens.len() != 1 {
                    return Err(self.invalid("graph-loop-exact trial needs a single-loop ensemble"));
                }
                vec![TrialFields::from_graph_loop(&ens.loops()[0]).map_err(|e| self.invalid(e.to_string()))?]
            }
        })
    }

    /// Canonical JSON of the resolved scenario.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("scenario serialises")
    }

    /// SHA-256 of [`Scenario::canonical_json`], hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}
