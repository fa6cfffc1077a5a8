//! Orchestration of loop-side, grid-side, certification and identity runs.
//!
//! Each `run_*` returns its results in memory and, when given an output
//! directory, writes CSV files (first line `# scenario_hash=<hex>`), grid
//! snapshots and a `manifest.json`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use eulerheat::energy::{self, DualTestPair, EnergyError};
use eulerheat::entropy::{self, EntropyError, EntropyReport, IdentityPoint, R0Estimate, R0Sampling};
use eulerheat::fields::{self, FieldsError, GridFields};
use eulerheat::loops::{self, LoopEnsemble, LoopError};
use eulerheat::pde::{self, PdeConfig, PdeError, ReducedState};
use eulerheat::snapshot::{self, SnapshotError};
use eulerheat::trial::TrialFields;
use eulerheat::vector::Vector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{InitialB, InitialRho, Scenario, ScenarioError};

/// Same-loop pairs closer than this in `s` are ignored by the separation
/// diagnostic.
pub const SEPARATION_WINDOW: f64 = 0.25;

/// Runs whose loops come within this many kernel widths of each other are
/// labeled exploratory.
pub const SEPARATION_KERNEL_WIDTHS: f64 = 4.0;

/// Smallest loop separation over `times`, compared against
/// `SEPARATION_KERNEL_WIDTHS` kernel widths. `None` without an ensemble.
pub fn separation_check(scenario: &Scenario, times: &[f64]) -> Result<Option<SeparationCheck>, HarnessError> {
    let Some(ens) = scenario.build_ensemble()? else {
        return Ok(None);
    };
    let threshold = SEPARATION_KERNEL_WIDTHS * scenario.kernel.physical_sigma(&scenario.grid()?);
    let mut min = f64::INFINITY;
    for &t in times {
        min = min.min(loops::min_separation_excluding(
            &ens.evolve_exact(t),
            scenario.samples(),
            SEPARATION_WINDOW,
        )?);
    }
    Ok(Some(SeparationCheck {
        min_separation: min,
        threshold,
        exploratory: min <= threshold,
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationCheck {
    pub min_separation: f64,
    pub threshold: f64,
    /// Loops approach or cross; accuracy claims do not apply.
    pub exploratory: bool,
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Fields(#[from] FieldsError),
    #[error(transparent)]
    Loop(#[from] LoopError),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("scenario `{0}` has no loop ensemble")]
    NoEnsemble(String),
    #[error("scenario `{0}` has no [pde] section")]
    NoPde(String),
    #[error("identity checks are per loop; scenario has {0} loops")]
    NotSingleLoop(usize),
    #[error("refusing to compare outputs of different scenarios ({0} vs {1})")]
    HashMismatch(String, String),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Resolved parameters and produced files of one run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub scenario_hash: String,
    pub scenario: Scenario,
    pub versions: Vec<(String, String)>,
    pub threads: usize,
    pub outputs: Vec<String>,
}

fn versions() -> Vec<(String, String)> {
    vec![
        ("eulerheat".into(), eulerheat_version().into()),
        ("eulerheat-harness".into(), env!("CARGO_PKG_VERSION").into()),
    ]
}

fn eulerheat_version() -> &'static str {
    // both crates share the workspace version
    env!("CARGO_PKG_VERSION")
}

struct Output<'a> {
    dir: &'a Path,
    hash: String,
    files: Vec<String>,
}

impl<'a> Output<'a> {
    fn new(dir: &'a Path, hash: &str) -> Result<Self, HarnessError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(Self {
            dir,
            hash: hash.to_string(),
            files: Vec::new(),
        })
    }

    /// CSV with the provenance line, optional extra comment lines and rows.
    fn csv(
        &mut self,
        name: &str,
        comments: &[String],
        header: &[String],
        rows: impl IntoIterator<Item = Vec<String>>,
    ) -> Result<(), HarnessError> {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "# scenario_hash={}", self.hash).map_err(io_err(&path))?;
        for c in comments {
            writeln!(w, "# {c}").map_err(io_err(&path))?;
        }
        let mut cw = csv::Writer::from_writer(w);
        cw.write_record(header)?;
        for row in rows {
            cw.write_record(&row)?;
        }
        cw.flush().map_err(io_err(&path))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), HarnessError> {
        let path = self.dir.join(name);
        let text = serde_json::to_string_pretty(value)?;
        fs::write(&path, text + "\n").map_err(io_err(&path))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn snapshots(&mut self, trajectory: &[GridFields], every: usize) -> Result<(), HarnessError> {
        let sub = self.dir.join("snapshots");
        fs::create_dir_all(&sub).map_err(io_err(&sub))?;
        let last = trajectory.len().saturating_sub(1);
        for (k, f) in trajectory.iter().enumerate() {
            let keep = k == 0 || k == last || (every > 0 && k % every == 0);
            if !keep {
                continue;
            }
            let name = format!("snapshots/step_{k:06}.snap");
            let path = self.dir.join(&name);
            let file = File::create(&path).map_err(io_err(&path))?;
            let mut w = BufWriter::new(file);
            snapshot::write_snapshot(&mut w, f, &self.hash)?;
            w.flush().map_err(io_err(&path))?;
            self.files.push(name);
        }
        Ok(())
    }

    fn manifest(mut self, command: &str, scenario: &Scenario) -> Result<(), HarnessError> {
        self.files.push("manifest.json".into());
        let manifest = RunManifest {
            command: command.into(),
            scenario_hash: self.hash.clone(),
            scenario: scenario.clone(),
            versions: versions(),
            threads: rayon::current_num_threads(),
            outputs: self.files.clone(),
        };
        let path = self.dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(io_err(&path))?;
        Ok(())
    }
}

fn regime(sep: &SeparationCheck) -> String {
    format!(
        "regime={} min_separation={:e} threshold={:e}",
        if sep.exploratory { "exploratory" } else { "smooth" },
        sep.min_separation,
        sep.threshold
    )
}

fn fmt(x: f64) -> String {
    format!("{x:e}")
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt).unwrap_or_default()
}

/// Per-step diagnostics of a loop-side run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopDiagnostics {
    pub t: f64,
    pub mass: f64,
    pub circulation: Vec<f64>,
    /// Grid energy `int |B|^2 / (2 rho)`.
    pub energy: f64,
    /// Spectral ensemble energy `sum_a w_a int |X_s|^2 / 2`.
    pub loop_energy: f64,
    /// Dual lower bound over the zero and saturating pairs.
    pub dual_bound: f64,
    pub cs_lhs: f64,
    pub cs_rhs: f64,
    pub div_raw: f64,
    pub div_rel: f64,
    pub min_separation: f64,
    /// `(int |P|^2 rho^{-1})^{1/2}` and `(int |v|^2 rho)^{1/2}` for `v = P / rho`.
    pub metric_dual: f64,
    pub metric_primal: f64,
    /// `|dF/dt + int |P|^2 / rho|` (interior steps only).
    pub dissipation_residual: Option<f64>,
    pub dissipation_relative: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct LoopRun {
    pub scenario_hash: String,
    pub trajectory: Vec<GridFields>,
    pub diagnostics: Vec<LoopDiagnostics>,
    pub separation: SeparationCheck,
}

fn velocity_of(f: &GridFields) -> Vec<Vec<f64>> {
    let floor = f.rho_floor();
    f.p.iter()
        .map(|c| {
            c.iter()
                .zip(&f.rho)
                .map(|(&p, &r)| if r > floor { p / r } else { 0.0 })
                .collect()
        })
        .collect()
}

fn ensemble_of(scenario: &Scenario) -> Result<LoopEnsemble, HarnessError> {
    scenario
        .build_ensemble()?
        .ok_or_else(|| HarnessError::NoEnsemble(scenario.name.clone()))
}

/// Deposits the exactly evolved ensemble at every step.
pub fn loop_trajectory(scenario: &Scenario) -> Result<Vec<GridFields>, HarnessError> {
    let ens = ensemble_of(scenario)?;
    let grid = scenario.grid()?;
    scenario
        .times()
        .iter()
        .map(|&t| Ok(fields::deposit(&ens, t, grid, &scenario.kernel, scenario.samples())?))
        .collect()
}

/// Exact loop evolution, deposition and per-step diagnostics.
pub fn run_loops(scenario: &Scenario, out: Option<&Path>) -> Result<LoopRun, HarnessError> {
    let hash = scenario.hash();
    let ens = ensemble_of(scenario)?;
    let trajectory = loop_trajectory(scenario)?;
    let dissipation = if trajectory.len() >= 3 {
        energy::dissipation_identity(&trajectory)?
    } else {
        Vec::new()
    };
    let mut diagnostics = Vec::with_capacity(trajectory.len());
    for (k, f) in trajectory.iter().enumerate() {
        let at_t = ens.evolve_exact(f.t);
        let cs = fields::cauchy_schwarz_gap(&ens, f, f.t);
        let div = fields::divergence_residual(f);
        let pairs = [DualTestPair::zero(f.dim()), DualTestPair::saturating(f)];
        let norms = energy::metric_norms(&f.grid, &velocity_of(f), &f.p, &f.rho)?;
        let diss = k
            .checked_sub(1)
            .and_then(|i| dissipation.get(i))
            .filter(|_| k + 1 < trajectory.len());
        diagnostics.push(LoopDiagnostics {
            t: f.t,
            mass: f.mass(),
            circulation: f.circulation()[..f.dim()].to_vec(),
            energy: energy::energy(f)?,
            loop_energy: at_t.energy(),
            dual_bound: energy::energy_dual_lower_bound(f, &pairs)?,
            cs_lhs: cs.lhs,
            cs_rhs: cs.rhs,
            div_raw: div.raw,
            div_rel: div.relative,
            min_separation: loops::min_separation_excluding(&at_t, scenario.samples(), SEPARATION_WINDOW)?,
            metric_dual: norms.dual,
            metric_primal: norms.primal,
            dissipation_residual: diss.map(|d| d.residual),
            dissipation_relative: diss.map(|d| d.relative()),
        });
    }
    let threshold = SEPARATION_KERNEL_WIDTHS * scenario.kernel.physical_sigma(&scenario.grid()?);
    let min_sep = diagnostics
        .iter()
        .map(|d| d.min_separation)
        .fold(f64::INFINITY, f64::min);
    let separation = SeparationCheck {
        min_separation: min_sep,
        threshold,
        exploratory: min_sep <= threshold,
    };
    if let Some(dir) = out {
        let mut o = Output::new(dir, &hash)?;
        let dim = scenario.dim;
        let mut header: Vec<String> = vec!["t".into(), "mass".into()];
        header.extend((1..=dim).map(|k| format!("circulation_{k}")));
        header.extend(
            [
                "energy",
                "loop_energy",
                "dual_bound",
                "cs_lhs",
                "cs_rhs",
                "div_raw",
                "div_rel",
                "min_separation",
                "metric_primal",
                "metric_dual",
                "dissipation_residual",
                "dissipation_relative",
            ]
            .map(String::from),
        );
        let rows = diagnostics.iter().map(|d| {
            let mut r = vec![fmt(d.t), fmt(d.mass)];
            r.extend(d.circulation.iter().map(|&c| fmt(c)));
            r.extend([
                fmt(d.energy),
                fmt(d.loop_energy),
                fmt(d.dual_bound),
                fmt(d.cs_lhs),
                fmt(d.cs_rhs),
                fmt(d.div_raw),
                fmt(d.div_rel),
                fmt(d.min_separation),
                fmt(d.metric_primal),
                fmt(d.metric_dual),
                opt(d.dissipation_residual),
                opt(d.dissipation_relative),
            ]);
            r
        });
        o.csv("diagnostics.csv", &[regime(&separation)], &header, rows)?;
        o.snapshots(&trajectory, scenario.time.snapshot_every)?;
        o.manifest("evolve-loops", scenario)?;
    }
    Ok(LoopRun {
        scenario_hash: hash,
        trajectory,
        diagnostics,
        separation,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdeDiagnostics {
    pub t: f64,
    pub mass: Option<f64>,
    /// `int rho |b|^2 / 2` (requires a density).
    pub energy: Option<f64>,
    pub max_b: f64,
    /// Sup over the deposited support of `|b - B_loop / rho_loop|`.
    pub b_error_vs_loops: Option<f64>,
    pub induction_residual: Option<f64>,
    pub continuity_residual: Option<f64>,
    pub dissipation_residual: Option<f64>,
    pub dissipation_relative: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct PdeRun {
    pub scenario_hash: String,
    pub viscosity: f64,
    pub states: Vec<ReducedState>,
    /// `(rho, rho b, rho v)` per step when a density is evolved.
    pub trajectory: Option<Vec<GridFields>>,
    pub diagnostics: Vec<PdeDiagnostics>,
    pub separation: Option<SeparationCheck>,
}

fn initial_state(scenario: &Scenario) -> Result<ReducedState, HarnessError> {
    let spec = scenario
        .pde
        .as_ref()
        .ok_or_else(|| HarnessError::NoPde(scenario.name.clone()))?;
    let grid = scenario.grid()?;
    let ens = scenario.build_ensemble()?;
    let deposited = match (
        &ens,
        matches!(spec.b0, InitialB::Deposit) || matches!(spec.rho0, InitialRho::Deposit),
    ) {
        (Some(e), true) => Some(fields::deposit(e, 0.0, grid, &scenario.kernel, scenario.samples())?),
        _ => None,
    };
    let centers: Vec<Vector> = (0..grid.cells()).map(|c| grid.center(c)).collect();
    let dim = scenario.dim;
    let from_fn = |f: &dyn Fn(&Vector) -> Vector| -> Vec<Vec<f64>> {
        let vals: Vec<Vector> = centers.iter().map(f).collect();
        (0..dim).map(|k| vals.iter().map(|v| v[k]).collect()).collect()
    };
    let b = match &spec.b0 {
        InitialB::Deposit => deposited.as_ref().expect("deposited").reduced_b(),
        InitialB::GraphLoop => {
            let e = ens
                .as_ref()
                .ok_or_else(|| HarnessError::NoEnsemble(scenario.name.clone()))?;
            if e.len() != 1 {
                return Err(HarnessError::NotSingleLoop(e.len()));
            }
            let trial = TrialFields::from_graph_loop(&e.loops()[0]).map_err(|err| ScenarioError::Invalid {
                name: scenario.name.clone(),
                message: err.to_string(),
            })?;
            from_fn(&|x| trial.b.value(0.0, x))
        }
        InitialB::Constant { value } => {
            let v = eulerheat::vector::from_slice(value);
            from_fn(&|_| v)
        }
        InitialB::Trig { field } => from_fn(&|x| field.value(0.0, x)),
    };
    let rho = match &spec.rho0 {
        InitialRho::None => None,
        InitialRho::Deposit => Some(deposited.as_ref().expect("deposited").rho.clone()),
        InitialRho::Uniform => Some(vec![1.0; grid.cells()]),
        InitialRho::Sine { amplitude, axis } => Some(
            centers
                .iter()
                .map(|x| 1.0 + amplitude * (2.0 * std::f64::consts::PI * x[*axis]).sin())
                .collect(),
        ),
    };
    Ok(ReducedState::new(grid, 0.0, b, rho)?)
}

/// Explicit grid solver run with per-step diagnostics, started from the
/// scenario's analytic initial data.
pub fn run_pde(scenario: &Scenario, out: Option<&Path>) -> Result<PdeRun, HarnessError> {
    run_pde_from(scenario, None, out)
}

/// Reads a snapshot as initial data for [`run_pde_from`].
pub fn read_initial(path: &Path) -> Result<ReducedState, HarnessError> {
    let file = File::open(path).map_err(io_err(path))?;
    let snap = snapshot::read_snapshot(&mut BufReader::new(file))?;
    Ok(ReducedState::from_fields(&snap.fields))
}

/// Like [`run_pde`], optionally starting from a given state (e.g. a
/// deposited snapshot) on the scenario grid.
pub fn run_pde_from(
    scenario: &Scenario,
    initial: Option<ReducedState>,
    out: Option<&Path>,
) -> Result<PdeRun, HarnessError> {
    let hash = scenario.hash();
    let spec = scenario
        .pde
        .clone()
        .ok_or_else(|| HarnessError::NoPde(scenario.name.clone()))?;
    let config = PdeConfig {
        viscosity: spec.viscosity,
    };
    let initial = match initial {
        Some(mut s) => {
            scenario.grid()?.check_same(&s.grid)?;
            s.t = 0.0;
            s
        }
        None => initial_state(scenario)?,
    };
    let mut states = vec![initial];
    for k in 1..=scenario.steps() {
        let next = pde::advance(states.last().expect("nonempty"), scenario.time.dt, &config, spec.safety)?;
        let mut next = next;
        next.t = k as f64 * scenario.time.dt;
        states.push(next);
    }
    let trajectory: Option<Vec<GridFields>> = if states[0].rho.is_some() {
        Some(states.iter().map(|s| s.to_fields()).collect::<Result<_, _>>()?)
    } else {
        None
    };
    let ens = scenario.build_ensemble()?;
    let grid = scenario.grid()?;
    let residuals = match &trajectory {
        Some(tr) if tr.len() >= 3 => Some(pde::conservative_residual_series(tr)?),
        _ => None,
    };
    let dissipation = match &trajectory {
        Some(tr) if tr.len() >= 3 => Some(energy::dissipation_identity(tr)?),
        _ => None,
    };
    let last = states.len() - 1;
    let mut diagnostics = Vec::with_capacity(states.len());
    for (k, s) in states.iter().enumerate() {
        let f = trajectory.as_ref().map(|tr| &tr[k]);
        let b_error = match &ens {
            Some(e) => {
                let loops = fields::deposit(e, s.t, grid, &scenario.kernel, scenario.samples())?;
                let reduced = loops.reduced_b();
                Some(pde::sup_difference(&s.b, &reduced, loops.support().into_iter()))
            }
            None => None,
        };
        let interior = k > 0 && k < last;
        let res = residuals.as_ref().filter(|_| interior).map(|r| r[k - 1]);
        let diss = dissipation.as_ref().filter(|_| interior).map(|d| d[k - 1]);
        diagnostics.push(PdeDiagnostics {
            t: s.t,
            mass: f.map(GridFields::mass),
            energy: f.map(energy::energy).transpose()?,
            max_b: s.max_b2().sqrt(),
            b_error_vs_loops: b_error,
            induction_residual: res.map(|r| r.induction),
            continuity_residual: res.map(|r| r.continuity),
            dissipation_residual: diss.map(|d| d.residual),
            dissipation_relative: diss.map(|d| d.relative()),
        });
    }
    let separation = separation_check(scenario, &scenario.times())?;
    if let Some(dir) = out {
        let mut o = Output::new(dir, &hash)?;
        let header = [
            "t",
            "mass",
            "energy",
            "max_b",
            "b_error_vs_loops",
            "induction_residual",
            "continuity_residual",
            "dissipation_residual",
            "dissipation_relative",
        ]
        .map(String::from);
        let rows = diagnostics.iter().map(|d| {
            vec![
                fmt(d.t),
                opt(d.mass),
                opt(d.energy),
                fmt(d.max_b),
                opt(d.b_error_vs_loops),
                opt(d.induction_residual),
                opt(d.continuity_residual),
                opt(d.dissipation_residual),
                opt(d.dissipation_relative),
            ]
        });
        o.csv(
            "pde_diagnostics.csv",
            &[
                format!("viscosity={}", spec.viscosity),
                format!("safety={}", spec.safety),
                separation.as_ref().map_or_else(|| "regime=no-loops".into(), regime),
            ],
            &header,
            rows,
        )?;
        if let Some(tr) = &trajectory {
            o.snapshots(tr, scenario.time.snapshot_every)?;
        }
        o.manifest("run-pde", scenario)?;
    }
    Ok(PdeRun {
        scenario_hash: hash,
        viscosity: spec.viscosity,
        states,
        trajectory,
        diagnostics,
        separation,
    })
}

/// Certification outcome for one trial pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialVerdict {
    pub r0: R0Estimate,
    pub report: EntropyReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CertifyRun {
    pub scenario_hash: String,
    pub corrupt_b_factor: Option<f64>,
    pub verdicts: Vec<TrialVerdict>,
    pub pass: bool,
    pub min_margin: f64,
    pub separation: Option<SeparationCheck>,
}

/// `B -> factor B` at every snapshot with `t > t_0`.
pub fn corrupt(trajectory: &[GridFields], factor: f64) -> Vec<GridFields> {
    let t0 = trajectory.first().map_or(0.0, |f| f.t);
    trajectory
        .iter()
        .map(|f| {
            let mut g = f.clone();
            if f.t > t0 {
                for c in &mut g.b {
                    for x in c.iter_mut() {
                        *x *= factor;
                    }
                }
            }
            g
        })
        .collect()
}

/// Certifies a trajectory against every trial pair of the scenario.
pub fn run_certify(
    scenario: &Scenario,
    trajectory: &[GridFields],
    out: Option<&Path>,
) -> Result<CertifyRun, HarnessError> {
    let hash = scenario.hash();
    let corrupted;
    let trajectory = match scenario.certify.corrupt_b_factor {
        Some(f) => {
            corrupted = corrupt(trajectory, f);
            &corrupted[..]
        }
        None => trajectory,
    };
    let horizon = trajectory.last().map_or(0.0, |f| f.t);
    let mut verdicts = Vec::new();
    for trial in scenario.trials()? {
        let r0 = entropy::estimate_r0(&trial, horizon, &R0Sampling::for_trial(&trial, horizon));
        let r_values: Vec<f64> = scenario.certify.r_multiples.iter().map(|m| m * r0.value).collect();
        let e0 = entropy::relative_entropy(&trajectory[0], &trial)?;
        let tol = scenario.certify.tol_rel * e0.max(1.0);
        let report = entropy::certify(trajectory, &trial, &r_values, r0.value, tol)?;
        verdicts.push(TrialVerdict { r0, report });
    }
    let pass = verdicts.iter().all(|v| v.report.pass);
    let min_margin = verdicts
        .iter()
        .map(|v| v.report.min_margin())
        .fold(f64::INFINITY, f64::min);
    let run = CertifyRun {
        scenario_hash: hash.clone(),
        corrupt_b_factor: scenario.certify.corrupt_b_factor,
        verdicts,
        pass,
        min_margin,
        separation: separation_check(scenario, &trajectory.iter().map(|f| f.t).collect::<Vec<_>>())?,
    };
    if let Some(dir) = out {
        let mut o = Output::new(dir, &hash)?;
        let header = [
            "trial",
            "family",
            "seed",
            "r",
            "t",
            "entropy",
            "dissipation",
            "remainder",
            "margin",
        ]
        .map(String::from);
        let mut rows = Vec::new();
        for (i, v) in run.verdicts.iter().enumerate() {
            let rep = &v.report;
            for m in &rep.per_r {
                for k in 0..rep.times.len() {
                    rows.push(vec![
                        i.to_string(),
                        rep.family.clone(),
                        rep.seed.map(|s| s.to_string()).unwrap_or_default(),
                        fmt(m.r),
                        fmt(rep.times[k]),
                        fmt(rep.entropy[k]),
                        fmt(m.dissipation[k]),
                        fmt(rep.remainder[k]),
                        fmt(m.margin[k]),
                    ]);
                }
            }
        }
        o.csv("report.csv", &[], &header, rows)?;
        #[derive(Serialize)]
        struct Verdict<'a> {
            scenario_hash: &'a str,
            pass: bool,
            min_margin: f64,
            corrupt_b_factor: Option<f64>,
            separation: Option<SeparationCheck>,
            trials: Vec<TrialSummary<'a>>,
        }
        #[derive(Serialize)]
        struct TrialSummary<'a> {
            family: &'a str,
            seed: Option<u64>,
            r0: &'a R0Estimate,
            r_values: Vec<f64>,
            tol: f64,
            min_margin: f64,
            pass: bool,
            trial: TrialFields,
        }
        let trials = scenario.trials()?;
        let verdict = Verdict {
            scenario_hash: &hash,
            pass: run.pass,
            min_margin: run.min_margin,
            corrupt_b_factor: run.corrupt_b_factor,
            separation: run.separation,
            trials: run
                .verdicts
                .iter()
                .zip(trials)
                .map(|(v, trial)| TrialSummary {
                    family: &v.report.family,
                    seed: v.report.seed,
                    r0: &v.r0,
                    r_values: v.report.per_r.iter().map(|m| m.r).collect(),
                    tol: v.report.tol,
                    min_margin: v.report.min_margin(),
                    pass: v.report.pass,
                    trial,
                })
                .collect(),
        };
        o.json("verdict.json", &verdict)?;
        o.manifest("certify", scenario)?;
    }
    Ok(run)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IdentityRun {
    pub scenario_hash: String,
    /// `(trial family, seed, points)` per trial pair.
    pub series: Vec<(String, Option<u64>, Vec<IdentityPoint>)>,
}

impl IdentityRun {
    pub fn max_residual(&self) -> f64 {
        self.series
            .iter()
            .flat_map(|(_, _, p)| p.iter().map(|x| x.residual))
            .fold(0.0, f64::max)
    }

    pub fn max_component_residual(&self) -> f64 {
        self.series
            .iter()
            .flat_map(|(_, _, p)| p.iter().map(IdentityPoint::component_residual))
            .fold(0.0, f64::max)
    }
}

/// Per-loop entropy identity along the exact evolution of a single loop.
pub fn run_identity(scenario: &Scenario, out: Option<&Path>) -> Result<IdentityRun, HarnessError> {
    let hash = scenario.hash();
    let ens = ensemble_of(scenario)?;
    if ens.len() != 1 {
        return Err(HarnessError::NotSingleLoop(ens.len()));
    }
    let lp = &ens.loops()[0];
    let spec = &scenario.identity;
    let n = spec.times.max(1);
    let times: Vec<f64> = (0..n)
        .map(|k| {
            if n == 1 {
                0.0
            } else {
                scenario.time.horizon * k as f64 / (n - 1) as f64
            }
        })
        .collect();
    let mut series = Vec::new();
    for trial in scenario.trials()? {
        let pts = entropy::loop_identity_check(lp, &times, &trial, spec.samples, spec.fd_dt)?;
        series.push((trial.family.clone(), trial.seed, pts));
    }
    if let Some(dir) = out {
        let mut o = Output::new(dir, &hash)?;
        let header = [
            "family",
            "seed",
            "t",
            "entropy",
            "de_dt",
            "dissipation",
            "remainder",
            "residual",
            "de1_fd",
            "de1_closed",
            "de1_heat",
            "de2_fd",
            "de2_closed",
            "de3_fd",
            "de3_closed",
        ]
        .map(String::from);
        let rows = series.iter().flat_map(|(fam, seed, pts)| {
            pts.iter().map(move |p| {
                vec![
                    fam.clone(),
                    seed.map(|s| s.to_string()).unwrap_or_default(),
                    fmt(p.t),
                    fmt(p.entropy),
                    fmt(p.de_dt),
                    fmt(p.d0),
                    fmt(p.remainder),
                    fmt(p.residual),
                    fmt(p.de1_fd),
                    fmt(p.de1_closed),
                    fmt(p.de1_heat),
                    fmt(p.de2_fd),
                    fmt(p.de2_closed),
                    fmt(p.de3_fd),
                    fmt(p.de3_closed),
                ]
            })
        });
        o.csv("identity.csv", &[], &header, rows)?;
        o.manifest("identity", scenario)?;
    }
    Ok(IdentityRun {
        scenario_hash: hash,
        series,
    })
}

/// A harness CSV: provenance hash, header and rows.
#[derive(Clone, Debug, PartialEq)]
pub struct HarnessCsv {
    pub scenario_hash: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn read_harness_csv(path: &Path) -> Result<HarnessCsv, HarnessError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(io_err(path))?;
    let scenario_hash = first
        .trim_end()
        .strip_prefix("# scenario_hash=")
        .ok_or_else(|| HarnessError::Format {
            path: path.to_path_buf(),
            message: "missing `# scenario_hash=` line".into(),
        })?
        .to_string();
    let mut rest = String::new();
    for line in reader.lines() {
        let line = line.map_err(io_err(path))?;
        if !line.starts_with('#') {
            rest.push_str(&line);
            rest.push('\n');
        }
    }
    let mut r = csv::Reader::from_reader(rest.as_bytes());
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
        .collect::<Result<_, _>>()?;
    Ok(HarnessCsv {
        scenario_hash,
        header,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub scenario_hash: String,
    pub rows: usize,
    /// Max absolute difference per numeric column.
    pub max_abs_diff: Vec<(String, f64)>,
    /// Text cells are identical and every numeric cell is bit-identical.
    pub identical: bool,
}

/// Column-wise comparison of two CSVs from the same scenario.
pub fn compare(a: &Path, b: &Path) -> Result<CompareReport, HarnessError> {
    let x = read_harness_csv(a)?;
    let y = read_harness_csv(b)?;
    if x.scenario_hash != y.scenario_hash {
        return Err(HarnessError::HashMismatch(x.scenario_hash, y.scenario_hash));
    }
    if x.header != y.header || x.rows.len() != y.rows.len() {
        return Err(HarnessError::Format {
            path: b.to_path_buf(),
            message: "column layout or row count differs".into(),
        });
    }
    let mut identical = true;
    let mut diffs: Vec<(String, f64)> = x.header.iter().map(|h| (h.clone(), 0.0)).collect();
    for (ra, rb) in x.rows.iter().zip(&y.rows) {
        for (k, (ca, cb)) in ra.iter().zip(rb).enumerate() {
            if ca != cb {
                identical = false;
            }
            if let (Ok(va), Ok(vb)) = (ca.parse::<f64>(), cb.parse::<f64>()) {
                let d = (va - vb).abs();
                if d > diffs[k].1 || d.is_nan() {
                    diffs[k].1 = d;
                }
            }
        }
    }
    Ok(CompareReport {
        scenario_hash: x.scenario_hash,
        rows: x.rows.len(),
        max_abs_diff: diffs,
        identical,
    })
}

/// Reads every `*.snap` file of a directory, sorted by name, and checks that
/// each was produced under `expected_hash`.
pub fn load_snapshots(dir: &Path, expected_hash: &str) -> Result<Vec<GridFields>, HarnessError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "snap"))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let file = File::open(&p).map_err(io_err(&p))?;
        let snap = snapshot::read_snapshot(&mut BufReader::new(file))?;
        if snap.scenario != expected_hash {
            return Err(HarnessError::HashMismatch(expected_hash.into(), snap.scenario));
        }
        out.push(snap.fields);
    }
    if out.is_empty() {
        return Err(HarnessError::Format {
            path: dir.to_path_buf(),
            message: "no snapshot files".into(),
        });
    }
    Ok(out)
}
