//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::Instant;

use eulerheat::entropy::{self, R0Sampling};
use eulerheat::fields::{self, DepositionKernel, GridFields, PeriodicGrid};
use eulerheat::loops::{self, LoopEnsemble, WindingLoop};
use eulerheat::trial::TrialFields;
use eulerheat::{energy, vector};
use eulerheat_harness::run::{self, CertifyRun, PdeRun};
use eulerheat_harness::{Overrides, Scenario};

type Outcome = Result<(bool, String), String>;

fn scenario(name: &str) -> Scenario {
    Scenario::builtin(name)
        .and_then(|s| s.resolve(&Overrides::default()))
        .unwrap_or_else(|e| panic!("builtin `{name}`: {e}"))
}

fn single_loop(s: &Scenario) -> WindingLoop {
    s.build_ensemble().unwrap().expect("ensemble").loops()[0].clone()
}

fn sup_distance(a: &loops::LoopSamples, b: &loops::LoopSamples) -> f64 {
    a.positions
        .iter()
        .zip(&b.positions)
        .map(|(x, y)| vector::torus_distance(x, y, a.dim))
        .fold(0.0, f64::max)
}

/// Shared expensive runs.
struct Fixture {
    graph: Scenario,
    graph_traj: Vec<GridFields>,
    pde: PdeRun,
}

fn integrability(fx: &Fixture) -> Outcome {
    let start = Instant::now();
    let lp = single_loop(&fx.graph);
    let (dt, t) = (1e-6f64, 0.01f64);
    let steps = (t / dt).round() as usize;
    let err = |m: usize| -> Result<f64, String> {
        let fd = loops::evolve_fd(&lp.sample(m).map_err(|e| e.to_string())?, dt, steps).map_err(|e| e.to_string())?;
        let exact = lp.evolve_exact(t).sample(m).map_err(|e| e.to_string())?;
        Ok(sup_distance(&fd, &exact))
    };
    let coarse = err(256)?;
    let fine = err(512)?;
    let ratio = coarse / fine;
    let secs = start.elapsed().as_secs_f64();
    Ok((
        coarse <= 1e-4 && (3.5..=4.5).contains(&ratio) && secs < 10.0,
        format!("sup error {coarse:.3e} at M=256, refinement ratio {ratio:.3}, {secs:.2}s"),
    ))
}

fn energy_decay(fx: &Fixture) -> Outcome {
    let lp = single_loop(&fx.graph);
    let rate = 8.0 * PI * PI;
    let e0 = lp.energy() - 0.5;
    let exact_err = fx
        .graph
        .times()
        .iter()
        .map(|&t| ((lp.evolve_exact(t).energy() - 0.5) / e0 - (-rate * t).exp()).abs())
        .fold(0.0, f64::max);
    // least-squares slope of ln(F - 1/2)
    let pts: Vec<(f64, f64)> = fx
        .graph_traj
        .iter()
        .map(|f| Ok((f.t, (energy::energy(f).map_err(|e| e.to_string())? - 0.5).ln())))
        .collect::<Result<_, String>>()?;
    let n = pts.len() as f64;
    let (mt, my) = (
        pts.iter().map(|p| p.0).sum::<f64>() / n,
        pts.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let slope =
        pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mt).powi(2)).sum::<f64>();
    let rel = (-slope / rate - 1.0).abs();
    Ok((
        exact_err <= 1e-10 && rel <= 0.02,
        format!(
            "exact ratio error {exact_err:.2e}, fitted grid rate {:.4} vs {rate:.4} ({:.2}%)",
            -slope,
            100.0 * rel
        ),
    ))
}

fn dissipation(fx: &Fixture) -> Outcome {
    let loop_rel = energy::dissipation_identity(&fx.graph_traj)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|p| p.relative())
        .fold(0.0, f64::max);
    let pde_rel = fx
        .pde
        .diagnostics
        .iter()
        .filter_map(|d| d.dissipation_relative)
        .fold(0.0, f64::max);
    Ok((
        loop_rel <= 0.05 && pde_rel <= 0.05,
        format!("max relative residual: deposited {loop_rel:.2e}, grid solver {pde_rel:.2e}"),
    ))
}

fn identity(fx: &Fixture) -> Outcome {
    let lp = single_loop(&fx.graph);
    let trials = fx.graph.trials().map_err(|e| e.to_string())?;
    let times: Vec<f64> = (0..11).map(|k| 0.005 * k as f64).collect();
    let check = |trial: &TrialFields, m: usize, dt: f64| {
        entropy::loop_identity_check(&lp, &times, trial, m, dt).map_err(|e| e.to_string())
    };
    let (mut worst, mut worst_comp) = (0.0f64, 0.0f64);
    let (mut sum_dt, mut sum_dt2) = (0.0, 0.0);
    let mut spectral_ok = true;
    let mut worst_m_ratio = f64::INFINITY;
    for trial in &trials {
        let pts = check(trial, 512, 1e-4)?;
        worst = pts.iter().map(|p| p.residual).fold(worst, f64::max);
        worst_comp = pts.iter().map(|p| p.component_residual()).fold(worst_comp, f64::max);
        sum_dt += pts.iter().map(|p| p.residual).sum::<f64>();
        sum_dt2 += check(trial, 512, 2e-4)?.iter().map(|p| p.residual).sum::<f64>();
        // quadrature error of the identity terms against a dense reference;
        // the trapezoidal rule on smooth periodic integrands converges spectrally
        let terms = |m: usize| -> Result<Vec<f64>, String> {
            let mut v = Vec::new();
            for &t in &times {
                let x = entropy::loop_entropy_terms(&lp.evolve_exact(t), t, trial, m).map_err(|e| e.to_string())?;
                v.extend([x.entropy, x.d0, x.remainder]);
            }
            Ok(v)
        };
        let reference = terms(4096)?;
        let scale = reference.iter().fold(1.0f64, |a, x| a.max(x.abs()));
        let errs: Vec<f64> = [8, 12, 16, 24, 32]
            .iter()
            .map(|&m| terms(m).map(|v| v.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)))
            .collect::<Result<_, _>>()?;
        for w in errs.windows(2) {
            let floor = 1e-12 * scale;
            if w[1] > floor {
                worst_m_ratio = worst_m_ratio.min(w[0] / w[1]);
                spectral_ok &= w[1] <= w[0] / 16.0;
            }
        }
    }
    let dt_ratio = sum_dt2 / sum_dt;
    Ok((
        worst <= 1e-3 && worst_comp <= 1e-3 && (3.5..=4.5).contains(&dt_ratio) && spectral_ok,
        format!(
            "max residual {worst:.2e}, component {worst_comp:.2e}, dt-halving ratio {dt_ratio:.3}, M-doubling ratio >= {}",
            if worst_m_ratio.is_finite() { format!("{worst_m_ratio:.1}") } else { "roundoff".into() }
        ),
    ))
}

fn certify_loops(name: &str) -> Result<(Scenario, CertifyRun), String> {
    let s = scenario(name);
    let traj = run::loop_trajectory(&s).map_err(|e| e.to_string())?;
    let r = run::run_certify(&s, &traj, None).map_err(|e| e.to_string())?;
    Ok((s, r))
}

fn certify_graph(fx: &Fixture) -> Result<CertifyRun, String> {
    run::run_certify(&fx.graph, &fx.graph_traj, None).map_err(|e| e.to_string())
}

fn certificate_passes(fx: &Fixture) -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    let graph = certify_graph(fx)?;
    let (_, parallel) = certify_loops("two-lines-parallel")?;
    for (name, r) in [("graph-mode1", &graph), ("two-lines-parallel", &parallel)] {
        let seeds = r.verdicts.len();
        let multiples_ok = r.verdicts.iter().all(|v| {
            let rs: Vec<f64> = v.report.per_r.iter().map(|m| m.r / v.r0.value).collect();
            rs.len() == 3 && [1.0, 2.0, 4.0].iter().zip(&rs).all(|(a, b)| (a - b).abs() < 1e-12)
        });
        let separated = r.separation.is_some_and(|s| !s.exploratory);
        ok &= r.pass && seeds == 10 && multiples_ok && separated;
        detail.push(format!("{name} min margin {:+.2e} over {seeds} seeds", r.min_margin));
    }
    let (_, line) = certify_loops("winding-line")?;
    let line_dev = line
        .verdicts
        .iter()
        .flat_map(|v| v.report.per_r.iter().flat_map(|m| m.margin.iter()))
        .fold(0.0f64, |a, m| a.max(m.abs()));
    ok &= line.pass && line_dev <= 1e-10;
    detail.push(format!("winding-line |margin| <= {line_dev:.1e}"));
    Ok((ok, detail.join(", ")))
}

fn weak_strong_sensitivity() -> Outcome {
    let (_, exact) = certify_loops("graph-mode1-exact")?;
    let max_e = exact
        .verdicts
        .iter()
        .flat_map(|v| v.report.entropy.iter())
        .fold(0.0f64, |a, &e| a.max(e));
    let horizon = exact.verdicts[0].report.times.last().copied().unwrap_or(0.0);
    let (_, corrupted) = certify_loops("graph-mode1-corrupted")?;
    Ok((
        exact.pass && max_e <= 1e-3 && horizon >= 0.05 - 1e-12 && !corrupted.pass && corrupted.min_margin < 0.0,
        format!(
            "exact trial: max E {max_e:.2e}, margin {:+.2e}; corrupted: margin {:+.2e} ({})",
            exact.min_margin,
            corrupted.min_margin,
            if corrupted.pass { "PASS" } else { "FAIL" }
        ),
    ))
}

fn structure(fx: &Fixture) -> Outcome {
    let mut worst_mass = 0.0f64;
    let mut worst_circ = 0.0f64;
    let mut cs_ok = true;
    let names = [
        "winding-line",
        "two-lines-opposed",
        "two-lines-parallel",
        "random-ensemble-seeded",
        "graph-mode1",
    ];
    for name in names {
        let s = scenario(name);
        let ens = s.build_ensemble().unwrap().expect("ensemble");
        let owned;
        let traj = if name == "graph-mode1" {
            &fx.graph_traj
        } else {
            owned = run::loop_trajectory(&s).map_err(|e| e.to_string())?;
            &owned
        };
        let target = ens.circulation();
        for f in traj {
            worst_mass = worst_mass.max((f.mass() - 1.0).abs());
            let c = f.circulation();
            for k in 0..s.dim {
                worst_circ = worst_circ.max((c[k] - target[k]).abs());
            }
            let cs = fields::cauchy_schwarz_gap(&ens, f, f.t);
            cs_ok &= cs.lhs <= cs.rhs * (1.0 + 1e-12);
        }
    }

    let lp = single_loop(&fx.graph);
    let ens = LoopEnsemble::single(lp);
    let div = |n: usize| -> Result<f64, String> {
        let grid = PeriodicGrid::new(2, n).map_err(|e| e.to_string())?;
        let kernel = DepositionKernel::gaussian(1.5 * n as f64 / 64.0);
        let f = fields::deposit(&ens, 0.0, grid, &kernel, 4096).map_err(|e| e.to_string())?;
        Ok(fields::divergence_residual(&f).raw)
    };
    let div_ratio = div(64)? / div(128)?;
    let gap = |n: usize| -> Result<f64, String> {
        let grid = PeriodicGrid::new(2, n).map_err(|e| e.to_string())?;
        let f = fields::deposit(&ens, 0.0, grid, &DepositionKernel::bspline(1.5), 4096).map_err(|e| e.to_string())?;
        Ok(fields::cauchy_schwarz_gap(&ens, &f, 0.0).gap())
    };
    let (g64, g128) = (gap(64)?, gap(128)?);
    let gap_ratio = g64 / g128;
    Ok((
        worst_mass <= 1e-12 && worst_circ <= 1e-12 && (3.5..=4.5).contains(&div_ratio) && cs_ok && gap_ratio >= 3.5,
        format!(
            "mass err {worst_mass:.1e}, circulation err {worst_circ:.1e}, div ratio {div_ratio:.3}, CS holds: {cs_ok}, saturation gap {g128:.2e} (ratio {gap_ratio:.2})"
        ),
    ))
}

fn cross_solver(fx: &Fixture) -> Outcome {
    let last = fx.pde.diagnostics.last().ok_or("empty grid run")?;
    let err = last.b_error_vs_loops.ok_or("no loop reference")?;
    let sep = fx.pde.separation.ok_or("no separation check")?;
    Ok((
        err <= 5e-3 && !sep.exploratory && (last.t - 0.05).abs() < 1e-12,
        format!(
            "sup |b - b_loops| {err:.2e} at t={}, min separation {:.3} > {:.3}",
            last.t, sep.min_separation, sep.threshold
        ),
    ))
}

fn r0_tightness(fx: &Fixture) -> Outcome {
    let mut trials: Vec<(TrialFields, f64)> = Vec::new();
    let horizon = fx.graph.time.horizon;
    for t in fx.graph.trials().map_err(|e| e.to_string())? {
        trials.push((t, horizon));
    }
    for name in ["graph-mode1-exact", "winding-line"] {
        let s = scenario(name);
        for t in s.trials().map_err(|e| e.to_string())? {
            trials.push((t, s.time.horizon));
        }
    }
    let mut ok = true;
    let (mut min_at, mut max_below) = (f64::INFINITY, f64::NEG_INFINITY);
    for (trial, horizon) in &trials {
        let sampling = R0Sampling::for_trial(trial, *horizon);
        let r0 = entropy::estimate_r0(trial, *horizon, &sampling);
        let at = entropy::sampled_lambda_min(trial, *horizon, &sampling, r0.value);
        let below = entropy::sampled_lambda_min(trial, *horizon, &sampling, 0.9 * r0.value);
        ok &= at >= 1.0 && below < 1.0;
        min_at = min_at.min(at);
        max_below = max_below.max(below);
    }
    Ok((
        ok,
        format!(
            "{} trials: min lambda_min(Q_r0) {min_at:.4}, max lambda_min(Q_0.9r0) {max_below:.4}",
            trials.len()
        ),
    ))
}

fn main() -> ExitCode {
    let start = Instant::now();
    let graph = scenario("graph-mode1");
    let graph_traj = run::loop_trajectory(&graph).expect("graph-mode1 trajectory");
    let pde = run::run_pde(&scenario("graph-mode1-pde"), None).expect("graph-mode1-pde run");
    let fx = Fixture { graph, graph_traj, pde };

    let criteria: [(&str, &dyn Fn() -> Outcome); 9] = [
        ("integrability cross-check", &|| integrability(&fx)),
        ("energy eigen-decay", &|| energy_decay(&fx)),
        ("dissipation identity", &|| dissipation(&fx)),
        ("per-loop entropy identity", &|| identity(&fx)),
        ("relative entropy certificate", &|| certificate_passes(&fx)),
        ("weak-strong mechanism", &weak_strong_sensitivity),
        ("structure preservation", &|| structure(&fx)),
        ("cross-solver agreement", &|| cross_solver(&fx)),
        ("r0 tightness", &|| r0_tightness(&fx)),
    ];
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let (pass, detail) = match f() {
            Ok(x) => x,
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failures += 1;
        }
        println!(
            "criterion {} {name}: {} ({detail})",
            i + 1,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    println!(
        "acceptance: {}/9 passed in {:.1}s",
        9 - failures,
        start.elapsed().as_secs_f64()
    );
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
