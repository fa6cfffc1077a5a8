//! Grid-level quantities against their loop-level counterparts.

use eulerheat::entropy::{self, R0Sampling};
use eulerheat::fields::{self, DepositionKernel, GridFields, PeriodicGrid};
use eulerheat::loops::{LoopEnsemble, WindingLoop};
use eulerheat::trial::{RandomTrialSpec, TrialFields};
use proptest::prelude::*;

mod common;
use common::arb_loop;

fn graph_loop() -> WindingLoop {
    WindingLoop::graph_sine(2, 0, 1, 0.5, 0.05, 1).unwrap()
}

fn r0(trial: &TrialFields, horizon: f64) -> f64 {
    entropy::estimate_r0(trial, horizon, &R0Sampling::for_trial(trial, horizon)).value
}

#[test]
fn averaging_gap_shrinks_quadratically() {
    let ens = LoopEnsemble::single(graph_loop());
    let trial = TrialFields::random(2, 0, &RandomTrialSpec::default());
    let r = r0(&trial, 0.05);
    let lt = entropy::ensemble_entropy(&ens, 0.01, &trial, 512).unwrap();
    let gaps: Vec<(f64, f64)> = [32, 64, 128]
        .iter()
        .map(|&n| {
            let g = PeriodicGrid::new(2, n).unwrap();
            let f = fields::deposit(&ens, 0.01, g, &DepositionKernel::default(), 512).unwrap();
            let gt = entropy::snapshot_terms(&f, &trial).unwrap();
            (lt.entropy - gt.entropy, lt.dissipation(r) - gt.dissipation(r))
        })
        .collect();
    for w in gaps.windows(2) {
        assert!(w[0].0 > 0.0 && w[1].0 > 0.0 && w[0].1 > 0.0 && w[1].1 > 0.0, "{gaps:?}");
        let (re, rd) = (w[0].0 / w[1].0, w[0].1 / w[1].1);
        assert!((3.0..5.0).contains(&re) && (3.0..5.0).contains(&rd), "{gaps:?}");
    }
}

#[test]
fn saturated_loop_margin_matches_loop_identity() {
    let lp = graph_loop();
    let ens = LoopEnsemble::single(lp);
    let trial = TrialFields::random(2, 4, &RandomTrialSpec::default());
    let horizon = 0.02;
    let r = r0(&trial, horizon);
    let g = PeriodicGrid::new(2, 64).unwrap();
    let times: Vec<f64> = (0..=40).map(|k| horizon * k as f64 / 40.0).collect();
    let traj: Vec<GridFields> = times
        .iter()
        .map(|&t| fields::deposit(&ens, t, g, &DepositionKernel::default(), 256).unwrap())
        .collect();
    let report = entropy::certify(&traj, &trial, &[r], r, 1e-6).unwrap();

    // the loop identity makes the loop-level margin vanish up to time quadrature
    let lt: Vec<_> = times
        .iter()
        .map(|&t| entropy::ensemble_entropy(&ens, t, &trial, 256).unwrap())
        .collect();
    let integrand: Vec<f64> = lt.iter().map(|x| x.dissipation(r) - x.remainder).collect();
    let integral = entropy::exp_weighted_integral(&times, &integrand, r);
    for (k, &t) in times.iter().enumerate() {
        let loop_margin = lt[0].entropy - (lt[k].entropy * (-r * t).exp() + integral[k]);
        assert!(loop_margin.abs() < 1e-5, "loop margin {loop_margin} at t={t}");
        let grid_margin = report.per_r[0].margin[k];
        assert!((grid_margin - loop_margin).abs() < 1e-4, "t={t}: {grid_margin} vs {loop_margin}");
    }
}

#[test]
fn deposited_fields_satisfy_continuity_at_second_order() {
    let ens = LoopEnsemble::single(graph_loop());
    let (t, dt) = (0.01, 1e-5);
    let residual = |n: usize| {
        let g = PeriodicGrid::new(2, n).unwrap();
        // fixed physical width, so only the stencil error is refined
        let k = DepositionKernel::gaussian(1.5 * n as f64 / 32.0);
        let plus = fields::deposit(&ens, t + dt, g, &k, 1024).unwrap();
        let minus = fields::deposit(&ens, t - dt, g, &k, 1024).unwrap();
        let mid = fields::deposit(&ens, t, g, &k, 1024).unwrap();
        (0..g.cells())
            .map(|c| {
                let div: f64 = (0..2).map(|a| g.central_diff(&mid.p[a], c, a)).sum();
                ((plus.rho[c] - minus.rho[c]) / (2.0 * dt) + div).abs()
            })
            .fold(0.0, f64::max)
    };
    let (r64, r128) = (residual(64), residual(128));
    assert!((3.5..4.5).contains(&(r64 / r128)), "{r64} {r128}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn grid_terms_are_bounded_by_ensemble_averages(
        a in arb_loop(),
        b in arb_loop(),
        w in 0.1f64..0.9,
        seed in 0u64..500,
        t in 0.0f64..0.02,
    ) {
        let ens = LoopEnsemble::new(vec![a, b], vec![w, 1.0 - w]).unwrap();
        let trial = TrialFields::random(2, seed, &RandomTrialSpec::default());
        let r = r0(&trial, 0.05);
        let g = PeriodicGrid::new(2, 64).unwrap();
        let f = fields::deposit(&ens, t, g, &DepositionKernel::default(), 256).unwrap();
        let gt = entropy::snapshot_terms(&f, &trial).unwrap();
        let lt = entropy::ensemble_entropy(&ens, t, &trial, 256).unwrap();
        // mollification error of the trial fields across the kernel width
        let sigma2 = (1.5 * g.h()).powi(2);
        prop_assert!(gt.entropy <= lt.entropy + 10.0 * sigma2 * (1.0 + lt.entropy), "{gt:?} {lt:?}");
        prop_assert!(
            gt.dissipation(r) <= lt.dissipation(r) + 10.0 * sigma2 * (1.0 + lt.dissipation(r)),
            "{gt:?} {lt:?}"
        );
    }
}
