use std::io::{BufReader, Seek, SeekFrom, Write};

use approx::assert_relative_eq;
use eulerheat::entropy::{self, QMatrix, R0Sampling};
use eulerheat::fields::{self, DepositionKernel, GridFields, PeriodicGrid};
use eulerheat::loops::{LoopEnsemble, WindingLoop};
use eulerheat::pde;
use eulerheat::snapshot;
use eulerheat::trial::{RandomTrialSpec, TrialFields};
use eulerheat::energy::{self, DualTestPair};
use eulerheat::vector;
use proptest::prelude::*;

mod common;
use common::arb_loop;

fn positions(lp: &WindingLoop) -> Vec<vector::Vector> {
    lp.sample(64).unwrap().positions
}

fn grid16() -> PeriodicGrid {
    PeriodicGrid::new(2, 16).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn heat_evolution_is_a_semigroup(lp in arb_loop(), t1 in 0.0f64..0.05, t2 in 0.0f64..0.05) {
        let two_step = positions(&lp.evolve_exact(t1).evolve_exact(t2));
        let one_step = positions(&lp.evolve_exact(t1 + t2));
        for (a, b) in two_step.iter().zip(&one_step) {
            prop_assert!(vector::torus_distance(a, b, 2) < 1e-13);
        }
    }

    #[test]
    fn loop_energy_decreases_towards_the_winding_energy(lp in arb_loop(), t1 in 0.0f64..0.05, dt in 0.0f64..0.05) {
        let e1 = lp.evolve_exact(t1).energy();
        let e2 = lp.evolve_exact(t1 + dt).energy();
        prop_assert!(e2 <= e1 + 1e-15);
        prop_assert!(e2 >= 0.5 - 1e-15);
    }

    #[test]
    fn deposition_is_linear_in_the_ensemble(a in arb_loop(), b in arb_loop(), w in 0.05f64..0.95, t in 0.0f64..0.02) {
        let g = grid16();
        let k = DepositionKernel::default();
        let ens = LoopEnsemble::new(vec![a.clone(), b.clone()], vec![w, 1.0 - w]).unwrap();
        let joint = fields::deposit(&ens, t, g, &k, 64).unwrap();
        let mut sum = fields::deposit(&LoopEnsemble::single(a), t, g, &k, 64).unwrap();
        for x in sum.rho.iter_mut().chain(sum.b.iter_mut().flatten()).chain(sum.p.iter_mut().flatten()) {
            *x *= w;
        }
        sum.add_scaled(&fields::deposit(&LoopEnsemble::single(b), t, g, &k, 64).unwrap(), 1.0 - w).unwrap();
        prop_assert!(max_abs_diff(&joint.rho, &sum.rho) < 1e-12);
        for c in 0..2 {
            prop_assert!(max_abs_diff(&joint.b[c], &sum.b[c]) < 1e-12);
            prop_assert!(max_abs_diff(&joint.p[c], &sum.p[c]) < 1e-11);
        }
    }

    #[test]
    fn deposition_conserves_mass_and_circulation(a in arb_loop(), b in arb_loop(), w in 0.05f64..0.95) {
        let ens = LoopEnsemble::new(vec![a, b], vec![w, 1.0 - w]).unwrap();
        let f = fields::deposit(&ens, 0.0, grid16(), &DepositionKernel::default(), 64).unwrap();
        prop_assert!((f.mass() - 1.0).abs() < 1e-12);
        let (c, target) = (f.circulation(), ens.circulation());
        prop_assert!((c[0] - target[0]).abs() < 1e-12 && (c[1] - target[1]).abs() < 1e-12);
        let cs = fields::cauchy_schwarz_gap(&ens, &f, 0.0);
        prop_assert!(cs.lhs <= cs.rhs * (1.0 + 1e-12));
    }

    #[test]
    fn grid_energy_is_one_homogeneous(lp in arb_loop(), lambda in 0.1f64..10.0) {
        let f = fields::deposit(&LoopEnsemble::single(lp), 0.0, grid16(), &DepositionKernel::default(), 64).unwrap();
        let mut scaled = f.clone();
        for x in scaled.rho.iter_mut().chain(scaled.b.iter_mut().flatten()) {
            *x *= lambda;
        }
        assert_relative_eq!(energy::energy(&scaled).unwrap(), lambda * energy::energy(&f).unwrap(), max_relative = 1e-12);
    }

    #[test]
    fn q_matrix_is_symmetric_with_the_expected_quadratic_form(
        seed in 0u64..1000,
        t in 0.0f64..0.05,
        x in prop::array::uniform2(0.0f64..1.0),
        u in prop::array::uniform4(-1.0f64..1.0),
        r in 0.0f64..50.0,
    ) {
        let trial = TrialFields::random(2, seed, &RandomTrialSpec::default());
        let p = trial.evaluate(t, &[x[0], x[1], 0.0]);
        let q = QMatrix::from_point(&p, 2, r);
        prop_assert!(q.is_symmetric());
        let (w1, w2) = ([u[0], u[1], 0.0], [u[2], u[3], 0.0]);
        let mut expected = 2.0 * (w2[0] * w2[0] + w2[1] * w2[1]) + r * (w1[0] * w1[0] + w1[1] * w1[1]);
        for i in 0..2 {
            for j in 0..2 {
                let s = p.grad_v[i][j] + p.grad_v[j][i];
                let c = p.grad_b[i][j] - p.grad_b[j][i];
                expected += -w1[i] * s * w1[j] + 2.0 * w1[i] * c * w2[j];
            }
        }
        assert_relative_eq!(q.quadratic_form(&w1, &w2), expected, epsilon = 1e-10, max_relative = 1e-12);
    }

    #[test]
    fn momentum_commutes_with_grid_shifts(seed in 0u64..1000, axis in 0usize..2, shift in 1isize..16) {
        let g = grid16();
        let val = |i: usize, k: u64| (((i as u64 + 1) * (seed + 3 + k)) as f64 * 0.013).sin();
        let rho: Vec<f64> = (0..g.cells()).map(|i| 1.5 + val(i, 0)).collect();
        let b: Vec<Vec<f64>> = (0..2).map(|c| (0..g.cells()).map(|i| val(i, c + 1)).collect()).collect();
        let roll = |f: &[f64]| -> Vec<f64> { (0..g.cells()).map(|i| f[g.neighbor(i, axis, -shift)]).collect() };
        let p = pde::compute_momentum(&g, &rho, &b);
        let p_shifted = pde::compute_momentum(&g, &roll(&rho), &b.iter().map(|c| roll(c)).collect::<Vec<_>>());
        for c in 0..2 {
            prop_assert_eq!(roll(&p[c]), p_shifted[c].clone());
        }
    }

    #[test]
    fn snapshot_files_round_trip(values in prop::collection::vec(-1e6f64..1e6, 5 * 64), t in 0.0f64..10.0) {
        let g = PeriodicGrid::new(2, 8).unwrap();
        let mut f = GridFields::zeros(g, t);
        let mut it = values.into_iter();
        for x in f.rho.iter_mut().chain(f.b.iter_mut().flatten()).chain(f.p.iter_mut().flatten()) {
            *x = it.next().unwrap();
        }
        let mut file = tempfile::tempfile().unwrap();
        snapshot::write_snapshot(&mut file, &f, "deadbeef").unwrap();
        file.flush().unwrap();
        file.seek(SeekFrom::Start(0)).unwrap();
        let back = snapshot::read_snapshot(&mut BufReader::new(file)).unwrap();
        prop_assert_eq!(back.scenario, "deadbeef");
        prop_assert_eq!(back.fields, f);
    }

    #[test]
    fn exponential_weighting_is_exact_for_affine_integrands(
        a in -5.0f64..5.0,
        b in -5.0f64..5.0,
        r in prop_oneof![Just(0.0), 1e-7f64..1e-3, 0.1f64..200.0],
        n in 2usize..40,
    ) {
        let t_end = 0.05;
        let times: Vec<f64> = (0..=n).map(|k| t_end * k as f64 / n as f64).collect();
        let values: Vec<f64> = times.iter().map(|t| a + b * t).collect();
        let got = *entropy::exp_weighted_integral(&times, &values, r).last().unwrap();
        // composite Simpson on a much finer grid
        let m = 20_000;
        let f = |s: f64| (-r * s).exp() * (a + b * s);
        let h = t_end / m as f64;
        let exact = h / 3.0
            * (0..=m)
                .map(|k| {
                    let w = if k == 0 || k == m { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
                    w * f(k as f64 * h)
                })
                .sum::<f64>();
        assert_relative_eq!(got, exact, epsilon = 1e-12, max_relative = 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn dual_pairs_never_exceed_the_energy(lp in arb_loop(), seed in 0u64..10_000, slack in 0.0f64..0.5, t in 0.0f64..0.02) {
        let f = fields::deposit(&LoopEnsemble::single(lp), t, grid16(), &DepositionKernel::default(), 64).unwrap();
        let pair = DualTestPair::random(2, seed, &RandomTrialSpec::default(), slack).unwrap();
        let e = energy::energy(&f).unwrap();
        prop_assert!(energy::energy_dual_lower_bound(&f, &[pair]).unwrap() <= e + 1e-12);
        let sat = energy::energy_dual_lower_bound(&f, &[DualTestPair::saturating(&f)]).unwrap();
        assert_relative_eq!(sat, e, max_relative = 1e-8);
    }

    #[test]
    fn metric_pairing_obeys_cauchy_schwarz(values in prop::collection::vec(-2.0f64..2.0, 4 * 256), rho in prop::collection::vec(0.0f64..3.0, 256)) {
        let g = grid16();
        let col = |k: usize| values[k * 256..(k + 1) * 256].to_vec();
        let norms = energy::metric_norms(&g, &[col(0), col(1)], &[col(2), col(3)], &rho).unwrap();
        prop_assert!(norms.pairing.abs() <= norms.primal * norms.dual * (1.0 + 1e-12) + 1e-300);
        prop_assert!(norms.fenchel_slack() >= -1e-12 * (1.0 + norms.primal * norms.dual));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn r0_makes_the_sampled_q_matrix_coercive(seed in 0u64..10_000) {
        let trial = TrialFields::random(2, seed, &RandomTrialSpec::default());
        let sampling = R0Sampling::for_trial(&trial, 0.05);
        let r0 = entropy::estimate_r0(&trial, 0.05, &sampling);
        prop_assert!(entropy::sampled_lambda_min(&trial, 0.05, &sampling, r0.value) >= 1.0);
        prop_assert!(entropy::sampled_lambda_min(&trial, 0.05, &sampling, 2.0 * r0.value) >= 1.0);
    }
}
