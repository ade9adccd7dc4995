use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use tpms2step_core::constraints::find_pairings;
use tpms2step_core::cpia::*;
use tpms2step_core::geom::Vec3;
use tpms2step_core::nurbs::{basis_value, make_uniform_setup, uniform_params, FitSetup, KnotVector, NurbsSurface};
use tpms2step_core::weierstrass::TpmsKind;
use tpms2step_core::Error;

fn random_net(rng: &mut impl Rng, n: usize) -> Vec<Vec3> {
    (0..n).map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
}

/// Collocation matrix built entry by entry from the Cox-de Boor recursion.
fn collocation(knots: &KnotVector, params: &[f64]) -> DMatrix<f64> {
    let n = knots.n_ctrl();
    DMatrix::from_fn(params.len(), n, |r, c| basis_value(knots, c, knots.degree(), params[r]).unwrap())
}

/// Least-squares net from the dense normal equations BᵀB P = BᵀQ with B = Bu ⊗ Bv.
fn normal_equation_solve(setup: &FitSetup, q: &[Vec3]) -> Vec<Vec3> {
    let bu = collocation(&setup.knots_u, &setup.params_u);
    let bv = collocation(&setup.knots_v, &setup.params_v);
    let b = bu.kronecker(&bv);
    let btb = b.transpose() * &b;
    let lu = btb.lu();
    let mut out = vec![Vec3::zeros(); q.len()];
    for d in 0..3 {
        let rhs = b.transpose() * DVector::from_iterator(q.len(), q.iter().map(|p| p[d]));
        let x = lu.solve(&rhs).unwrap();
        for (o, v) in out.iter_mut().zip(x.iter()) {
            o[d] = *v;
        }
    }
    out
}

#[test]
fn unconstrained_limit_matches_normal_equations() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(7);
    for n in [4, 8, 15] {
        let setup = make_uniform_setup(n, n, 3).unwrap();
        let q = random_net(&mut rng, n * n);
        let problem = FitProblem::new(vec![q.clone()], setup.clone(), None).unwrap();
        let (_, state) = fit_cpia(&problem, 1e-13, 5000).unwrap();
        let direct = normal_equation_solve(&setup, &q);
        let err = state.control_points[0].iter().zip(&direct).map(|(a, b)| (a - b).abs().max()).fold(0.0, f64::max);
        assert!(err < 1e-8, "n = {n}: max-norm gap {err:e}");
    }
}

#[test]
fn interpolating_net_is_a_fixed_point() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(3);
    let n = 7;
    let setup = make_uniform_setup(n, n, 3).unwrap();
    let net = random_net(&mut rng, n * n);
    let fixture = FitProblem::new(vec![net.clone()], setup.clone(), None).unwrap();
    let q = fixture.evaluate_net(&net);
    let problem = FitProblem::new(vec![q], setup, None).unwrap();
    let state = FitState { control_points: vec![net], iteration: 0, max_update: f64::INFINITY, history: vec![] };
    let next = cpia_step(&state, &problem).unwrap();
    assert!(next.max_update < 1e-14);
}

#[test]
fn first_step_is_the_pia_update() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(11);
    let n = 6;
    let setup = make_uniform_setup(n, n, 3).unwrap();
    let q = random_net(&mut rng, n * n);
    let problem = FitProblem::new(vec![q.clone()], setup.clone(), None).unwrap();
    let next = cpia_step(&FitState::initial(&problem), &problem).unwrap();
    let b = collocation(&setup.knots_u, &setup.params_u).kronecker(&collocation(&setup.knots_v, &setup.params_v));
    for d in 0..3 {
        let qd = DVector::from_iterator(q.len(), q.iter().map(|p| p[d]));
        let expected = &qd + (&qd - &b * &qd);
        for (k, p) in next.control_points[0].iter().enumerate() {
            assert!((p[d] - expected[k]).abs() < 1e-13);
        }
    }
    assert_eq!(next.history.len(), 1);
    assert_eq!(next.iteration, 1);
}

#[test]
fn loose_tolerance_returns_after_one_step() {
    let setup = make_uniform_setup(5, 5, 3).unwrap();
    let q: Vec<Vec3> = (0..25).map(|k| Vec3::new((k / 5) as f64, (k % 5) as f64, 0.3 * ((k * k) % 7) as f64)).collect();
    let problem = FitProblem::new(vec![q], setup, None).unwrap();
    let (_, state) = fit_cpia(&problem, 100.0, 10).unwrap();
    assert_eq!(state.iteration, 1);
}

#[test]
fn max_iter_error_carries_history() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(5);
    let setup = make_uniform_setup(9, 9, 3).unwrap();
    let problem = FitProblem::new(vec![random_net(&mut rng, 81)], setup, None).unwrap();
    match fit_cpia(&problem, 1e-14, 3) {
        Err(Error::MaxIter { max_iter, history, .. }) => {
            assert_eq!(max_iter, 3);
            assert_eq!(history.len(), 3);
        }
        other => panic!("expected MaxIter, got {other:?}"),
    }
    assert!(matches!(fit_cpia(&problem, 0.0, 3), Err(Error::InvalidTolerance(_))));
}

#[test]
fn divergence_guard_window() {
    let mut h = vec![1.0; 20];
    assert!(!is_diverging(&h));
    h.push(10.0);
    assert!(!is_diverging(&h));
    h.push(10.5);
    assert!(is_diverging(&h));
    assert!(is_diverging(&[f64::NAN]));
    assert!(!is_diverging(&[]));
}

#[test]
fn spectral_radius_below_one_and_matches_kronecker_eigenvalues() {
    for n in [4, 6, 9, 12, 15] {
        let setup = make_uniform_setup(n, n, 3).unwrap();
        let rho = iteration_spectral_radius(&setup, 400).unwrap();
        // Eigenvalues of Bu ⊗ Bv are the pairwise products of the factors' eigenvalues.
        let eu = collocation(&setup.knots_u, &setup.params_u).complex_eigenvalues();
        let ev = collocation(&setup.knots_v, &setup.params_v).complex_eigenvalues();
        let one = nalgebra::Complex::new(1.0, 0.0);
        let dense = eu.iter().flat_map(|a| ev.iter().map(move |b| (one - a * b).norm())).fold(0.0, f64::max);
        assert!(rho < 1.0, "n = {n}: rho = {rho}");
        assert!((rho - dense).abs() < 1e-3, "n = {n}: power {rho} vs dense {dense}");
    }
}

#[test]
fn constrained_small_instances_converge_monotonically() {
    for kind in TpmsKind::ALL {
        let pairings = find_pairings(kind, 0.1, 21).unwrap();
        let fit = fit_on_params(kind, 0.1, &uniform_params(9), &pairings, 1e-8, 5000).unwrap();
        let h = &fit.state.history;
        assert!(*h.last().unwrap() <= 1e-8);
        for k in 3..h.len() - 1 {
            assert!(h[k + 1] <= h[k], "{kind}: update rose at iteration {}", k + 2);
        }
        assert!(fit.problem.constraint_residual(&fit.state.control_points) <= 1e-6);
    }
}

#[test]
fn history_is_bit_identical_across_runs() {
    let pairings = find_pairings(TpmsKind::Gyroid, 0.2, 21).unwrap();
    let a = fit_on_params(TpmsKind::Gyroid, 0.2, &uniform_params(8), &pairings, 1e-8, 5000).unwrap();
    let b = fit_on_params(TpmsKind::Gyroid, 0.2, &uniform_params(8), &pairings, 1e-8, 5000).unwrap();
    assert_eq!(a.state.history.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.state.history.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
}

#[test]
fn history_csv_has_one_row_per_iteration() {
    let state = FitState { control_points: vec![], iteration: 2, max_update: 0.5, history: vec![1.0, 0.5] };
    let mut buf = Vec::new();
    state.write_history_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "iteration,max_update");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("2,5.0"));
}

fn surface_from(net: Vec<Vec3>, n: usize) -> NurbsSurface {
    let k = KnotVector::averaged(&uniform_params(n), 3).unwrap();
    NurbsSurface::polynomial(k.clone(), k, net).unwrap()
}

#[test]
fn zheng_vanishes_on_affine_nets() {
    let n = 7;
    let net: Vec<Vec3> = (0..n * n)
        .map(|k| {
            let (i, j) = ((k / n) as f64, (k % n) as f64);
            Vec3::new(1.0 + 2.0 * i - j, 0.5 * j, 3.0 - i + 4.0 * j)
        })
        .collect();
    let z = zheng_estimate(&surface_from(net, n), 1.0 / (n - 1) as f64);
    assert!(z.eps.iter().all(|&e| e.abs() < 1e-12));
}

#[test]
fn zheng_bounds_the_bilinear_gap_on_random_bicubics() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(2024);
    let (mut cells, mut ok) = (0usize, 0usize);
    for _ in 0..30 {
        let n = rng.gen_range(5..12);
        let s = surface_from(random_net(&mut rng, n * n), n);
        let p = uniform_params(n);
        let z = zheng_estimate(&s, 1.0 / (n - 1) as f64);
        for i in 0..n - 1 {
            for j in 0..n - 1 {
                let c = |a: usize, b: usize| s.eval(p[i + a], p[j + b]);
                let (c00, c10, c01, c11) = (c(0, 0), c(1, 0), c(0, 1), c(1, 1));
                let mut gap: f64 = 0.0;
                for a in 0..=8 {
                    for b in 0..=8 {
                        let (x, y) = (a as f64 / 8.0, b as f64 / 8.0);
                        let bl = c00 * (1.0 - x) * (1.0 - y) + c10 * x * (1.0 - y) + c01 * (1.0 - x) * y + c11 * x * y;
                        gap = gap.max((s.eval(p[i] + x * (p[i + 1] - p[i]), p[j] + y * (p[j + 1] - p[j])) - bl).norm());
                    }
                }
                cells += 1;
                ok += usize::from(gap <= z.at(i, j));
            }
        }
    }
    assert!(ok as f64 >= 0.99 * cells as f64, "{ok}/{cells}");
}

#[test]
fn rational_weights_enter_the_estimate() {
    let n = 6;
    let mut rng = rand::rngs::StdRng::seed_from_u64(9);
    let k = KnotVector::averaged(&uniform_params(n), 3).unwrap();
    let weights: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.5..2.0)).collect();
    let s = NurbsSurface::new(k.clone(), k, random_net(&mut rng, n * n), weights).unwrap();
    let z = zheng_estimate(&s, 0.2);
    assert!(z.eps.iter().all(|&e| e.is_finite() && e > 0.0));
}

#[test]
fn one_extra_row_and_column_when_the_start_is_just_too_coarse() {
    let kind = TpmsKind::SchwarzP;
    let pairings = find_pairings(kind, 0.2, 21).unwrap();
    let cert = |n: usize| {
        let fit = fit_on_params(kind, 0.2, &uniform_params(n), &pairings, 1e-8, 5000).unwrap();
        approximation_certificate(&fit.problem, &fit.state.control_points).unwrap().worst().0
    };
    let (coarse, fine) = (cert(10), cert(11));
    assert!(fine < coarse);
    let bounds = tpms2step_core::sampling::DerivativeBounds { m1: 1.0, m2: 1.0, m3: 1.0, probe_resolution: 16 };
    let eps = 0.5 * (coarse + fine);
    let (fit, report) = fit_with_error_control_from(kind, 0.2, eps, 10, &pairings, bounds).unwrap();
    assert_eq!(report.rounds, 1);
    assert_eq!(fit.params.len(), 11);
    let (_, report) = fit_with_error_control_from(kind, 0.2, 2.0 * coarse, 10, &pairings, bounds).unwrap();
    assert_eq!(report.rounds, 0);
}

#[test]
fn loose_tolerance_starts_from_the_smallest_consistent_grid() {
    let (fit, report) = fit_with_error_control(TpmsKind::Gyroid, 0.3, 0.5).unwrap();
    assert_eq!(report.final_nodes, MIN_CONSTRAINED_NODES);
    assert_eq!(fit.params.len(), MIN_CONSTRAINED_NODES);
    assert!(report.constraint_residual <= 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn uniform_weight_collapse(seed in any::<u64>(), n in 5usize..10, l in 0.05f64..0.5) {
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let s = surface_from(random_net(&mut rng, n * n), n);
        let z = zheng_estimate(&s, l);
        let scale = l * l * ((n - 1) * (n - 1)) as f64 / 4.0;
        let unit = zheng_estimate(&s, 1.0 / (n - 1) as f64);
        for (a, b) in z.eps.iter().zip(&unit.eps) {
            // With w ≡ 1 the estimate is L²n²A/4 and A does not depend on L.
            prop_assert!((a - scale * 4.0 * b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn pia_step_is_affine_in_the_data(seed in any::<u64>(), t in -2.0f64..2.0) {
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let n = 6;
        let setup = make_uniform_setup(n, n, 3).unwrap();
        let q1 = random_net(&mut rng, n * n);
        let q2 = random_net(&mut rng, n * n);
        let mix: Vec<Vec3> = q1.iter().zip(&q2).map(|(a, b)| a * t + b * (1.0 - t)).collect();
        let step = |q: &Vec<Vec3>| {
            let p = FitProblem::new(vec![q.clone()], setup.clone(), None).unwrap();
            cpia_step(&FitState::initial(&p), &p).unwrap().control_points.remove(0)
        };
        let (a, b, m) = (step(&q1), step(&q2), step(&mix));
        for k in 0..n * n {
            prop_assert!((m[k] - (a[k] * t + b[k] * (1.0 - t))).norm() < 1e-12);
        }
    }
}
