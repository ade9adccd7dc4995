use nalgebra::{Matrix3, Matrix4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use tpms2step_core::constraints::*;
use tpms2step_core::cpia::fit_on_params;
use tpms2step_core::geom::{RigidTransform, Vec3};
use tpms2step_core::nurbs::{uniform_params, KnotVector};
use tpms2step_core::weierstrass::{OffsetSurface, TpmsKind};
use tpms2step_core::Error;

fn cloud(seed: u64, n: usize) -> Vec<Vec3> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    (0..n).map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
}

/// Random orthogonal matrix from Gram-Schmidt, optionally a reflection.
fn orthogonal(seed: u64, reflect: bool) -> Matrix3<f64> {
    let c = cloud(seed, 3);
    let a = c[0].normalize();
    let b = (c[1] - a * a.dot(&c[1])).normalize();
    let z = a.cross(&b) * if reflect { -1.0 } else { 1.0 };
    Matrix3::from_columns(&[a, b, z])
}

fn off_identity(t: &RigidTransform) -> f64 {
    (t.to_homogeneous() - Matrix4::identity()).norm()
}

#[test]
fn procrustes_of_identical_sets_is_the_identity() {
    let p = cloud(1, 20);
    let fit = derive_rigid_transform(&p, &p).unwrap();
    assert!(off_identity(&fit.transform) < 1e-12);
    assert!(fit.rms < 1e-14);
}

#[test]
fn procrustes_recovers_known_motions() {
    for (seed, reflect) in [(2, false), (3, true), (4, false), (5, true)] {
        let q = orthogonal(seed, reflect);
        let t = Vec3::new(0.3, -1.2, 2.5);
        let src = cloud(seed + 10, 30);
        let dst: Vec<Vec3> = src.iter().map(|p| q * p + t).collect();
        let fit = derive_rigid_transform(&src, &dst).unwrap();
        let expected = RigidTransform::new(q, t);
        assert!((fit.transform.to_homogeneous() - expected.to_homogeneous()).norm() < 1e-12);
        assert!((fit.transform.determinant() - q.determinant()).abs() < 1e-12);
    }
}

#[test]
fn procrustes_rejects_bad_correspondences() {
    let src = cloud(6, 20);
    let scaled: Vec<Vec3> = src.iter().map(|p| Vec3::new(2.0 * p.x, p.y, p.z)).collect();
    assert!(matches!(derive_rigid_transform(&src, &scaled), Err(Error::NonRigid { .. })));
    let line: Vec<Vec3> = (0..10).map(|k| Vec3::new(k as f64, 2.0 * k as f64, 0.0)).collect();
    assert!(matches!(derive_rigid_transform(&line, &line), Err(Error::DegenerateCorrespondence)));
    assert!(matches!(derive_rigid_transform(&src[..2], &src[..2]), Err(Error::DegenerateCorrespondence)));
    assert!(matches!(derive_rigid_transform(&src, &src[..5]), Err(Error::DegenerateCorrespondence)));
}

#[test]
fn pairing_structure_matches_the_edge_table() {
    for kind in TpmsKind::ALL {
        let ps = find_pairings(kind, 0.3, 21).unwrap();
        assert_eq!(ps.len(), 4);
        for p in &ps {
            assert_eq!(p.source.net, PLUS);
            match kind {
                // Every + edge meets a − edge; SchwarzP meets itself.
                TpmsKind::Gyroid | TpmsKind::Diamond => assert_eq!(p.target.net, MINUS),
                TpmsKind::SchwarzP => assert_eq!(p.target, p.source),
            }
            // The edge map is an involution whose transforms are mutual inverses.
            let q = ps.iter().find(|q| q.source.edge == p.target.edge).unwrap();
            assert_eq!(q.target.edge, p.source.edge);
            assert!(off_identity(&q.transform.compose(&p.transform)) < 1e-10, "{kind}");
        }
    }
}

#[test]
fn derived_transforms_are_rigid() {
    for kind in TpmsKind::ALL {
        for d in [0.0, 0.2, 0.4] {
            for p in find_pairings(kind, d, 21).unwrap() {
                assert!(p.transform.orthogonality_error() < 1e-10);
                assert!(p.fit_residual < 1e-6, "{kind} d={d}: {:e}", p.fit_residual);
                let r = p.transform.to_homogeneous().fixed_view::<3, 3>(0, 0).into_owned();
                for ev in r.complex_eigenvalues().iter() {
                    assert!((ev.norm() - 1.0).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn transforms_carry_target_edges_onto_source_edges() {
    for kind in TpmsKind::ALL {
        let d = 0.25;
        let sign = [1.0, -1.0];
        for p in find_pairings(kind, d, 21).unwrap() {
            let src = OffsetSurface::new(kind, sign[p.source.net] * d);
            let tgt = OffsetSurface::new(kind, sign[p.target.net] * d);
            for k in 0..=30 {
                let t = k as f64 / 30.0;
                let (u, v) = p.source.edge.uv(t, 0.0);
                let a = src.eval_uv(u, v).unwrap().position;
                let (u, v) = p.target.edge.uv(if p.flip { 1.0 - t } else { t }, 0.0);
                let b = p.transform.apply(&tgt.eval_uv(u, v).unwrap().position);
                assert!((a - b).norm() < 1e-9, "{kind} {}: {:e}", p.source.edge.name(), (a - b).norm());
            }
        }
    }
}

fn small_set(kind: TpmsKind, n: usize) -> ConstraintSet {
    let params = uniform_params(n);
    let k = KnotVector::averaged(&params, 3).unwrap();
    build_constraint_set(kind, 0.3, &params, &params, &k, &k).unwrap()
}

#[test]
fn line_counts_and_shape_checks() {
    let cs = small_set(TpmsKind::Diamond, 8);
    assert_eq!(cs.nets, 2);
    // Orders 0, 1, 2 at every station of every pairing.
    assert_eq!(cs.lines.len(), 4 * 8 * 3);
    let audit = cs.audit_report(None);
    assert!(!audit.is_empty());
    let wrong = vec![vec![Vec3::zeros(); 64]];
    assert!(matches!(constraint_residual(&wrong, &cs), Err(Error::ShapeMismatch(_))));
    let wrong = vec![vec![Vec3::zeros(); 63]; 2];
    assert!(matches!(constraint_residual(&wrong, &cs), Err(Error::ShapeMismatch(_))));
}

#[test]
fn converged_fits_satisfy_the_constraints() {
    for kind in TpmsKind::ALL {
        let pairings = find_pairings(kind, 0.3, 21).unwrap();
        let fit = fit_on_params(kind, 0.3, &uniform_params(9), &pairings, 1e-8, 20000).unwrap();
        let cs = fit.problem.constraints.as_ref().unwrap();
        let r = constraint_residual(&fit.state.control_points, cs).unwrap();
        assert!(r.max_norm <= 1e-6, "{kind}: {:e}", r.max_norm);
        // The unconstrained samples themselves do not.
        let raw = constraint_residual(&fit.problem.samples, cs).unwrap();
        assert!(raw.max_norm > 1e-4, "{kind}: {:e}", raw.max_norm);
    }
}

#[test]
fn projection_is_idempotent_and_lands_on_the_constraints() {
    let cs = small_set(TpmsKind::Gyroid, 7);
    let proj = ConstraintProjector::new(&cs).unwrap();
    let mut rng = rand::rngs::StdRng::seed_from_u64(9);
    let mut nets: Vec<Vec<Vec3>> = (0..2).map(|_| (0..49).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect()).collect();
    proj.project(&mut nets);
    assert!(cs.max_residual(&nets) < 1e-12);
    let once = nets.clone();
    proj.project(&mut nets);
    let moved = once.iter().flatten().zip(nets.iter().flatten()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    assert!(moved < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn residual_is_affine_in_the_net(seed in 0u64..1000, idx in 0usize..64, delta in -1.0f64..1.0) {
        let cs = small_set(TpmsKind::SchwarzP, 8);
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let base: Vec<Vec<Vec3>> = vec![(0..64).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect()];
        let bump = |s: f64| {
            let mut n = base.clone();
            n[0][idx] += Vec3::new(s, -0.5 * s, 2.0 * s);
            constraint_residual(&n, &cs).unwrap().lines
        };
        let (r0, r1, r2) = (bump(0.0), bump(delta), bump(2.0 * delta));
        for k in 0..r0.len() {
            prop_assert!(((r2[k] - r0[k]) - 2.0 * (r1[k] - r0[k])).norm() < 1e-12);
        }
    }
}
