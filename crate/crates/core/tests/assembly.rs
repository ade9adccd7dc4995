use std::sync::OnceLock;

use proptest::prelude::*;
use tpms2step_core::assembly::*;
use tpms2step_core::constraints::find_pairings;
use tpms2step_core::cpia::fit_on_params;
use tpms2step_core::geom::{RigidTransform, Vec3};
use tpms2step_core::nurbs::{uniform_params, Edge, KnotVector, NurbsSurface};
use tpms2step_core::weierstrass::TpmsKind;
use tpms2step_core::Error;

const D: f64 = 0.3;

fn unit(kind: TpmsKind) -> &'static SolidModel {
    static CACHE: [OnceLock<SolidModel>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    let k = TpmsKind::ALL.iter().position(|&x| x == kind).unwrap();
    CACHE[k].get_or_init(|| {
        let pairings = find_pairings(kind, D, 21).unwrap();
        let fit = fit_on_params(kind, D, &uniform_params(10), &pairings, 1e-8, 5000).unwrap();
        assemble_unit(kind, D, &fit.surfaces, &pairings).unwrap()
    })
}

/// Orientation of `edge` in the face's outer loop: true when the loop runs
/// along increasing edge parameter. The loop is counter-clockwise in (u, v)
/// for a same-sense face.
fn forward_in_loop(edge: Edge, same_sense: bool) -> bool {
    let ccw = matches!(edge, Edge::V0 | Edge::U1);
    ccw == same_sense
}

fn edge_points(model: &SolidModel, e: EdgeUse) -> (Vec3, Vec3) {
    let s = model.placed_surface(e.instance);
    let (a, b) = (e.edge.uv(0.0, 0.0), e.edge.uv(1.0, 0.0));
    (s.eval(a.0, a.1), s.eval(b.0, b.1))
}

/// Signed volume by the divergence theorem with 8-point Gauss–Legendre per face.
fn volume(model: &SolidModel) -> f64 {
    let (x, w) = gauss8();
    let mut vol = 0.0;
    for (k, inst) in model.instances.iter().enumerate() {
        let s = model.placed_surface(k);
        let sign = if inst.same_sense { 1.0 } else { -1.0 };
        for i in 0..8 {
            for j in 0..8 {
                let d = s.derivatives(x[i], x[j]);
                vol += sign * w[i] * w[j] * d.s.dot(&d.su.cross(&d.sv)) / 3.0;
            }
        }
    }
    vol
}

fn gauss8() -> ([f64; 8], [f64; 8]) {
    let n = [0.1834346424956498, 0.5255324099163290, 0.7966664774136267, 0.9602898564975363];
    let w = [0.3626837833783620, 0.3137066458778873, 0.2223810344533745, 0.1012285362903763];
    let mut xs = [0.0; 8];
    let mut ws = [0.0; 8];
    for k in 0..4 {
        xs[k] = 0.5 - 0.5 * n[k];
        xs[7 - k] = 0.5 + 0.5 * n[k];
        ws[k] = 0.5 * w[k];
        ws[7 - k] = 0.5 * w[k];
    }
    (xs, ws)
}

#[test]
fn unit_counts_and_periods_are_stable() {
    for (kind, tiles, period) in
        [(TpmsKind::Gyroid, 96, 2.656243), (TpmsKind::Diamond, 24, 1.685750), (TpmsKind::SchwarzP, 48, 2.156516)]
    {
        let u = unit(kind);
        let cell = u.unit.as_ref().unwrap();
        assert_eq!(cell.tiles.len(), tiles, "{kind}");
        assert!((cell.period - period).abs() < 1e-5, "{kind}: {}", cell.period);
        assert_eq!(u.instances.len(), 2 * tiles);
        assert_eq!(u.gap_instance_count(), 0);
        assert_eq!(u.geometries.len(), 6);
        assert!(!u.closed);
    }
}

#[test]
fn gap_rows_are_the_offset_boundary_rows() {
    for kind in TpmsKind::ALL {
        let u = unit(kind);
        let cell = u.unit.as_ref().unwrap();
        let plus = &u.geometries[cell.plus_ref].surface;
        let minus = &u.geometries[cell.minus_ref.unwrap()].surface;
        for (k, e) in Edge::ALL.into_iter().enumerate() {
            let gap = &u.geometries[cell.gap_refs.unwrap()[k]].surface;
            assert_eq!(gap.boundary_curve(Edge::V0), plus.boundary_curve(e));
            assert_eq!(gap.boundary_curve(Edge::V1), minus.boundary_curve(e).transformed(&cell.minus_base));
        }
    }
}

#[test]
fn unit_seams_match_within_stitch_tolerance() {
    for kind in TpmsKind::ALL {
        let r = check_watertight(unit(kind));
        assert!(r.near_misses.is_empty() && r.overused.is_empty(), "{kind}: {}", r.summary());
        assert!(!r.matched.is_empty() && r.max_gap <= STITCH_TOL);
        assert!(!r.unmatched.is_empty(), "the unit is open");
    }
}

#[test]
fn closed_unit_cells_are_watertight_and_consistently_oriented() {
    for kind in TpmsKind::ALL {
        let u = unit(kind);
        let m = replicate_lattice(u, &LatticeSpec::new(1, 1, 1).unwrap()).unwrap();
        assert!(m.closed && check_watertight(&m).watertight);
        assert_eq!(m.instances.len(), u.instances.len() + m.gap_instance_count());
        assert_eq!(4 * m.instances.len(), 2 * m.adjacency.len());
        for &(a, b) in &m.adjacency {
            let (a0, a1) = edge_points(&m, a);
            let (b0, b1) = edge_points(&m, b);
            let same_dir = (a0 - b0).norm() < 1e-6 && (a1 - b1).norm() < 1e-6;
            let fa = forward_in_loop(a.edge, m.instances[a.instance].same_sense);
            let fb = forward_in_loop(b.edge, m.instances[b.instance].same_sense);
            assert_eq!(fa == fb, !same_dir, "{kind}: {a:?} {b:?}");
        }
        assert!(volume(&m) > 0.0);
    }
}

#[test]
fn replication_doubles_primitives_and_keeps_the_catalog() {
    for kind in TpmsKind::ALL {
        let u = unit(kind);
        let one = replicate_lattice(u, &LatticeSpec::new(1, 1, 1).unwrap()).unwrap();
        let two = replicate_lattice(u, &LatticeSpec::new(2, 1, 1).unwrap()).unwrap();
        assert_eq!(two.primitive_instance_count(), 2 * one.primitive_instance_count());
        assert_eq!(two.geometries.len(), one.geometries.len());
        // Volume is additive over cells.
        let (v1, v2) = (volume(&one), volume(&two));
        assert!((v2 - 2.0 * v1).abs() < 1e-6 * v1, "{kind}: {v1} {v2}");
    }
}

#[test]
fn gyroid_2x2x2_and_uneven_lattices_are_watertight() {
    let u = unit(TpmsKind::Gyroid);
    for (nx, ny, nz) in [(2, 2, 2), (3, 1, 2)] {
        let m = replicate_lattice(u, &LatticeSpec::new(nx, ny, nz).unwrap()).unwrap();
        assert!(check_watertight(&m).watertight);
        assert_eq!(m.primitive_instance_count(), nx * ny * nz * u.instances.len());
    }
}

#[test]
fn lattice_counts_must_be_positive() {
    assert!(matches!(LatticeSpec::new(1, 0, 1), Err(Error::Config { field, .. }) if field == "ny"));
}

#[test]
fn sheet_model_at_zero_offset() {
    let kind = TpmsKind::Diamond;
    let pairings = find_pairings(kind, 0.0, 21).unwrap();
    let fit = fit_on_params(kind, 0.0, &uniform_params(8), &pairings, 1e-8, 5000).unwrap();
    let u = assemble_unit(kind, 0.0, &fit.surfaces, &pairings).unwrap();
    assert!(u.unit.as_ref().unwrap().is_sheet());
    assert_eq!(u.instances.len(), 24);
    let m = replicate_lattice(&u, &LatticeSpec::new(1, 1, 1).unwrap()).unwrap();
    assert!(!m.closed);
    assert_eq!(m.gap_instance_count(), 0);
}

/// Planar patch o + s·a + t·b with normal a × b.
fn square(o: Vec3, a: Vec3, b: Vec3) -> NurbsSurface {
    let k = KnotVector::new(vec![0.0, 0.0, 1.0, 1.0], 1).unwrap();
    NurbsSurface::polynomial(k.clone(), k, vec![o, o + b, o + a, o + a + b]).unwrap()
}

/// Unit cube with outward normals.
fn box_model(skip: Option<usize>) -> SolidModel {
    let (x, y, z, o) = (Vec3::x(), Vec3::y(), Vec3::z(), Vec3::zeros());
    let faces = [
        square(o, y, x),
        square(z, x, y),
        square(o, x, z),
        square(y, z, x),
        square(o, z, y),
        square(x, y, z),
    ];
    let mut m = SolidModel { geometries: Vec::new(), instances: Vec::new(), adjacency: Vec::new(), closed: false, unit: None };
    for (k, f) in faces.into_iter().enumerate() {
        if Some(k) == skip {
            continue;
        }
        m.instances.push(PatchInstance { geometry_ref: m.geometries.len(), placement: RigidTransform::identity(), same_sense: true });
        m.geometries.push(Geometry { surface: f, role: PatchRole::Baked });
    }
    m
}

#[test]
fn box_of_six_faces_is_watertight() {
    let r = check_watertight(&box_model(None));
    assert!(r.watertight, "{}", r.summary());
    assert_eq!(r.matched.len(), 12);
    // Every face normal points outward.
    assert!((volume(&box_model(None)) - 1.0).abs() < 1e-12);
}

#[test]
fn box_missing_a_face_lists_four_open_edges() {
    let r = check_watertight(&box_model(Some(3)));
    assert!(!r.watertight);
    assert_eq!(r.unmatched.len(), 4);
}

#[test]
fn identity_scaling_bakes_placements_exactly() {
    let u = unit(TpmsKind::SchwarzP);
    let m = replicate_lattice(u, &LatticeSpec::new(1, 1, 1).unwrap()).unwrap();
    let s = apply_scaling(&m, &*ScalingField::Identity.deformation(Vec3::zeros(), Vec3::zeros())).unwrap();
    assert_eq!(s.geometries.len(), m.instances.len());
    for k in 0..m.instances.len() {
        assert_eq!(s.geometries[k].surface, m.placed_surface(k));
        assert_eq!(s.instances[k].same_sense, m.instances[k].same_sense);
    }
}

#[test]
fn uniform_scaling_scales_every_control_point() {
    let u = unit(TpmsKind::Diamond);
    let m = replicate_lattice(u, &LatticeSpec::new(1, 1, 1).unwrap()).unwrap();
    let s = apply_scaling(&m, &*ScalingField::Uniform(2.5).deformation(Vec3::zeros(), Vec3::zeros())).unwrap();
    for k in 0..m.instances.len() {
        let a = m.placed_surface(k);
        let b = &s.geometries[k].surface;
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.knots_u, b.knots_u);
        for (p, q) in a.control_points.iter().zip(&b.control_points) {
            assert!((p * 2.5 - q).norm() < 1e-12);
        }
    }
    assert!((volume(&s) - 2.5f64.powi(3) * volume(&m)).abs() < 1e-9 * volume(&s));
    assert!(check_watertight(&s).watertight);
}

#[test]
fn linear_z_grading_makes_cells_taller_upwards() {
    let u = unit(TpmsKind::Diamond);
    let m = replicate_lattice(u, &LatticeSpec::new(1, 1, 3).unwrap()).unwrap();
    let (lo, hi) = m.bounding_box();
    let s = apply_scaling(&m, &*ScalingField::LinearZ(0.5).deformation(lo, hi)).unwrap();
    let per_cell = u.instances.len();
    let heights: Vec<f64> = (0..3)
        .map(|c| {
            let zs = (c * per_cell..(c + 1) * per_cell).flat_map(|k| s.geometries[k].surface.control_points.iter().map(|p| p.z));
            let (mn, mx) = zs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), z| (a.min(z), b.max(z)));
            mx - mn
        })
        .collect();
    assert!(heights[0] < heights[1] && heights[1] < heights[2], "{heights:?}");
    assert!(check_watertight(&s).watertight);
}

#[test]
fn folding_field_is_rejected() {
    let u = unit(TpmsKind::Diamond);
    let (lo, hi) = u.bounding_box();
    let fold = ScalingField::LinearZ(-0.9).deformation(lo, hi);
    assert!(matches!(apply_scaling(u, &*fold), Err(Error::NonInjectiveField)));
    let squash = |p: &Vec3| Vec3::new(p.x, p.y, 0.0);
    assert!(matches!(apply_scaling(u, &squash), Err(Error::NonInjectiveField)));
}

#[test]
fn mirror_field_flips_face_senses() {
    let u = unit(TpmsKind::Diamond);
    let m = replicate_lattice(u, &LatticeSpec::new(1, 1, 1).unwrap()).unwrap();
    let mirror = |p: &Vec3| Vec3::new(-p.x, p.y, p.z);
    let s = apply_scaling(&m, &mirror).unwrap();
    assert!(s.instances.iter().zip(&m.instances).all(|(a, b)| a.same_sense != b.same_sense));
    assert!((volume(&s) - volume(&m)).abs() < 1e-9 * volume(&m));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn uniform_scaling_scales_distances(s in 0.2f64..5.0, a in 0usize..96, b in 0usize..96) {
        let u = unit(TpmsKind::SchwarzP);
        let scaled = apply_scaling(u, &*ScalingField::Uniform(s).deformation(Vec3::zeros(), Vec3::zeros())).unwrap();
        let pa = u.placed_surface(a).eval(0.3, 0.6);
        let pb = u.placed_surface(b).eval(0.7, 0.2);
        let qa = scaled.geometries[a].surface.eval(0.3, 0.6);
        let qb = scaled.geometries[b].surface.eval(0.7, 0.2);
        prop_assert!(((qa - qb).norm() - s * (pa - pb).norm()).abs() < 1e-9 * (1.0 + s));
    }
}
