use std::sync::OnceLock;

use proptest::prelude::*;
use tpms2step_core::assembly::*;
use tpms2step_core::constraints::find_pairings;
use tpms2step_core::cpia::fit_on_params;
use tpms2step_core::geom::{RigidTransform, Vec3};
use tpms2step_core::nurbs::{uniform_params, KnotVector, NurbsSurface};
use tpms2step_core::step_io::*;
use tpms2step_core::weierstrass::TpmsKind;
use tpms2step_core::Error;

fn unit(kind: TpmsKind) -> &'static SolidModel {
    static CACHE: [OnceLock<SolidModel>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    let k = TpmsKind::ALL.iter().position(|&x| x == kind).unwrap();
    CACHE[k].get_or_init(|| {
        let pairings = find_pairings(kind, 0.3, 21).unwrap();
        let fit = fit_on_params(kind, 0.3, &uniform_params(10), &pairings, 1e-8, 5000).unwrap();
        assemble_unit(kind, 0.3, &fit.surfaces, &pairings).unwrap()
    })
}

fn closed(kind: TpmsKind, n: usize) -> SolidModel {
    replicate_lattice(unit(kind), &LatticeSpec::new(n, n, n).unwrap()).unwrap()
}

fn bicubic() -> NurbsSurface {
    let k = KnotVector::clamped_uniform(4, 3).unwrap();
    let net = (0..16).map(|m| Vec3::new((m / 4) as f64, (m % 4) as f64, 0.1 * ((m * 7) % 5) as f64)).collect();
    let mut s = NurbsSurface::polynomial(k.clone(), k, net).unwrap();
    s.weights[5] = 1.5;
    s
}

fn single_patch() -> SolidModel {
    SolidModel {
        geometries: vec![Geometry { surface: bicubic(), role: PatchRole::Baked }],
        instances: vec![PatchInstance { geometry_ref: 0, placement: RigidTransform::identity(), same_sense: true }],
        adjacency: Vec::new(),
        closed: false,
        unit: None,
    }
}

fn meta() -> StepMeta {
    StepMeta::new("part", 0.01)
}

#[test]
fn single_patch_has_one_surface_and_sixteen_points() {
    let (doc, bytes) = write_step(&single_patch(), &meta()).unwrap();
    assert_eq!(doc.count("CARTESIAN_POINT"), 16);
    assert_eq!(doc.count("B_SPLINE_SURFACE"), 1);
    assert_eq!(doc.count("B_SPLINE_CURVE"), 4);
    assert_eq!(doc.count("ADVANCED_FACE"), 1);
    assert_eq!(doc.count("OPEN_SHELL"), 1);
    assert_eq!(doc.count("CLOSED_SHELL"), 0);
    let text = String::from_utf8(bytes).unwrap();
    assert!(text.starts_with("ISO-10303-21;\n"));
    assert!(text.ends_with("END-ISO-10303-21;\n"));
    assert!(!text.contains('\r'));
}

#[test]
fn control_points_and_weights_survive_bit_exactly() {
    let (_, bytes) = write_step(&single_patch(), &meta()).unwrap();
    let doc = parse_step(&bytes).unwrap();
    let surfaces = doc.surfaces().unwrap();
    assert_eq!(surfaces.len(), 1);
    assert_eq!(surfaces[0].1, bicubic());
}

#[test]
fn catalog_surfaces_round_trip() {
    let model = closed(TpmsKind::SchwarzP, 1);
    let (_, bytes) = write_step(&model, &meta()).unwrap();
    let parsed: Vec<NurbsSurface> = parse_step(&bytes).unwrap().surfaces().unwrap().into_iter().map(|(_, s)| s).collect();
    let catalog: Vec<NurbsSurface> = model.geometries.iter().map(|g| g.surface.clone()).collect();
    assert_eq!(parsed, catalog);
}

#[test]
fn write_parse_write_is_byte_identical() {
    for kind in TpmsKind::ALL {
        let (doc, bytes) = write_step(&closed(kind, 1), &meta()).unwrap();
        let parsed = parse_step(&bytes).unwrap();
        assert_eq!(parsed, doc, "{kind}");
        assert_eq!(parsed.to_bytes(), bytes, "{kind}");
    }
}

#[test]
fn output_is_deterministic() {
    let model = closed(TpmsKind::Diamond, 2);
    let a = write_step(&model, &meta()).unwrap().1;
    let b = write_step(&model, &meta()).unwrap().1;
    assert_eq!(a, b);
}

#[test]
fn geometry_is_written_once_per_catalog_entry() {
    for kind in TpmsKind::ALL {
        for n in [1, 2] {
            let model = closed(kind, n);
            let (doc, _) = write_step(&model, &meta()).unwrap();
            assert_eq!(doc.count("B_SPLINE_SURFACE"), model.geometries.len(), "{kind} {n}");
            assert_eq!(doc.count("ADVANCED_FACE"), model.instances.len());
            assert_eq!(doc.count("CLOSED_SHELL"), 1);
            assert_eq!(doc.count("MANIFOLD_SOLID_BREP"), 1);
            assert!(doc.is_acyclic());
        }
    }
}

#[test]
fn closed_shell_uses_every_edge_twice_in_opposite_directions() {
    let (doc, _) = write_step(&closed(TpmsKind::Gyroid, 1), &meta()).unwrap();
    let mut uses: std::collections::HashMap<u64, Vec<bool>> = Default::default();
    for e in &doc.entities {
        if let Some(r) = e.record("ORIENTED_EDGE") {
            let edge = r.args[3].as_ref_id().unwrap();
            uses.entry(edge).or_default().push(matches!(&r.args[4], Param::Enum(s) if s == "T"));
        }
    }
    assert_eq!(uses.len(), doc.count("EDGE_CURVE"));
    for (id, dirs) in uses {
        assert_eq!(dirs.len(), 2, "edge #{id}");
        assert_ne!(dirs[0], dirs[1], "edge #{id}");
    }
}

#[test]
fn baked_model_has_no_replicas() {
    let model = closed(TpmsKind::Diamond, 1);
    let phi = ScalingField::Uniform(2.0);
    let (lo, hi) = model.bounding_box();
    let baked = apply_scaling(&model, &*phi.deformation(lo, hi)).unwrap();
    let (doc, _) = write_step(&baked, &meta()).unwrap();
    assert_eq!(doc.count("SURFACE_REPLICA"), 0);
    assert_eq!(doc.count("B_SPLINE_SURFACE"), baked.instances.len());
}

#[test]
fn lattice_file_grows_sublinearly() {
    // Nets near the pipeline's size; coarser nets make topology dominate.
    let pairings = find_pairings(TpmsKind::Diamond, 0.3, 21).unwrap();
    let fit = fit_on_params(TpmsKind::Diamond, 0.3, &uniform_params(41), &pairings, 1e-8, 5000).unwrap();
    let unit = assemble_unit(TpmsKind::Diamond, 0.3, &fit.surfaces, &pairings).unwrap();
    let size = |n| write_step(&replicate_lattice(&unit, &LatticeSpec::new(n, n, n).unwrap()).unwrap(), &meta()).unwrap().1.len();
    let ratio = size(2) as f64 / size(1) as f64;
    assert!(ratio < 3.0, "ratio {ratio}");
}

#[test]
fn unresolved_geometry_is_rejected() {
    let mut model = single_patch();
    model.instances[0].geometry_ref = 3;
    assert!(matches!(write_step(&model, &meta()), Err(Error::UnresolvedGeometry(3))));
}

#[test]
fn unwatertight_closed_model_is_rejected() {
    let mut model = single_patch();
    model.closed = true;
    assert!(matches!(write_step(&model, &meta()), Err(Error::Topology(_))));
}

const SMALL: &str = "ISO-10303-21;
HEADER;
FILE_DESCRIPTION(('x'),'2;1');
ENDSEC;
DATA;
#1=CARTESIAN_POINT('',(0.,1.5E0,-2.));
#2=DIRECTION('',(0.,0.,1.));
#3=AXIS2_PLACEMENT_3D('',#1,#2,$);
ENDSEC;
END-ISO-10303-21;
";

#[test]
fn parses_hand_written_file_with_comments_and_whitespace() {
    let doc = parse_step(SMALL.as_bytes()).unwrap();
    assert_eq!(doc.entities.len(), 3);
    let spaced = SMALL.replace("#3=", "/* placement */\n#3 =\n  ").replace(",#2", " , #2");
    assert_eq!(parse_step(spaced.as_bytes()).unwrap(), doc);
    let p = doc.entity(1).unwrap().record("CARTESIAN_POINT").unwrap();
    let c: Vec<f64> = p.args[1].as_list().unwrap().iter().filter_map(Param::as_real).collect();
    assert_eq!(c, vec![0.0, 1.5, -2.0]);
    assert!(matches!(doc.entity(3).unwrap().record("AXIS2_PLACEMENT_3D").unwrap().args[3], Param::Unset));
}

#[test]
fn missing_terminator_is_a_syntax_error() {
    let cut = SMALL.replace("END-ISO-10303-21;\n", "");
    assert!(matches!(parse_step(cut.as_bytes()), Err(Error::Syntax { .. })));
}

#[test]
fn syntax_errors_carry_position() {
    let bad = SMALL.replace("#2=DIRECTION('',(0.,0.,1.));", "#2=DIRECTION('',(0.,0.,1.);");
    match parse_step(bad.as_bytes()) {
        Err(Error::Syntax { line, col, .. }) => {
            assert_eq!(line, 7);
            assert!(col > 1);
        }
        other => panic!("expected syntax error, got {other:?}"),
    }
}

#[test]
fn dangling_and_duplicate_references_are_rejected() {
    let dangling = SMALL.replace("#1,#2,$", "#1,#999,$");
    assert!(matches!(parse_step(dangling.as_bytes()), Err(Error::DanglingReference(999))));
    let duplicate = SMALL.replace("#3=", "#2=");
    assert!(parse_step(duplicate.as_bytes()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn reals_round_trip_bit_exactly(x in proptest::num::f64::NORMAL | proptest::num::f64::ZERO | proptest::num::f64::SUBNORMAL) {
        let doc = StepDocument {
            header: vec![Record::new("FILE_DESCRIPTION", vec![Param::List(vec![]), Param::str("2;1")])],
            entities: vec![StepEntity {
                id: 1,
                body: EntityBody::Simple(Record::new("CARTESIAN_POINT", vec![Param::str(""), Param::reals([x, -x, 0.0])])),
            }],
        };
        let parsed = parse_step(&doc.to_bytes()).unwrap();
        let r = parsed.entity(1).unwrap().record("CARTESIAN_POINT").unwrap();
        let c: Vec<u64> = r.args[1].as_list().unwrap().iter().map(|p| p.as_real().unwrap().to_bits()).collect();
        prop_assert_eq!(c, vec![x.to_bits(), (-x).to_bits(), 0f64.to_bits()]);
    }
}
