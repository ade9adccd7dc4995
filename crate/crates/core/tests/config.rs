use tpms2step_core::assembly::{LatticeSpec, ScalingField};
use tpms2step_core::config::*;
use tpms2step_core::weierstrass::TpmsKind;
use tpms2step_core::Error;

fn field(r: tpms2step_core::Result<TranslationConfig>) -> String {
    match r {
        Err(Error::Config { field, .. }) => field,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn defaults_apply_for_missing_keys() {
    let cfg = TranslationConfig::from_pairs([("kind", "gyroid")]).unwrap();
    assert_eq!(cfg.kind, TpmsKind::Gyroid);
    assert_eq!(cfg.offset, 0.0);
    assert_eq!(cfg.tolerance, 0.01);
    assert_eq!(cfg.lattice, LatticeSpec::new(1, 1, 1).unwrap());
    assert_eq!(cfg.scaling, ScalingField::Identity);
}

#[test]
fn file_then_overrides() {
    let text = "# lattice job\nkind = Diamond\noffset = 0.2\n\ntolerance=0.02\nNX = 2\nscaling = uniform(2.5)\nout = a.step\n";
    let pairs = parse_config_text(text).unwrap();
    assert_eq!(pairs.len(), 6);
    let overrides = [("offset", "-0.1"), ("nz", "3")];
    let cfg = TranslationConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())).chain(overrides)).unwrap();
    assert_eq!(cfg.kind, TpmsKind::Diamond);
    assert_eq!(cfg.offset, -0.1);
    assert_eq!(cfg.tolerance, 0.02);
    assert_eq!(cfg.lattice, LatticeSpec::new(2, 1, 3).unwrap());
    assert_eq!(cfg.scaling, ScalingField::Uniform(2.5));
    assert_eq!(cfg.output_path.to_str(), Some("a.step"));
}

#[test]
fn invalid_values_name_their_field() {
    assert_eq!(field(TranslationConfig::from_pairs([("kind", "P"), ("tolerance", "-1")])), "tolerance");
    assert_eq!(field(TranslationConfig::from_pairs([("kind", "P"), ("tolerance", "0")])), "tolerance");
    assert_eq!(field(TranslationConfig::from_pairs([("kind", "P"), ("tolerance", "abc")])), "tolerance");
    assert_eq!(field(TranslationConfig::from_pairs([("kind", "P"), ("offset", "0.5")])), "offset");
    assert_eq!(field(TranslationConfig::from_pairs([("kind", "P"), ("offset", "NaN")])), "offset");
    assert_eq!(field(TranslationConfig::from_pairs([("kind", "P"), ("ny", "0")])), "ny");
    assert_eq!(field(TranslationConfig::from_pairs([("kind", "P"), ("scaling", "uniform(-2)")])), "scaling");
    assert_eq!(field(TranslationConfig::from_pairs([("kind", "Schwarz D")])), "kind");
    assert_eq!(field(TranslationConfig::from_pairs([("offset", "0.1")])), "kind");
    assert_eq!(field(TranslationConfig::from_pairs([("kind", "P"), ("colour", "red")])), "colour");
}

#[test]
fn offset_range_is_inclusive() {
    for d in ["0", "0.4", "-0.4"] {
        assert!(TranslationConfig::from_pairs([("kind", "G"), ("offset", d)]).is_ok(), "{d}");
    }
}

#[test]
fn config_text_errors() {
    assert!(matches!(parse_config_text("kind Gyroid"), Err(Error::Config { .. })));
    assert!(matches!(parse_config_text("speed = 3"), Err(Error::Config { field, .. }) if field == "speed"));
}

#[test]
fn scaling_registry() {
    assert_eq!(parse_scaling("identity").unwrap(), ScalingField::Identity);
    assert_eq!(parse_scaling(" Uniform( 3 ) ").unwrap(), ScalingField::Uniform(3.0));
    assert_eq!(parse_scaling("linear-z(0.5)").unwrap(), ScalingField::LinearZ(0.5));
    assert!(parse_scaling("twist(1)").is_err());
    assert!(parse_scaling("uniform").is_err());
    assert!(parse_scaling("uniform(x)").is_err());
}
