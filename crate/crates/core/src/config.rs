//! Translation settings: a flat `key = value` file with command-line
//! overrides, validated into a [`TranslationConfig`].

use std::path::PathBuf;

use serde::Serialize;

use crate::assembly::{LatticeSpec, ScalingField};
use crate::weierstrass::TpmsKind;
use crate::{Error, Result};

/// Largest supported |offset| in mm.
pub const MAX_OFFSET: f64 = 0.4;

/// Recognised keys, in the order they are documented.
pub const KEYS: [&str; 9] = ["kind", "offset", "tolerance", "nx", "ny", "nz", "scaling", "out", "reports"];

#[derive(Clone, Debug, Serialize)]
pub struct TranslationConfig {
    pub kind: TpmsKind,
    /// Offset d in mm; the solid is the shell between the ±d surfaces.
    pub offset: f64,
    /// Total deviation bound in mm, split evenly between sampling and fitting.
    pub tolerance: f64,
    pub lattice: LatticeSpec,
    pub scaling: ScalingField,
    pub output_path: PathBuf,
    pub report_dir: PathBuf,
}

impl TranslationConfig {
    /// Defaults for everything but the kind: d = 0, tolerance 0.01 mm, one
    /// cell, no scaling, `out.step` and `reports/`.
    pub fn new(kind: TpmsKind) -> Self {
        Self {
            kind,
            offset: 0.0,
            tolerance: 0.01,
            lattice: LatticeSpec::new(1, 1, 1).expect("unit lattice"),
            scaling: ScalingField::Identity,
            output_path: PathBuf::from("out.step"),
            report_dir: PathBuf::from("reports"),
        }
    }

    /// Builds a config from `(key, value)` pairs applied in order, so later
    /// pairs override earlier ones. `kind` is required.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut kind = None;
        let mut rest = Vec::new();
        for (k, v) in pairs {
            if k == "kind" {
                kind = Some(v.parse::<TpmsKind>().map_err(|msg| config("kind", msg))?);
            } else {
                rest.push((k, v));
            }
        }
        let mut cfg = Self::new(kind.ok_or_else(|| config("kind", "missing"))?);
        let (mut nx, mut ny, mut nz) = (1, 1, 1);
        for (k, v) in rest {
            match k {
                "offset" => cfg.offset = real(k, v)?,
                "tolerance" => cfg.tolerance = real(k, v)?,
                "nx" => nx = count(k, v)?,
                "ny" => ny = count(k, v)?,
                "nz" => nz = count(k, v)?,
                "scaling" => cfg.scaling = parse_scaling(v)?,
                "out" => cfg.output_path = PathBuf::from(v),
                "reports" => cfg.report_dir = PathBuf::from(v),
                _ => return Err(config(k, "unknown key")),
            }
        }
        cfg.lattice = LatticeSpec::new(nx, ny, nz)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks the ranges that parsing alone does not enforce.
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) || !self.tolerance.is_finite() {
            return Err(config("tolerance", format!("must be positive, got {}", self.tolerance)));
        }
        if !(self.offset.abs() <= MAX_OFFSET) {
            return Err(config("offset", format!("|d| must be at most {MAX_OFFSET}, got {}", self.offset)));
        }
        match self.scaling {
            ScalingField::Uniform(s) if !(s > 0.0 && s.is_finite()) => {
                Err(config("scaling", format!("uniform factor must be positive, got {s}")))
            }
            ScalingField::LinearZ(a) if !a.is_finite() => Err(config("scaling", "linear-z slope must be finite")),
            _ => Ok(()),
        }
    }
}

/// Parses `key = value` lines. Blank lines and lines starting with `#` are
/// skipped; keys are lower-cased.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| config(&format!("line {}", n + 1), "expected key = value"))?;
        let k = k.trim().to_ascii_lowercase();
        if !KEYS.contains(&k.as_str()) {
            return Err(config(&k, "unknown key"));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

/// Parses `identity`, `uniform(s)` or `linear-z(a)`.
pub fn parse_scaling(s: &str) -> Result<ScalingField> {
    let s = s.trim().to_ascii_lowercase();
    if s == "identity" || s == "none" {
        return Ok(ScalingField::Identity);
    }
    let (name, arg) = s
        .strip_suffix(')')
        .and_then(|t| t.split_once('('))
        .ok_or_else(|| config("scaling", format!("expected identity, uniform(s) or linear-z(a), got '{s}'")))?;
    let x = real("scaling", arg.trim())?;
    match name.trim() {
        "uniform" => Ok(ScalingField::Uniform(x)),
        "linear-z" | "linear_z" | "linearz" => Ok(ScalingField::LinearZ(x)),
        other => Err(config("scaling", format!("unknown field '{other}'"))),
    }
}

fn config(field: &str, msg: impl Into<String>) -> Error {
    Error::Config { field: field.into(), msg: msg.into() }
}

fn real(field: &str, v: &str) -> Result<f64> {
    v.parse::<f64>().map_err(|_| config(field, format!("expected a number, got '{v}'")))
}

fn count(field: &str, v: &str) -> Result<usize> {
    v.parse::<usize>().map_err(|_| config(field, format!("expected a cell count, got '{v}'")))
}
