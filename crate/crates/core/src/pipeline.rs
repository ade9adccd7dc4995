//! End-to-end translation: fit the primitives at ε = tolerance/2, assemble
//! and replicate the cell, optionally scale, write STEP and the reports.

use std::fmt;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::assembly::{self, SolidModel, TopologyReport};
use crate::config::TranslationConfig;
use crate::cpia::{self, ErrorControlReport, PrimitiveFit};
use crate::step_io::{self, StepMeta};
use crate::verify::{self, ContinuityReport, DeviationReport};
use crate::weierstrass::{OffsetSign, OffsetSurface};
use crate::Error;

/// Parameter-grid density per direction for the deviation measurement,
/// chosen so the probes do not line up with typical fitting grids.
pub const DEVIATION_DENSITY: usize = 97;
/// Stations per junction for the continuity measurement.
pub const CONTINUITY_SAMPLES: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Stage {
    Fit,
    Assemble,
    Replicate,
    Scale,
    Write,
    Verify,
    Reports,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Fit => "fit",
            Stage::Assemble => "assemble",
            Stage::Replicate => "replicate",
            Stage::Scale => "scale",
            Stage::Write => "write",
            Stage::Verify => "verify",
            Stage::Reports => "reports",
        };
        f.write_str(s)
    }
}

/// A pipeline failure tagged with the stage that raised it.
#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, StageError>;
}

impl<T, E: Into<Error>> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, StageError> {
        self.map_err(|e| StageError { stage, source: e.into() })
    }
}

/// Wall-clock seconds per stage.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Timings {
    pub fit: f64,
    pub assemble: f64,
    pub write: f64,
    pub verify: f64,
    pub total: f64,
}

/// Everything a run produced, besides the files.
#[derive(Clone, Debug, Serialize)]
pub struct TranslationOutcome {
    pub config: TranslationConfig,
    pub step_path: PathBuf,
    pub step_bytes: usize,
    /// True when the model is a solid and its shell closed.
    pub watertight: bool,
    pub sheet: bool,
    pub topology: TopologyReport,
    pub deviation: DeviationReport,
    pub continuity: Vec<ContinuityReport>,
    pub max_first_pct: f64,
    pub max_second_pct: f64,
    pub constraint_residual: f64,
    pub error_control: ErrorControlReport,
    pub geometries: usize,
    pub instances: usize,
    pub timings: Timings,
}

impl TranslationOutcome {
    /// Exit criterion: the shell closed (or the model is a sheet) and the
    /// unscaled deviation is within the tolerance.
    pub fn success(&self) -> bool {
        (self.watertight || self.sheet) && self.deviation.max_dev <= self.config.tolerance
    }
}

/// Fits the primitives of `cfg` and measures them; no files are written.
pub fn fit_and_measure(cfg: &TranslationConfig) -> Result<(PrimitiveFit, ErrorControlReport, DeviationReport), StageError> {
    let (fit, control) = cpia::fit_with_error_control(cfg.kind, cfg.offset, cfg.tolerance / 2.0).at(Stage::Fit)?;
    let deviation = measure_primitives(&fit, cfg.tolerance).at(Stage::Verify)?;
    Ok((fit, control, deviation))
}

/// Deviation of every fitted primitive from its analytic offset surface.
pub fn measure_primitives(fit: &PrimitiveFit, tolerance: f64) -> crate::Result<DeviationReport> {
    let signs = [OffsetSign::Plus, OffsetSign::Minus];
    let reports = fit
        .surfaces
        .iter()
        .zip(signs)
        .map(|(s, sign)| {
            let reference = OffsetSurface::new(fit.kind, sign.factor() * fit.offset);
            verify::measure_deviation(s, &reference, DEVIATION_DENSITY, tolerance, true)
        })
        .collect::<crate::Result<Vec<_>>>()?;
    Ok(DeviationReport::merge(reports))
}

/// Assembles, replicates and optionally scales the fitted primitives.
pub fn build_model(cfg: &TranslationConfig, fit: &PrimitiveFit) -> Result<SolidModel, StageError> {
    let pairings = &fit.problem.constraints.as_ref().expect("fits carry their constraint set").pairings;
    let unit = assembly::assemble_unit(cfg.kind, cfg.offset, &fit.surfaces, pairings).at(Stage::Assemble)?;
    let model = assembly::replicate_lattice(&unit, &cfg.lattice).at(Stage::Replicate)?;
    if cfg.scaling.is_identity() {
        return Ok(model);
    }
    let (lo, hi) = model.bounding_box();
    assembly::apply_scaling(&model, &*cfg.scaling.deformation(lo, hi)).at(Stage::Scale)
}

/// Runs the whole translation and writes the STEP file and reports.
pub fn run_translate(cfg: &TranslationConfig) -> Result<TranslationOutcome, StageError> {
    let start = Instant::now();
    let mut timings = Timings::default();

    let (fit, control) = cpia::fit_with_error_control(cfg.kind, cfg.offset, cfg.tolerance / 2.0).at(Stage::Fit)?;
    timings.fit = start.elapsed().as_secs_f64();

    let t = Instant::now();
    let model = build_model(cfg, &fit)?;
    timings.assemble = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let name = format!("{}_d{}", cfg.kind, cfg.offset);
    let (_, bytes) = step_io::write_step(&model, &StepMeta::new(&name, cfg.tolerance)).at(Stage::Write)?;
    if let Some(dir) = cfg.output_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(Stage::Write)?;
    }
    fs::write(&cfg.output_path, &bytes).at(Stage::Write)?;
    timings.write = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let topology = assembly::check_watertight(&model);
    let deviation = measure_primitives(&fit, cfg.tolerance).at(Stage::Verify)?;
    let pairings = &fit.problem.constraints.as_ref().expect("fits carry their constraint set").pairings;
    let continuity = verify::pairing_continuity(&fit.surfaces, pairings, CONTINUITY_SAMPLES).at(Stage::Verify)?;
    timings.verify = t.elapsed().as_secs_f64();
    timings.total = start.elapsed().as_secs_f64();

    let sheet = model.unit.as_ref().is_some_and(|u| u.is_sheet());
    let outcome = TranslationOutcome {
        config: cfg.clone(),
        step_path: cfg.output_path.clone(),
        step_bytes: bytes.len(),
        watertight: model.closed && topology.watertight,
        sheet,
        max_first_pct: continuity.iter().map(|r| r.first_max).fold(0.0, f64::max),
        max_second_pct: continuity.iter().map(|r| r.second_max).fold(0.0, f64::max),
        constraint_residual: control.constraint_residual,
        topology,
        deviation,
        continuity,
        error_control: control,
        geometries: model.geometries.len(),
        instances: model.instances.len(),
        timings,
    };
    write_reports(&cfg.report_dir, &outcome, &fit).at(Stage::Reports)?;
    Ok(outcome)
}

/// Writes `deviation.csv/json`, `deviation_cloud.xyz`, `continuity.csv`,
/// `convergence.csv`, `topology.json` and `summary.json` under `dir`.
pub fn write_reports(dir: &Path, outcome: &TranslationOutcome, fit: &PrimitiveFit) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let create = |name: &str| File::create(dir.join(name)).map(BufWriter::new);
    outcome.deviation.write_csv(create("deviation.csv")?)?;
    fs::write(dir.join("deviation.json"), outcome.deviation.to_json())?;
    outcome.deviation.write_cloud(create("deviation_cloud.xyz")?)?;
    verify::write_continuity_csv(&outcome.continuity, create("continuity.csv")?)?;
    fit.state.write_history_csv(create("convergence.csv")?)?;
    fs::write(dir.join("topology.json"), serde_json::to_string_pretty(&outcome.topology)?)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(outcome)?)?;
    Ok(())
}
