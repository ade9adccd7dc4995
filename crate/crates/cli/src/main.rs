//! `tpms2step`: translate a TPMS lattice into a STEP B-rep.
//!
//! Exit status is 0 when the model is watertight (or a d = 0 sheet) and the
//! measured deviation is within the tolerance, 1 when the checks fail or a
//! stage errors, and 2 for invalid configuration.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use tpms2step_core::config::{parse_config_text, TranslationConfig};
use tpms2step_core::pipeline::run_translate;
use tpms2step_core::Error;

/// Environment variable capping the worker thread count.
const THREADS_VAR: &str = "TPMS2STEP_THREADS";

#[derive(Parser, Debug)]
#[command(name = "tpms2step", version, about = "Translate a triply periodic minimal surface lattice into a STEP solid")]
struct Args {
    /// Flat `key = value` config file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Gyroid, Diamond or SchwarzP.
    #[arg(long)]
    kind: Option<String>,
    /// Offset d in mm, |d| <= 0.4.
    #[arg(long, allow_hyphen_values = true)]
    offset: Option<String>,
    /// Total deviation bound in mm.
    #[arg(long, allow_hyphen_values = true)]
    tolerance: Option<String>,
    #[arg(long)]
    nx: Option<String>,
    #[arg(long)]
    ny: Option<String>,
    #[arg(long)]
    nz: Option<String>,
    /// identity, uniform(s) or linear-z(a).
    #[arg(long, allow_hyphen_values = true)]
    scaling: Option<String>,
    /// Output STEP path.
    #[arg(long)]
    out: Option<String>,
    /// Directory for the deviation, continuity and convergence reports.
    #[arg(long)]
    reports: Option<String>,
}

impl Args {
    fn overrides(&self) -> Vec<(&'static str, &str)> {
        let flags = [
            ("kind", &self.kind),
            ("offset", &self.offset),
            ("tolerance", &self.tolerance),
            ("nx", &self.nx),
            ("ny", &self.ny),
            ("nz", &self.nz),
            ("scaling", &self.scaling),
            ("out", &self.out),
            ("reports", &self.reports),
        ];
        flags.into_iter().filter_map(|(k, v)| v.as_deref().map(|v| (k, v))).collect()
    }
}

fn load_config(args: &Args) -> Result<TranslationConfig, Error> {
    let file = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config { field: "config".into(), msg: format!("{}: {e}", path.display()) })?;
            parse_config_text(&text)?
        }
        None => Vec::new(),
    };
    let pairs = file.iter().map(|(k, v)| (k.as_str(), v.as_str())).chain(args.overrides());
    TranslationConfig::from_pairs(pairs)
}

fn configure_threads() -> Result<(), Error> {
    let Ok(value) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n = value
        .trim()
        .parse::<usize>()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config { field: THREADS_VAR.into(), msg: format!("expected a positive integer, got '{value}'") })?;
    // Fails only if a pool already exists, which cannot happen this early.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    let cfg = match configure_threads().and_then(|_| load_config(&args)) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let outcome = match run_translate(&cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let d = &outcome.deviation;
    println!("kind        {} d = {} mm, {} cell(s)", cfg.kind, cfg.offset, cfg.lattice.cells());
    println!("step        {} ({} bytes, {} surfaces, {} faces)", outcome.step_path.display(), outcome.step_bytes, outcome.geometries, outcome.instances);
    let shell = if outcome.sheet { "open sheet (d = 0)".to_string() } else { outcome.topology.summary() };
    println!("topology    {shell}");
    println!("deviation   max {:.3e} mm, mean {:.3e} mm, tolerance {} mm", d.max_dev, d.mean_dev, cfg.tolerance);
    println!("continuity  first {:.3e}%, second {:.3e}%", outcome.max_first_pct, outcome.max_second_pct);
    println!("fit         {} nodes, {} rounds, {:.1} s", outcome.error_control.final_nodes, outcome.error_control.rounds, outcome.timings.fit);
    println!("reports     {}", cfg.report_dir.display());
    if outcome.success() {
        ExitCode::SUCCESS
    } else {
        eprintln!("error: checks failed (watertight {}, max deviation {:.3e} mm)", outcome.watertight, d.max_dev);
        ExitCode::from(1)
    }
}
