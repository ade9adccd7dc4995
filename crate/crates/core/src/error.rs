//! Error type shared by every stage of the pipeline.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("branch point: |1 - 14t^4 + t^8| = {0:e} is below the guard threshold")]
    BranchPoint(f64),
    #[error("quadrature did not converge: {0}")]
    Quadrature(String),
    #[error("degenerate normal (|n| = {0:e})")]
    DegenerateNormal(f64),
    #[error("parameter ({u}, {v}) could not be mapped into the fundamental patch")]
    Parameterization { u: f64, v: f64 },
    #[error("degenerate surface: all second-derivative bounds are below 1e-12")]
    DegenerateSurface,
    #[error("invalid tolerance {0}: must be positive")]
    InvalidTolerance(f64),
    #[error("basis index {index} out of range ({count} basis functions)")]
    Index { index: usize, count: usize },
    #[error("invalid knot vector: {0}")]
    InvalidKnots(String),
    #[error("grid shape: {0}")]
    GridShape(String),
    #[error("degenerate correspondence: point sets are collinear or too small")]
    DegenerateCorrespondence,
    #[error("correspondence is not rigid: residual {residual:e} exceeds {limit:e}")]
    NonRigid { residual: f64, limit: f64 },
    #[error("no rigid pairing found for edge {0}")]
    PairingNotFound(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("CPIA diverged at iteration {iteration}")]
    Divergence { iteration: usize, history: Vec<f64> },
    #[error("CPIA stopped after {max_iter} iterations with max update {last:e}")]
    MaxIter { max_iter: usize, last: f64, history: Vec<f64> },
    #[error("refinement stalled after {0} rounds")]
    RefinementStall(usize),
    #[error("seam mismatch of {0:e} mm exceeds the stitch tolerance")]
    SeamMismatch(f64),
    #[error("topology: {0}")]
    Topology(String),
    #[error("scaling field is not injective (Jacobian determinant changes sign)")]
    NonInjectiveField,
    #[error("instance references unknown geometry {0}")]
    UnresolvedGeometry(usize),
    #[error("syntax error at line {line}, column {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("dangling reference #{0}")]
    DanglingReference(u64),
    #[error("pairing mismatch: {0}")]
    PairingMismatch(String),
    #[error("invalid configuration: {field}: {msg}")]
    Config { field: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
