//! Progressive iterative approximation with hard C² junction constraints,
//! Zheng's a-posteriori error estimate and adaptive sample refinement.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::constraints::{ConstraintProjector, ConstraintSet, EdgePairing};
use crate::geom::Vec3;
use crate::nurbs::{setup_for_params, uniform_params, BasisTable, FitSetup, NurbsSurface};
use crate::sampling::{self, DerivativeBounds, SampleGrid};
use crate::weierstrass::{OffsetSign, OffsetSurface, TpmsKind};
use crate::{Error, Result};

/// Growth factor and window of the divergence guard.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
pub const DIVERGENCE_WINDOW: usize = 20;
/// Consecutive refinement rounds without improvement before giving up.
pub const STALL_ROUNDS: usize = 10;
/// Default CPIA stopping tolerance on the max control-point update, mm.
pub const DEFAULT_FIT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 20000;
/// Smallest grid on which the three-row C² bands at opposite edges do not
/// overlap; on 4 × 4 nets the constraint lines are inconsistent.
pub const MIN_CONSTRAINED_NODES: usize = 5;

/// Sample grids (one per net) with their fitting setup and optional
/// junction constraints. Control count equals sample count per direction.
#[derive(Clone, Debug)]
pub struct FitProblem {
    pub samples: Vec<Vec<Vec3>>,
    pub setup: FitSetup,
    pub constraints: Option<ConstraintSet>,
    projector: Option<ConstraintProjector>,
    basis_u: BasisTable,
    basis_v: BasisTable,
}

impl FitProblem {
    pub fn new(samples: Vec<Vec<Vec3>>, setup: FitSetup, constraints: Option<ConstraintSet>) -> Result<Self> {
        let (nu, nv) = (setup.params_u.len(), setup.params_v.len());
        if setup.knots_u.n_ctrl() != nu || setup.knots_v.n_ctrl() != nv {
            return Err(Error::ShapeMismatch(format!(
                "knots give {}x{} control points for {nu}x{nv} samples",
                setup.knots_u.n_ctrl(),
                setup.knots_v.n_ctrl()
            )));
        }
        if setup.weights.len() != nu * nv || setup.weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::ShapeMismatch("weights must be positive, one per control point".into()));
        }
        if samples.is_empty() || samples.iter().any(|s| s.len() != nu * nv) {
            return Err(Error::ShapeMismatch(format!("every sample grid must hold {nu}x{nv} points")));
        }
        let projector = match &constraints {
            Some(cs) => {
                cs.check_shape(&samples)?;
                Some(ConstraintProjector::new(cs)?)
            }
            None => None,
        };
        let basis_u = BasisTable::new(&setup.knots_u, &setup.params_u);
        let basis_v = BasisTable::new(&setup.knots_v, &setup.params_v);
        Ok(Self { samples, setup, constraints, projector, basis_u, basis_v })
    }

    pub fn nu(&self) -> usize {
        self.setup.params_u.len()
    }

    pub fn nv(&self) -> usize {
        self.setup.params_v.len()
    }

    pub fn net_count(&self) -> usize {
        self.samples.len()
    }

    /// The surface of `net` evaluated at every sample parameter.
    pub fn evaluate_net(&self, net: &[Vec3]) -> Vec<Vec3> {
        let (nu, nv) = (self.nu(), self.nv());
        let w = &self.setup.weights;
        let (pu, pv) = (self.basis_u.degree, self.basis_v.degree);
        // Contract along v first: rows a of the control net, columns j of the samples.
        let mut num = vec![Vec3::zeros(); nu * nv];
        let mut den = vec![0.0; nu * nv];
        for a in 0..nu {
            for (j, (&span, vals)) in self.basis_v.spans.iter().zip(&self.basis_v.values).enumerate() {
                let mut acc = Vec3::zeros();
                let mut wacc = 0.0;
                for (k, &nb) in vals.iter().enumerate() {
                    let b = span - pv + k;
                    let wk = w[a * nv + b] * nb;
                    acc += net[a * nv + b] * wk;
                    wacc += wk;
                }
                num[a * nv + j] = acc;
                den[a * nv + j] = wacc;
            }
        }
        let mut out = vec![Vec3::zeros(); nu * nv];
        out.par_chunks_mut(nv).enumerate().for_each(|(i, row)| {
            let span = self.basis_u.spans[i];
            let vals = &self.basis_u.values[i];
            for (j, o) in row.iter_mut().enumerate() {
                let mut acc = Vec3::zeros();
                let mut wacc = 0.0;
                for (k, &na) in vals.iter().enumerate() {
                    let a = span - pu + k;
                    acc += num[a * nv + j] * na;
                    wacc += den[a * nv + j] * na;
                }
                *o = acc / wacc;
            }
        });
        out
    }

    /// Max ‖S(u_i, v_j) − Q_ij‖ over all nets.
    pub fn data_deviation(&self, nets: &[Vec<Vec3>]) -> f64 {
        nets.iter()
            .zip(&self.samples)
            .map(|(net, q)| {
                self.evaluate_net(net).iter().zip(q).map(|(s, q)| (s - q).norm()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }

    pub fn constraint_residual(&self, nets: &[Vec<Vec3>]) -> f64 {
        self.constraints.as_ref().map_or(0.0, |cs| cs.max_residual(nets))
    }

    pub fn surfaces(&self, nets: &[Vec<Vec3>]) -> Result<Vec<NurbsSurface>> {
        nets.iter()
            .map(|net| {
                NurbsSurface::new(
                    self.setup.knots_u.clone(),
                    self.setup.knots_v.clone(),
                    net.clone(),
                    self.setup.weights.clone(),
                )
            })
            .collect()
    }
}

/// Control nets after `iteration` updates, with the update history.
#[derive(Clone, Debug, Serialize)]
pub struct FitState {
    pub control_points: Vec<Vec<Vec3>>,
    pub iteration: usize,
    pub max_update: f64,
    pub history: Vec<f64>,
}

impl FitState {
    /// P⁰ = Q.
    pub fn initial(problem: &FitProblem) -> Self {
        Self { control_points: problem.samples.clone(), iteration: 0, max_update: f64::INFINITY, history: Vec::new() }
    }

    /// "iteration,max_update" rows.
    pub fn write_history_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iteration,max_update")?;
        for (k, u) in self.history.iter().enumerate() {
            writeln!(w, "{},{:.17e}", k + 1, u)?;
        }
        Ok(())
    }
}

/// One update P ← Π(P + Q − S(P)). Without constraints Π is the identity
/// and this is the plain PIA step.
pub fn cpia_step(state: &FitState, problem: &FitProblem) -> Result<FitState> {
    if state.control_points.len() != problem.net_count()
        || state.control_points.iter().any(|n| n.len() != problem.nu() * problem.nv())
    {
        return Err(Error::ShapeMismatch("state does not match the fit problem".into()));
    }
    let mut next: Vec<Vec<Vec3>> = state
        .control_points
        .iter()
        .zip(&problem.samples)
        .map(|(net, q)| {
            let s = problem.evaluate_net(net);
            net.iter().zip(q).zip(&s).map(|((p, q), s)| p + (q - s)).collect()
        })
        .collect();
    if let Some(proj) = &problem.projector {
        proj.project(&mut next);
    }
    let max_update = next
        .iter()
        .zip(&state.control_points)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(a, b)| (a - b).norm()))
        .fold(0.0, f64::max);
    let mut history = state.history.clone();
    history.push(max_update);
    if is_diverging(&history) {
        return Err(Error::Divergence { iteration: history.len(), history });
    }
    Ok(FitState { control_points: next, iteration: state.iteration + 1, max_update, history })
}

/// True when the last update is not finite or exceeds the update
/// `DIVERGENCE_WINDOW` iterations earlier by more than `DIVERGENCE_FACTOR`.
pub fn is_diverging(history: &[f64]) -> bool {
    let k = history.len();
    match history.last() {
        None => false,
        Some(&last) if !last.is_finite() => true,
        Some(&last) => k > DIVERGENCE_WINDOW && last > DIVERGENCE_FACTOR * history[k - 1 - DIVERGENCE_WINDOW],
    }
}

/// Iterates until the max update is at most `tol`.
pub fn fit_cpia(problem: &FitProblem, tol: f64, max_iter: usize) -> Result<(Vec<NurbsSurface>, FitState)> {
    if !(tol > 0.0) {
        return Err(Error::InvalidTolerance(tol));
    }
    let mut state = FitState::initial(problem);
    while state.iteration < max_iter {
        state = cpia_step(&state, problem)?;
        if state.max_update <= tol {
            let surfaces = problem.surfaces(&state.control_points)?;
            return Ok((surfaces, state));
        }
    }
    Err(Error::MaxIter { max_iter, last: state.max_update, history: state.history })
}

/// Spectral radius of the unconstrained iteration matrix I − B, by power
/// iteration on the collocation operator of a single net.
pub fn iteration_spectral_radius(setup: &FitSetup, iterations: usize) -> Result<f64> {
    let (nu, nv) = (setup.params_u.len(), setup.params_v.len());
    let mut x: Vec<Vec3> = (0..nu * nv)
        .map(|k| {
            let t = k as f64 + 1.0;
            Vec3::new((0.7 * t).sin(), (1.3 * t).cos(), 1.0 / t)
        })
        .collect();
    let problem = FitProblem::new(vec![vec![Vec3::zeros(); nu * nv]], setup.clone(), None)?;
    let norm = |x: &[Vec3]| x.iter().map(|p| p.norm_squared()).sum::<f64>().sqrt();
    let mut rho = 0.0;
    for _ in 0..iterations {
        let bx = problem.evaluate_net(&x);
        let y: Vec<Vec3> = x.iter().zip(&bx).map(|(a, b)| a - b).collect();
        let (nx, ny) = (norm(&x), norm(&y));
        if ny == 0.0 {
            return Ok(0.0);
        }
        rho = ny / nx;
        x = y.into_iter().map(|p| p / ny).collect();
    }
    Ok(rho)
}

/// Per-cell bounds on the distance between a surface and the bilinear
/// interpolant of its values at the cell corners.
#[derive(Clone, Debug, Serialize)]
pub struct CellErrorGrid {
    pub rows: usize,
    pub cols: usize,
    pub eps: Vec<f64>,
    pub l_grid: f64,
    pub r: f64,
}

impl CellErrorGrid {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.eps[i * self.cols + j]
    }

    /// Largest bound and its cell.
    pub fn worst(&self) -> (f64, usize, usize) {
        let mut best = (0.0, 0, 0);
        for (k, &e) in self.eps.iter().enumerate() {
            if e > best.0 {
                best = (e, k / self.cols, k % self.cols);
            }
        }
        best
    }
}

/// Zheng's estimate over the control-net cells. `A_ij` is the largest of the
/// cell twist and the pure second differences of the weighted control points
/// around the cell, `G_ij` the same quantity for the weights.
pub fn zheng_estimate(s: &NurbsSurface, l_grid: f64) -> CellErrorGrid {
    let (nu, nv) = (s.nu, s.nv);
    let hp: Vec<Vec3> = (0..nu * nv).map(|k| s.control_points[k] * s.weights[k]).collect();
    let w = &s.weights;
    let r = s.control_points.iter().map(|p| p.norm()).fold(0.0, f64::max);
    let w_inf = w.iter().copied().fold(f64::INFINITY, f64::min);
    let n = nu.max(nv) as f64 - 1.0;
    let scale = l_grid * l_grid * n * n;
    let at = |i: usize, j: usize| i * nv + j;
    let (rows, cols) = (nu - 1, nv - 1);
    let eps = (0..rows * cols)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / cols, k % cols);
            let twist_p = (hp[at(i, j)] - hp[at(i + 1, j)] - hp[at(i, j + 1)] + hp[at(i + 1, j + 1)]).norm();
            let twist_w = (w[at(i, j)] - w[at(i + 1, j)] - w[at(i, j + 1)] + w[at(i + 1, j + 1)]).abs();
            let (mut a, mut g) = (twist_p, twist_w);
            for ii in i.saturating_sub(1)..(i + 2).min(nu.saturating_sub(2)) {
                for jj in j.saturating_sub(1)..(j + 3).min(nv) {
                    a = a.max((hp[at(ii, jj)] - 2.0 * hp[at(ii + 1, jj)] + hp[at(ii + 2, jj)]).norm());
                    g = g.max((w[at(ii, jj)] - 2.0 * w[at(ii + 1, jj)] + w[at(ii + 2, jj)]).abs());
                }
            }
            for ii in i.saturating_sub(1)..(i + 3).min(nu) {
                for jj in j.saturating_sub(1)..(j + 2).min(nv.saturating_sub(2)) {
                    a = a.max((hp[at(ii, jj)] - 2.0 * hp[at(ii, jj + 1)] + hp[at(ii, jj + 2)]).norm());
                    g = g.max((w[at(ii, jj)] - 2.0 * w[at(ii, jj + 1)] + w[at(ii, jj + 2)]).abs());
                }
            }
            scale * (a + r * g) / (4.0 * w_inf + scale * g)
        })
        .collect();
    CellErrorGrid { rows, cols, eps, l_grid, r }
}

/// Largest parameter spacing of a setup.
pub fn grid_spacing(params_u: &[f64], params_v: &[f64]) -> f64 {
    params_u.windows(2).chain(params_v.windows(2)).map(|w| w[1] - w[0]).fold(0.0, f64::max)
}

/// Fit of one kind on a shared parameter list, with its constraint data.
#[derive(Clone, Debug)]
pub struct PrimitiveFit {
    pub kind: TpmsKind,
    pub offset: f64,
    pub params: Vec<f64>,
    pub grids: Vec<SampleGrid>,
    pub problem: FitProblem,
    pub surfaces: Vec<NurbsSurface>,
    pub state: FitState,
}

/// Samples the nets of `kind` on `params × params` and fits them with CPIA.
pub fn fit_on_params(
    kind: TpmsKind,
    offset: f64,
    params: &[f64],
    pairings: &[EdgePairing],
    tol: f64,
    max_iter: usize,
) -> Result<PrimitiveFit> {
    let setup = setup_for_params(params, params, 3)?;
    let nets = crate::constraints::net_count(kind);
    let signs = [OffsetSign::Plus, OffsetSign::Minus];
    let grids: Vec<SampleGrid> = (0..nets)
        .map(|k| {
            let surface = OffsetSurface::new(kind, signs[k].factor() * offset);
            sampling::build_grid_with_params(&surface, params, params)
        })
        .collect::<Result<_>>()?;
    let cs = ConstraintSet::new(kind, pairings.to_vec(), params, params, &setup.knots_u, &setup.knots_v)?;
    let samples = grids.iter().map(|g| g.points.clone()).collect();
    let problem = FitProblem::new(samples, setup, Some(cs))?;
    let (surfaces, state) = fit_cpia(&problem, tol, max_iter)?;
    Ok(PrimitiveFit { kind, offset, params: params.to_vec(), grids, problem, surfaces, state })
}

/// Outcome of the sampling and refinement loop.
#[derive(Clone, Debug, Serialize)]
pub struct ErrorControlReport {
    pub epsilon: f64,
    pub bounds: DerivativeBounds,
    pub initial_nodes: usize,
    pub final_nodes: usize,
    pub rounds: usize,
    /// Worst Zheng cell bound after each fit.
    pub worst_cell: Vec<f64>,
    pub iterations: usize,
    pub constraint_residual: f64,
    pub data_deviation: f64,
}

/// Per-cell bound on the distance from a fitted net to the triangle mesh of
/// its samples: the Zheng bound to the bilinear interpolant of the surface
/// values at the cell corners, plus the largest corner data deviation, plus
/// the gap between the bilinear patch of the samples and its two triangles.
pub fn approximation_certificate(problem: &FitProblem, nets: &[Vec<Vec3>]) -> Result<CellErrorGrid> {
    let (nu, nv) = (problem.nu(), problem.nv());
    let l_grid = grid_spacing(&problem.setup.params_u, &problem.setup.params_v);
    let surfaces = problem.surfaces(nets)?;
    let mut out: Option<CellErrorGrid> = None;
    for (surface, (net, q)) in surfaces.iter().zip(nets.iter().zip(&problem.samples)) {
        let mut z = zheng_estimate(surface, l_grid);
        let dev: Vec<f64> = problem.evaluate_net(net).iter().zip(q).map(|(s, q)| (s - q).norm()).collect();
        for i in 0..nu - 1 {
            for j in 0..nv - 1 {
                let c = [i * nv + j, (i + 1) * nv + j, i * nv + j + 1, (i + 1) * nv + j + 1];
                let data = c.iter().map(|&k| dev[k]).fold(0.0, f64::max);
                let twist = 0.25 * (q[c[0]] - q[c[1]] - q[c[2]] + q[c[3]]).norm();
                z.eps[i * (nv - 1) + j] += data + twist;
            }
        }
        out = Some(match out {
            None => z,
            Some(mut acc) => {
                for (a, b) in acc.eps.iter_mut().zip(&z.eps) {
                    *a = a.max(*b);
                }
                acc.r = acc.r.max(z.r);
                acc
            }
        });
    }
    Ok(out.expect("fit problems hold at least one net"))
}

/// Fits `kind` at offset `d` on uniform grids starting at `initial_nodes`
/// per direction, adding one row and one column per round until every cell
/// certificate is at most `epsilon`.
pub fn fit_with_error_control_from(
    kind: TpmsKind,
    offset: f64,
    epsilon: f64,
    initial_nodes: usize,
    pairings: &[EdgePairing],
    bounds: DerivativeBounds,
) -> Result<(PrimitiveFit, ErrorControlReport)> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidTolerance(epsilon));
    }
    let mut nodes = initial_nodes.max(MIN_CONSTRAINED_NODES);
    let mut worst_cell = Vec::new();
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    loop {
        let params = uniform_params(nodes);
        let fit = fit_on_params(kind, offset, &params, pairings, DEFAULT_FIT_TOL, DEFAULT_MAX_ITER)?;
        let (worst, _, _) = approximation_certificate(&fit.problem, &fit.state.control_points)?.worst();
        worst_cell.push(worst);
        if worst <= epsilon {
            let report = ErrorControlReport {
                epsilon,
                bounds,
                initial_nodes,
                final_nodes: nodes,
                rounds: worst_cell.len() - 1,
                worst_cell,
                iterations: fit.state.iteration,
                constraint_residual: fit.problem.constraint_residual(&fit.state.control_points),
                data_deviation: fit.problem.data_deviation(&fit.state.control_points),
            };
            return Ok((fit, report));
        }
        if worst < best {
            best = worst;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= STALL_ROUNDS {
                return Err(Error::RefinementStall(worst_cell.len() - 1));
            }
        }
        nodes += 1;
    }
}

/// Density from the derivative bounds, then fit and refine.
pub fn fit_with_error_control(kind: TpmsKind, offset: f64, epsilon: f64) -> Result<(PrimitiveFit, ErrorControlReport)> {
    let plus = sampling::estimate_derivative_bounds(&OffsetSurface::new(kind, offset), 64)?;
    let bounds = if crate::constraints::net_count(kind) > 1 {
        plus.max(&sampling::estimate_derivative_bounds(&OffsetSurface::new(kind, -offset), 64)?)
    } else {
        plus
    };
    let delta = sampling::density_from_tolerance(&bounds, epsilon)?;
    let n = sampling::nodes_for_spacing(delta);
    let pairings = crate::constraints::find_pairings(kind, offset, 21)?;
    fit_with_error_control_from(kind, offset, epsilon, n, &pairings, bounds)
}
