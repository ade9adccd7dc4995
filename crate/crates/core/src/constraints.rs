//! Edge pairings between primitive patches, their rigid transforms, and the
//! linear C⁰/C¹/C² constraint lines tying boundary control bands together.
//!
//! The patch beyond edge eᵢ of the +d primitive is the Schwarz reflection of
//! the kite across eᵢ. It is congruent to a primitive with offset ±d, so the
//! pairing (eᵢ → eⱼ, sign, orientation) and its transform are recovered by a
//! Procrustes fit of reflected samples against samples of each candidate edge.

use crate::error::{Error, Result};
use crate::geom::{bbox_diagonal, Mat3, RigidTransform, Vec3};
use crate::nurbs::{Edge, KnotVector};
use crate::weierstrass::{eval_across_edge, OffsetSurface, TpmsKind};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Net index of the +d primitive.
pub const PLUS: usize = 0;
/// Net index of the −d primitive.
pub const MINUS: usize = 1;

/// Offset used to decide pairing signs; at d = 0 both signs fit equally.
pub const PAIRING_PROBE_OFFSET: f64 = 0.1;
/// Residual threshold below which a pairing is accepted.
pub const PAIRING_TOL: f64 = 1e-6;
/// Candidates whose residuals differ by less than this are tied.
pub const TIE_TOL: f64 = 1e-7;

/// Least-squares orthogonal fit `dst ≈ R·src + t` (reflections allowed).
#[derive(Clone, Copy, Debug)]
pub struct ProcrustesFit {
    pub transform: RigidTransform,
    pub rms: f64,
}

/// Procrustes fit without the rigidity check.
pub fn procrustes(src: &[Vec3], dst: &[Vec3]) -> Result<ProcrustesFit> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(Error::DegenerateCorrespondence);
    }
    let n = src.len() as f64;
    let ca = src.iter().sum::<Vec3>() / n;
    let cb = dst.iter().sum::<Vec3>() / n;
    let mut h = Mat3::zeros();
    let mut cov = Mat3::zeros();
    for (a, b) in src.iter().zip(dst) {
        h += (a - ca) * (b - cb).transpose();
        cov += (a - ca) * (a - ca).transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    if ev[0] <= 0.0 || ev[1] <= 1e-20 * ev[0].max(1e-300) || ev[1] < 1e-24 {
        return Err(Error::DegenerateCorrespondence);
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let r = (u * vt).transpose();
    let t = cb - r * ca;
    let transform = RigidTransform::new(r, t);
    let ss: f64 = src.iter().zip(dst).map(|(a, b)| (transform.apply(a) - b).norm_squared()).sum();
    Ok(ProcrustesFit { transform, rms: (ss / n).sqrt() })
}

/// Rigid transform mapping `src` onto `dst`; rejects non-rigid correspondences.
pub fn derive_rigid_transform(src: &[Vec3], dst: &[Vec3]) -> Result<ProcrustesFit> {
    let fit = procrustes(src, dst)?;
    let limit = 1e-6 * bbox_diagonal(dst).max(bbox_diagonal(src));
    if fit.rms > limit {
        return Err(Error::NonRigid { residual: fit.rms, limit });
    }
    Ok(fit)
}

/// One boundary edge of one primitive net.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EdgeRef {
    pub net: usize,
    pub edge: Edge,
}

/// The patch across `source` is `transform` applied to the primitive of
/// `target.net`, meeting along `target.edge`; `flip` reverses the along-edge
/// parameter.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EdgePairing {
    pub source: EdgeRef,
    pub target: EdgeRef,
    pub flip: bool,
    pub transform: RigidTransform,
    pub fit_residual: f64,
}

/// Selects band `band` (0 = boundary row) of control points along `edge`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExtractionOperator {
    pub band: usize,
    pub edge: Edge,
}

impl ExtractionOperator {
    pub fn indices(&self, nu: usize, nv: usize) -> Vec<usize> {
        let along = if self.edge.runs_along_u() { nu } else { nv };
        (0..along)
            .map(|t| {
                let (i, j) = self.edge.index(t, self.band, nu, nv);
                i * nv + j
            })
            .collect()
    }

    pub fn select(&self, net: &[Vec3], nu: usize, nv: usize) -> Vec<Vec3> {
        self.indices(nu, nv).into_iter().map(|k| net[k]).collect()
    }

    /// Places `band` back into an otherwise zero net.
    pub fn embed(&self, band: &[Vec3], nu: usize, nv: usize) -> Vec<Vec3> {
        let mut out = vec![Vec3::zeros(); nu * nv];
        for (k, p) in self.indices(nu, nv).into_iter().zip(band) {
            out[k] = *p;
        }
        out
    }
}

/// Control point reference (net, row-major index).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VarRef {
    pub net: usize,
    pub index: usize,
}

/// Σ lhs·P − (R·Σ rhs·P + [order 0] t) = 0 at one edge station.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConstraintLine {
    pub order: usize,
    pub pairing: usize,
    pub station: usize,
    pub lhs: Vec<(VarRef, f64)>,
    pub rhs: Vec<(VarRef, f64)>,
}

/// Pairings plus the constraint lines they induce on nets of size `nu × nv`.
#[derive(Clone, Debug)]
pub struct ConstraintSet {
    pub kind: TpmsKind,
    pub nets: usize,
    pub nu: usize,
    pub nv: usize,
    pub pairings: Vec<EdgePairing>,
    pub lines: Vec<ConstraintLine>,
}

/// Number of primitive nets fitted per kind: SchwarzP's −d primitive is a
/// congruent copy of the +d one, Diamond and Gyroid need both.
pub fn net_count(kind: TpmsKind) -> usize {
    match kind {
        TpmsKind::SchwarzP => 1,
        _ => 2,
    }
}

fn edge_samples(surface: &OffsetSurface, edge: Edge, stations: usize, rows: usize, h: f64, flip: bool) -> Result<Vec<Vec3>> {
    let mut out = Vec::with_capacity(stations * rows);
    for s in 0..stations {
        let mut t = s as f64 / (stations - 1) as f64;
        if flip {
            t = 1.0 - t;
        }
        for k in 0..rows {
            let (u, v) = edge.uv(t, k as f64 * h);
            out.push(surface.eval_uv(u, v)?.position);
        }
    }
    Ok(out)
}

fn reflected_samples(surface: &OffsetSurface, edge: Edge, stations: usize, rows: usize, h: f64) -> Result<Vec<Vec3>> {
    let mut out = Vec::with_capacity(stations * rows);
    for s in 0..stations {
        let t = s as f64 / (stations - 1) as f64;
        for k in 0..rows {
            out.push(eval_across_edge(surface, edge, t, k as f64 * h)?.position);
        }
    }
    Ok(out)
}

/// Finds, for every edge of the +d primitive, the congruent neighbour across
/// it. Combinatorics are decided at `PAIRING_PROBE_OFFSET`; transforms are
/// offset-independent and verified at `offset_d`.
pub fn find_pairings(kind: TpmsKind, offset_d: f64, stations: usize) -> Result<Vec<EdgePairing>> {
    let stations = stations.max(20);
    let (rows, h) = (4, 0.05);
    let probe = offset_d.abs().max(PAIRING_PROBE_OFFSET);
    let mut out = Vec::new();
    for ei in Edge::ALL {
        let plus = OffsetSurface::new(kind, probe);
        let reflected = reflected_samples(&plus, ei, stations, rows, h)?;
        let mut cands: Vec<(f64, usize, bool, bool, Edge, ProcrustesFit)> = Vec::new();
        for (sg_rank, sg) in [1.0, -1.0].into_iter().enumerate() {
            let other = OffsetSurface::new(kind, sg * probe);
            for ej in Edge::ALL {
                for flip in [false, true] {
                    let y = edge_samples(&other, ej, stations, rows, h, flip)?;
                    if let Ok(fit) = procrustes(&y, &reflected) {
                        cands.push((fit.rms, sg_rank, ej != ei, flip, ej, fit));
                    }
                }
            }
        }
        let best = cands.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
        let (_, sg_rank, _, flip, ej, _) = *cands
            .iter()
            .filter(|c| c.0 <= best + TIE_TOL)
            .min_by_key(|c| (c.1, c.2, c.3))
            .ok_or_else(|| Error::PairingNotFound(ei.name().into()))?;
        if best > PAIRING_TOL {
            return Err(Error::PairingNotFound(format!("{}: best residual {best:e}", ei.name())));
        }
        let net = if sg_rank == 0 || net_count(kind) == 1 { PLUS } else { MINUS };
        // Verify and refit at the requested offset.
        let sg = if sg_rank == 0 { 1.0 } else { -1.0 };
        let reflected = reflected_samples(&OffsetSurface::new(kind, offset_d), ei, stations, rows, h)?;
        let y = edge_samples(&OffsetSurface::new(kind, sg * offset_d), ej, stations, rows, h, flip)?;
        let fit = procrustes(&y, &reflected)?;
        if fit.rms > PAIRING_TOL {
            return Err(Error::PairingNotFound(format!("{} at d = {offset_d}: residual {:e}", ei.name(), fit.rms)));
        }
        out.push(EdgePairing {
            source: EdgeRef { net: PLUS, edge: ei },
            target: EdgeRef { net, edge: ej },
            flip,
            transform: fit.transform,
            fit_residual: fit.rms,
        });
        if sg_rank == 1 && net_count(kind) == 1 {
            return Err(Error::PairingNotFound(format!("{}: SchwarzP edge paired with the -d side", ei.name())));
        }
    }
    Ok(out)
}

/// Boundary stencils in the cross direction of `edge`:
/// first derivative [P0, P1] and second derivative [P0, P1, P2], inward.
fn cross_stencils(edge: Edge, knots_u: &KnotVector, knots_v: &KnotVector) -> ([f64; 2], [f64; 3]) {
    let kv = if edge.runs_along_u() { knots_v } else { knots_u };
    kv.end_stencils(edge.at_end())
}

fn along_params(edge: Edge, params_u: &[f64], params_v: &[f64]) -> Vec<f64> {
    if edge.runs_along_u() { params_u.to_vec() } else { params_v.to_vec() }
}

impl ConstraintSet {
    /// Instantiates C⁰, C¹ and C² lines for every pairing and edge station.
    pub fn new(
        kind: TpmsKind,
        pairings: Vec<EdgePairing>,
        params_u: &[f64],
        params_v: &[f64],
        knots_u: &KnotVector,
        knots_v: &KnotVector,
    ) -> Result<Self> {
        let (nu, nv) = (knots_u.n_ctrl(), knots_v.n_ctrl());
        if nu != params_u.len() || nv != params_v.len() {
            return Err(Error::ShapeMismatch("knots and parameters disagree".into()));
        }
        let mut lines = Vec::new();
        for (pi, p) in pairings.iter().enumerate() {
            let (ei, ej) = (p.source.edge, p.target.edge);
            let pa = along_params(ei, params_u, params_v);
            let mut pb = along_params(ej, params_u, params_v);
            if p.flip {
                pb = pb.iter().rev().map(|x| 1.0 - x).collect();
            }
            if pa.len() != pb.len() || pa.iter().zip(&pb).any(|(a, b)| (a - b).abs() > 1e-12) {
                return Err(Error::ShapeMismatch(format!(
                    "edge parameters of {} and {} do not correspond",
                    ei.name(),
                    ej.name()
                )));
            }
            let (d1a, d2a) = cross_stencils(ei, knots_u, knots_v);
            let (d1b, d2b) = cross_stencils(ej, knots_u, knots_v);
            let n = pa.len();
            for t in 0..n {
                let tb = if p.flip { n - 1 - t } else { t };
                let va = |k: usize| {
                    let (i, j) = ei.index(t, k, nu, nv);
                    VarRef { net: p.source.net, index: i * nv + j }
                };
                let vb = |k: usize| {
                    let (i, j) = ej.index(tb, k, nu, nv);
                    VarRef { net: p.target.net, index: i * nv + j }
                };
                lines.push(ConstraintLine { order: 0, pairing: pi, station: t, lhs: vec![(va(0), 1.0)], rhs: vec![(vb(0), 1.0)] });
                // The neighbour's inward direction is our outward one.
                let s1 = d1a[1].abs().max(d1b[1].abs());
                lines.push(ConstraintLine {
                    order: 1,
                    pairing: pi,
                    station: t,
                    lhs: vec![(va(0), -d1a[0] / s1), (va(1), -d1a[1] / s1)],
                    rhs: vec![(vb(0), d1b[0] / s1), (vb(1), d1b[1] / s1)],
                });
                let s2 = d2a.iter().chain(d2b.iter()).fold(0.0f64, |m, x| m.max(x.abs()));
                lines.push(ConstraintLine {
                    order: 2,
                    pairing: pi,
                    station: t,
                    lhs: (0..3).map(|k| (va(k), d2a[k] / s2)).collect(),
                    rhs: (0..3).map(|k| (vb(k), d2b[k] / s2)).collect(),
                });
            }
        }
        Ok(Self { kind, nets: net_count(kind), nu, nv, pairings, lines })
    }

    /// Residual vector (mm) of one line.
    pub fn line_residual(&self, line: &ConstraintLine, nets: &[Vec<Vec3>]) -> Vec3 {
        let p = &self.pairings[line.pairing];
        let mut l = Vec3::zeros();
        for (v, c) in &line.lhs {
            l += nets[v.net][v.index] * *c;
        }
        let mut r = Vec3::zeros();
        for (v, c) in &line.rhs {
            r += nets[v.net][v.index] * *c;
        }
        let mut out = l - p.transform.rotation * r;
        if line.order == 0 {
            out -= p.transform.translation;
        }
        out
    }

    pub fn check_shape(&self, nets: &[Vec<Vec3>]) -> Result<()> {
        if nets.len() != self.nets || nets.iter().any(|n| n.len() != self.nu * self.nv) {
            return Err(Error::ShapeMismatch(format!(
                "expected {} nets of {}x{}",
                self.nets, self.nu, self.nv
            )));
        }
        Ok(())
    }

    /// Maximum line residual norm.
    pub fn max_residual(&self, nets: &[Vec<Vec3>]) -> f64 {
        self.lines.iter().map(|l| self.line_residual(l, nets).norm()).fold(0.0, f64::max)
    }

    /// Text report of pairings, transforms and (optionally) residuals.
    pub fn audit_report(&self, nets: Option<&[Vec<Vec3>]>) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "constraint set: {} ({} nets of {}x{})", self.kind, self.nets, self.nu, self.nv);
        let _ = writeln!(s, "lines: {}", self.lines.len());
        for (k, p) in self.pairings.iter().enumerate() {
            let sign = |n: usize| if n == PLUS { "+" } else { "-" };
            let _ = writeln!(
                s,
                "pairing {k}: {}{} -> {}{} flip={} det={:+.1} fit_residual={:.3e}",
                p.source.edge.name(),
                sign(p.source.net),
                p.target.edge.name(),
                sign(p.target.net),
                p.flip,
                p.transform.determinant(),
                p.fit_residual
            );
            let r = &p.transform.rotation;
            for row in 0..3 {
                let _ = writeln!(
                    s,
                    "  [{:+.12} {:+.12} {:+.12}] {:+.12}",
                    r[(row, 0)],
                    r[(row, 1)],
                    r[(row, 2)],
                    p.transform.translation[row]
                );
            }
            if let Some(nets) = nets {
                for order in 0..3 {
                    let m = self
                        .lines
                        .iter()
                        .filter(|l| l.pairing == k && l.order == order)
                        .map(|l| self.line_residual(l, nets).norm())
                        .fold(0.0, f64::max);
                    let _ = writeln!(s, "  order {order} max residual {m:.3e}");
                }
            }
        }
        s
    }
}

/// Residuals of every line, and their sums scattered to the control points
/// appearing on the left-hand side of each line.
#[derive(Clone, Debug)]
pub struct ConstraintResidual {
    pub lines: Vec<Vec3>,
    pub per_point: Vec<Vec<Vec3>>,
    pub max_norm: f64,
}

pub fn constraint_residual(nets: &[Vec<Vec3>], cs: &ConstraintSet) -> Result<ConstraintResidual> {
    cs.check_shape(nets)?;
    let lines: Vec<Vec3> = cs.lines.iter().map(|l| cs.line_residual(l, nets)).collect();
    let mut per_point = vec![vec![Vec3::zeros(); cs.nu * cs.nv]; cs.nets];
    for (line, r) in cs.lines.iter().zip(&lines) {
        for (v, _) in &line.lhs {
            per_point[v.net][v.index] += r;
        }
    }
    let max_norm = lines.iter().map(|r| r.norm()).fold(0.0, f64::max);
    Ok(ConstraintResidual { lines, per_point, max_norm })
}

/// One connected group of lines sharing control points: an orthonormal
/// basis `q` of the row space of its constraint matrix and the coordinates
/// `z` every admissible net has in that basis.
#[derive(Clone, Debug)]
struct Component {
    vars: Vec<VarRef>,
    q: DMatrix<f64>,
    z: DVector<f64>,
}

impl Component {
    /// Row-space basis by column-pivoted QR of Aᵀ; rows of A whose pivots
    /// fall below 1e-10 of the largest are dependent and dropped. Fails when
    /// the dropped rows contradict the kept ones.
    fn new(vars: Vec<VarRef>, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<Self> {
        let qr = a.transpose().col_piv_qr();
        let r = qr.r();
        let top = r[(0, 0)].abs();
        let rank = (0..r.nrows().min(r.ncols())).take_while(|&k| r[(k, k)].abs() > 1e-10 * top).count();
        let mut bp = b.clone();
        qr.p().permute_rows(&mut bp);
        let r11 = r.view((0, 0), (rank, rank)).into_owned();
        let z = r11
            .transpose()
            .solve_lower_triangular(&bp.rows(0, rank).into_owned())
            .ok_or_else(|| Error::ShapeMismatch("singular constraint block".into()))?;
        let q = qr.q().columns(0, rank).into_owned();
        let x0 = &q * &z;
        let inconsistency = (a * &x0 - b).abs().max();
        if inconsistency > 1e-9 * (1.0 + b.abs().max()) {
            return Err(Error::ShapeMismatch(format!("constraint lines are inconsistent ({inconsistency:e})")));
        }
        Ok(Self { vars, q, z })
    }
}

/// Orthogonal projection onto the affine set of nets satisfying every line.
#[derive(Clone, Debug)]
pub struct ConstraintProjector {
    components: Vec<Component>,
}

impl ConstraintProjector {
    pub fn new(cs: &ConstraintSet) -> Result<Self> {
        let nvars = cs.nets * cs.nu * cs.nv;
        let key = |v: &VarRef| v.net * cs.nu * cs.nv + v.index;
        let mut parent: Vec<usize> = (0..nvars).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for line in &cs.lines {
            let vs: Vec<usize> = line.lhs.iter().chain(&line.rhs).map(|(v, _)| key(v)).collect();
            for w in vs.windows(2) {
                let (a, b) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (li, line) in cs.lines.iter().enumerate() {
            let root = find(&mut parent, key(&line.lhs[0].0));
            groups.entry(root).or_default().push(li);
        }
        let mut components = Vec::with_capacity(groups.len());
        for (_, line_ids) in groups {
            let mut vars: Vec<VarRef> = line_ids
                .iter()
                .flat_map(|&li| cs.lines[li].lhs.iter().chain(&cs.lines[li].rhs).map(|(v, _)| *v))
                .collect();
            vars.sort();
            vars.dedup();
            let col = |v: &VarRef| vars.binary_search(v).unwrap();
            let mut a = DMatrix::zeros(3 * line_ids.len(), 3 * vars.len());
            let mut b = DVector::zeros(3 * line_ids.len());
            for (r, &li) in line_ids.iter().enumerate() {
                let line = &cs.lines[li];
                let t = &cs.pairings[line.pairing].transform;
                for (v, c) in &line.lhs {
                    let k = col(v);
                    for d in 0..3 {
                        a[(3 * r + d, 3 * k + d)] += c;
                    }
                }
                for (v, c) in &line.rhs {
                    let k = col(v);
                    for d in 0..3 {
                        for e in 0..3 {
                            a[(3 * r + d, 3 * k + e)] -= c * t.rotation[(d, e)];
                        }
                    }
                }
                if line.order == 0 {
                    for d in 0..3 {
                        b[3 * r + d] = t.translation[d];
                    }
                }
            }
            components.push(Component::new(vars, &a, &b)?);
        }
        Ok(Self { components })
    }

    pub fn component_count(&self) -> usize {
        self.components.len()
    }

    pub fn max_component_vars(&self) -> usize {
        self.components.iter().map(|c| c.vars.len()).max().unwrap_or(0)
    }

    /// x ← x − Q(Qᵀx − z) on every component.
    pub fn project(&self, nets: &mut [Vec<Vec3>]) {
        for c in &self.components {
            let mut x = DVector::zeros(3 * c.vars.len());
            for (k, v) in c.vars.iter().enumerate() {
                let p = nets[v.net][v.index];
                x[3 * k] = p.x;
                x[3 * k + 1] = p.y;
                x[3 * k + 2] = p.z;
            }
            let dx = &c.q * (c.q.tr_mul(&x) - &c.z);
            for (k, v) in c.vars.iter().enumerate() {
                nets[v.net][v.index] -= Vec3::new(dx[3 * k], dx[3 * k + 1], dx[3 * k + 2]);
            }
        }
    }
}

/// Pairings plus lines for a fitting setup.
pub fn build_constraint_set(
    kind: TpmsKind,
    offset_d: f64,
    params_u: &[f64],
    params_v: &[f64],
    knots_u: &KnotVector,
    knots_v: &KnotVector,
) -> Result<ConstraintSet> {
    let pairings = find_pairings(kind, offset_d, 21)?;
    ConstraintSet::new(kind, pairings, params_u, params_v, knots_u, knots_v)
}
