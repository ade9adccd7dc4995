//! Patch instancing, gap patches, lattice replication and scaling.
//!
//! The minimal surface is tiled by congruent kites; each tile carries the
//! +d and −d offset patches. Tiles are generated from the edge pairings,
//! cut to a cubic unit cell and replicated by the lattice periods.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::constraints::{derive_rigid_transform, EdgePairing};
use crate::geom::{RigidTransform, Vec3};
use crate::nurbs::{Edge, KnotVector, NurbsCurve, NurbsSurface};
use crate::weierstrass::{OffsetSurface, TpmsKind};
use crate::{Error, Result};

/// Pointwise tolerance for matching edge-uses, in model units (mm).
pub const STITCH_TOL: f64 = 1e-6;
/// Samples per edge in the watertight check.
pub const EDGE_SAMPLES: usize = 32;
/// Edges closer than this but not within `STITCH_TOL` are seam mismatches.
pub const NEAR_MISS: f64 = 1e-3;
/// Radius of the tile search around the origin.
const SEARCH_RADIUS: f64 = 8.0;
/// Candidate box origins scanned per period.
const ORIGIN_STEPS: usize = 16;
/// Offsets below this build an open sheet instead of a solid.
pub const SHEET_OFFSET: f64 = 1e-12;

/// What a catalog geometry represents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum PatchRole {
    /// Offset primitive; net 0 is +d, net 1 is −d.
    Primitive { net: usize },
    /// Ruled bridge between the +d and −d rows along a kite edge.
    Gap { edge: Edge },
    /// Materialized copy after scaling.
    Baked,
}

#[derive(Clone, Debug)]
pub struct Geometry {
    pub surface: NurbsSurface,
    pub role: PatchRole,
}

/// A placed use of a catalog geometry. `same_sense` is true when the placed
/// surface normal Su × Sv points out of the solid.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PatchInstance {
    pub geometry_ref: usize,
    pub placement: RigidTransform,
    pub same_sense: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct EdgeUse {
    pub instance: usize,
    pub edge: Edge,
}

/// Tiling data kept with an assembled unit so it can be replicated.
#[derive(Clone, Debug)]
pub struct UnitCell {
    pub kind: TpmsKind,
    pub offset: f64,
    /// Cubic lattice period.
    pub period: f64,
    /// Lower corner of the cell box; tiles belong to the cell whose box holds their centroid.
    pub origin: Vec3,
    /// Kite centroid in the tile frame.
    pub centroid: Vec3,
    /// Tile placements inside the cell.
    pub tiles: Vec<RigidTransform>,
    /// Tile-to-neighbour transforms across each edge, in `Edge::ALL` order.
    pub neighbours: [RigidTransform; 4],
    /// Placement of the −d geometry inside a tile.
    pub minus_base: RigidTransform,
    pub plus_ref: usize,
    pub minus_ref: Option<usize>,
    pub gap_refs: Option<[usize; 4]>,
    /// Whether each catalog geometry's normal points outward in its own frame.
    pub senses: Vec<bool>,
}

impl UnitCell {
    pub fn is_sheet(&self) -> bool {
        self.minus_ref.is_none()
    }

    /// Lattice cell holding the centroid of tile `g`.
    fn cell_of(&self, g: &RigidTransform) -> [i64; 3] {
        let c = g.apply(&self.centroid) - self.origin;
        [0, 1, 2].map(|a| (c[a] / self.period).floor() as i64)
    }
}

/// Patch instances over a geometry catalog.
#[derive(Clone, Debug)]
pub struct SolidModel {
    pub geometries: Vec<Geometry>,
    pub instances: Vec<PatchInstance>,
    /// Matched edge-use pairs; filled when the model is closed.
    pub adjacency: Vec<(EdgeUse, EdgeUse)>,
    pub closed: bool,
    pub unit: Option<UnitCell>,
}

impl SolidModel {
    pub fn placed_surface(&self, instance: usize) -> NurbsSurface {
        let inst = &self.instances[instance];
        self.geometries[inst.geometry_ref].surface.transformed(&inst.placement)
    }

    pub fn primitive_instance_count(&self) -> usize {
        self.instances
            .iter()
            .filter(|i| matches!(self.geometries[i.geometry_ref].role, PatchRole::Primitive { .. }))
            .count()
    }

    pub fn gap_instance_count(&self) -> usize {
        self.instances.iter().filter(|i| matches!(self.geometries[i.geometry_ref].role, PatchRole::Gap { .. })).count()
    }

    /// Axis-aligned box of all placed control points.
    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for inst in &self.instances {
            for p in &self.geometries[inst.geometry_ref].surface.control_points {
                let q = inst.placement.apply(p);
                lo = lo.inf(&q);
                hi = hi.sup(&q);
            }
        }
        (lo, hi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct LatticeSpec {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl LatticeSpec {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        for (field, n) in [("nx", nx), ("ny", ny), ("nz", nz)] {
            if n == 0 {
                return Err(Error::Config { field: field.into(), msg: "lattice counts must be at least 1".into() });
            }
        }
        Ok(Self { nx, ny, nz })
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny * self.nz
    }
}

fn normal(s: &NurbsSurface, u: f64, v: f64) -> Vec3 {
    let d = s.derivatives(u, v);
    d.su.cross(&d.sv)
}

/// Degree-1 loft between two curves with matching knots; v = 0 is `a`.
pub fn ruled_surface(a: &NurbsCurve, b: &NurbsCurve) -> Result<NurbsSurface> {
    if a.knots != b.knots || a.control_points.len() != b.control_points.len() {
        return Err(Error::ShapeMismatch("ruled surface rails have different knots".into()));
    }
    let n = a.control_points.len();
    let mut cps = Vec::with_capacity(2 * n);
    let mut ws = Vec::with_capacity(2 * n);
    for i in 0..n {
        cps.extend([a.control_points[i], b.control_points[i]]);
        ws.extend([a.weights[i], b.weights[i]]);
    }
    NurbsSurface::new(a.knots.clone(), KnotVector::new(vec![0.0, 0.0, 1.0, 1.0], 1)?, cps, ws)
}

/// Rigid map taking the +d primitive with u and v exchanged onto the −d
/// primitive (SchwarzP).
fn swap_transform(kind: TpmsKind, offset: f64) -> Result<RigidTransform> {
    let grid = |f: &dyn Fn(f64, f64) -> Result<Vec3>| -> Result<Vec<Vec3>> {
        let mut out = Vec::new();
        for i in 0..7 {
            for j in 0..7 {
                out.push(f(0.1 + 0.8 * i as f64 / 6.0, 0.1 + 0.8 * j as f64 / 6.0)?);
            }
        }
        Ok(out)
    };
    let probe = offset.abs().max(0.1);
    let (plus, minus) = (OffsetSurface::new(kind, probe), OffsetSurface::new(kind, -probe));
    let src = grid(&|u, v| Ok(plus.eval_uv(v, u)?.position))?;
    let dst = grid(&|u, v| Ok(minus.eval_uv(u, v)?.position))?;
    Ok(derive_rigid_transform(&src, &dst)?.transform)
}

struct TileSet {
    tiles: Vec<RigidTransform>,
    centres: Vec<Vec3>,
}

fn quantize(c: &Vec3) -> [i64; 3] {
    [0, 1, 2].map(|a| (c[a] * 1e4).round() as i64)
}

/// Breadth-first orbit of the kite under the neighbour transforms, within
/// `SEARCH_RADIUS` of the origin.
fn tile_orbit(start: RigidTransform, neighbours: &[RigidTransform; 4], centroid: &Vec3) -> TileSet {
    let steps: Vec<RigidTransform> = neighbours.iter().flat_map(|t| [*t, t.inverse()]).collect();
    let mut index: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    let mut set = TileSet { tiles: vec![start], centres: vec![start.apply(centroid)] };
    index.entry(quantize(&set.centres[0])).or_default().push(0);
    let mut head = 0;
    while head < set.tiles.len() {
        let g = set.tiles[head];
        head += 1;
        for t in &steps {
            let h = g.compose(t);
            let c = h.apply(centroid);
            if c.amax() > SEARCH_RADIUS {
                continue;
            }
            let q = quantize(&c);
            let mut known = false;
            'look: for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(ids) = index.get(&[q[0] + dx, q[1] + dy, q[2] + dz]) {
                            if ids.iter().any(|&k| (set.centres[k] - c).norm() < 1e-6) {
                                known = true;
                                break 'look;
                            }
                        }
                    }
                }
            }
            if !known {
                index.entry(q).or_default().push(set.tiles.len());
                set.tiles.push(h);
                set.centres.push(c);
            }
        }
    }
    set
}

/// Smallest cubic period: the shortest x translation that also appears along y and z.
fn cubic_period(set: &TileSet, frame: &RigidTransform) -> Result<f64> {
    let mut shifts: Vec<Vec3> = Vec::new();
    for g in &set.tiles {
        if (g.rotation - frame.rotation).amax() < 1e-9 {
            shifts.push(g.translation - frame.translation);
        }
    }
    let has = |v: Vec3| shifts.iter().any(|s| (s - v).amax() < 1e-6);
    let mut cands: Vec<f64> =
        shifts.iter().filter(|s| s.x > 1e-6 && s.y.abs() < 1e-6 && s.z.abs() < 1e-6).map(|s| s.x).collect();
    cands.sort_by(f64::total_cmp);
    cands
        .into_iter()
        .find(|&l| has(Vec3::new(0.0, l, 0.0)) && has(Vec3::new(0.0, 0.0, l)))
        .ok_or_else(|| Error::Topology("no cubic lattice period among the tile translations".into()))
}

/// Kite centroid of the minimal surface in the tile frame.
fn kite_centroid(kind: TpmsKind) -> Result<Vec3> {
    let s = OffsetSurface::new(kind, 0.0);
    let mut c = Vec3::zeros();
    for i in 0..5 {
        for j in 0..5 {
            c += s.eval_uv(i as f64 / 4.0, j as f64 / 4.0)?.position;
        }
    }
    Ok(c / 25.0)
}

/// Kite corners of the minimal surface at (0,0), (1,0), (0,1), (1,1).
fn kite_corners(kind: TpmsKind) -> Result<[Vec3; 4]> {
    let s = OffsetSurface::new(kind, 0.0);
    let p = |u, v| -> Result<Vec3> { Ok(s.eval_uv(u, v)?.position) };
    Ok([p(0.0, 0.0)?, p(1.0, 0.0)?, p(0.0, 1.0)?, p(1.0, 1.0)?])
}

/// Indices into `kite_corners` of the two ends of `edge`.
fn edge_corners(edge: Edge) -> [usize; 2] {
    match edge {
        Edge::V0 => [0, 1],
        Edge::V1 => [2, 3],
        Edge::U0 => [0, 2],
        Edge::U1 => [1, 3],
    }
}

/// Picks the cell-box origin that leaves the fewest open tile edges, keeping
/// centroids off the box faces. Every box-shaped block of up to 2×2×2 cells
/// must have an open boundary free of pinch vertices (kite corners where
/// more than two open edges meet); this covers every local configuration of
/// a larger lattice.
fn choose_origin(
    kind: TpmsKind,
    set: &TileSet,
    neighbours: &[RigidTransform; 4],
    centroid: &Vec3,
    period: f64,
) -> Result<Vec3> {
    let corners = kite_corners(kind)?;
    let blocks: Vec<[i64; 3]> =
        (0..8).map(|b| [1 + (b & 1) as i64, 1 + ((b >> 1) & 1) as i64, 1 + ((b >> 2) & 1) as i64]).collect();
    // Only tiles that can fall in a 2×2×2 block for some candidate origin matter.
    let keep: Vec<usize> =
        (0..set.tiles.len()).filter(|&t| set.centres[t].iter().all(|x| (-period..2.0 * period).contains(x))).collect();
    let centres: Vec<Vec3> = keep.iter().map(|&t| set.centres[t]).collect();
    let near: Vec<[Vec3; 4]> =
        keep.iter().map(|&t| neighbours.map(|n| set.tiles[t].compose(&n).apply(centroid))).collect();
    let ends: Vec<[[[i64; 3]; 2]; 4]> = keep
        .iter()
        .map(|&t| Edge::ALL.map(|e| edge_corners(e).map(|c| quantize(&set.tiles[t].apply(&corners[c])))))
        .collect();
    let steps = ORIGIN_STEPS;
    let cell = |c: &Vec3, o: &Vec3| -> [i64; 3] {
        let r = (c - o) / period;
        [0, 1, 2].map(|a| r[a].floor() as i64)
    };
    let inside = |q: [i64; 3], n: &[i64; 3]| (0..3).all(|a| (0..n[a]).contains(&q[a]));
    let mut cands: Vec<(usize, f64, Vec3)> = Vec::new();
    for k in 0..steps * steps * steps {
        let o = Vec3::new((k % steps) as f64, ((k / steps) % steps) as f64, (k / (steps * steps)) as f64)
            * (-period / steps as f64);
        let margin = centres
            .iter()
            .chain(near.iter().flatten())
            .map(|c| ((c - o) / period).iter().map(|x| (x - x.round()).abs()).fold(f64::INFINITY, f64::min))
            .fold(f64::INFINITY, f64::min);
        if margin < 1e-4 {
            continue;
        }
        let mut open = 0;
        for (t, c) in centres.iter().enumerate() {
            let q = cell(c, &o);
            if q == [0, 0, 0] {
                open += near[t].iter().filter(|m| cell(m, &o) != q).count();
            }
        }
        cands.push((open, margin, o));
    }
    cands.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let pinched = |o: &Vec3| {
        blocks.iter().any(|n| {
            let mut count: HashMap<[i64; 3], usize> = HashMap::new();
            for (t, c) in centres.iter().enumerate() {
                if !inside(cell(c, o), n) {
                    continue;
                }
                for e in 0..4 {
                    if !inside(cell(&near[t][e], o), n) {
                        for q in ends[t][e] {
                            *count.entry(q).or_default() += 1;
                        }
                    }
                }
            }
            count.values().any(|&m| m > 2)
        })
    };
    let best = cands.into_iter().find(|c| !pinched(&c.2));
    best.map(|b| b.2).ok_or_else(|| Error::Topology("no admissible unit-cell origin".into()))
}

/// Builds the open unit cell: ±d primitive instances for every tile whose
/// centroid lies in the cell box, plus the ruled gap geometries that
/// `replicate_lattice` uses to close the lattice boundary.
///
/// `fitted` holds one surface per fitted net (SchwarzP fits only +d).
pub fn assemble_unit(kind: TpmsKind, offset: f64, fitted: &[NurbsSurface], pairings: &[EdgePairing]) -> Result<SolidModel> {
    let plus = fitted.first().ok_or_else(|| Error::ShapeMismatch("no fitted primitive".into()))?.clone();
    let mut neighbours = [RigidTransform::identity(); 4];
    for (k, e) in Edge::ALL.into_iter().enumerate() {
        let p = pairings
            .iter()
            .find(|p| p.source.net == 0 && p.source.edge == e)
            .ok_or_else(|| Error::PairingNotFound(format!("no pairing for edge {}", e.name())))?;
        neighbours[k] = p.transform;
    }
    let sheet = offset.abs() < SHEET_OFFSET;

    let (minus, minus_base) = if fitted.len() > 1 {
        (fitted[1].clone(), RigidTransform::identity())
    } else {
        (plus.swapped_uv(), swap_transform(kind, offset)?)
    };

    let centroid = kite_centroid(kind)?;
    let frame = RigidTransform::rotation_z(-std::f64::consts::FRAC_PI_4);
    let set = tile_orbit(frame, &neighbours, &centroid);
    let period = cubic_period(&set, &frame)?;

    let origin = choose_origin(kind, &set, &neighbours, &centroid, period)?;

    let mut geometries = vec![Geometry { surface: plus.clone(), role: PatchRole::Primitive { net: 0 } }];
    let (mut minus_ref, mut gap_refs) = (None, None);
    let mut senses = [true; 6];
    let w = plus.eval(0.5, 0.5) - minus_base.apply(&minus.eval(0.5, 0.5));
    if !sheet {
        senses[0] = normal(&plus, 0.5, 0.5).dot(&w) > 0.0;
        let out_raw = minus_base.rotation.transpose() * -w;
        senses[1] = normal(&minus, 0.5, 0.5).dot(&out_raw) > 0.0;
        minus_ref = Some(geometries.len());
        geometries.push(Geometry { surface: minus.clone(), role: PatchRole::Primitive { net: 1 } });
        let mut refs = [0; 4];
        for (k, e) in Edge::ALL.into_iter().enumerate() {
            let top = plus.boundary_curve(e);
            let bottom = minus.boundary_curve(e).transformed(&minus_base);
            let gap = ruled_surface(&top, &bottom)?;
            let (u0, v0) = e.uv(0.5, 0.0);
            let (u1, v1) = e.uv(0.5, 1e-4);
            let outward = plus.eval(u0, v0) - plus.eval(u1, v1);
            senses[2 + k] = normal(&gap, 0.5, 0.5).dot(&outward) > 0.0;
            refs[k] = geometries.len();
            geometries.push(Geometry { surface: gap, role: PatchRole::Gap { edge: e } });
        }
        gap_refs = Some(refs);
    }

    let mut unit = UnitCell {
        kind,
        offset,
        period,
        origin,
        centroid,
        tiles: Vec::new(),
        neighbours,
        minus_base,
        plus_ref: 0,
        minus_ref,
        gap_refs,
        senses: senses[..geometries.len()].to_vec(),
    };
    let mut tiles: Vec<(RigidTransform, Vec3)> = set
        .tiles
        .iter()
        .zip(&set.centres)
        .filter(|(g, _)| unit.cell_of(g) == [0, 0, 0])
        .map(|(g, c)| (*g, *c))
        .collect();
    tiles.sort_by(|a, b| a.1.iter().zip(b.1.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    unit.tiles = tiles.into_iter().map(|t| t.0).collect();

    let mut model = SolidModel { geometries, instances: Vec::new(), adjacency: Vec::new(), closed: false, unit: None };
    push_tiles(&mut model, &unit, &RigidTransform::identity());
    let report = check_watertight(&model);
    if let Some(worst) = report.near_misses.iter().map(|m| m.2).reduce(f64::max) {
        return Err(Error::SeamMismatch(worst));
    }
    model.unit = Some(unit);
    Ok(model)
}

fn instance(unit: &UnitCell, geometry_ref: usize, placement: RigidTransform) -> PatchInstance {
    let same_sense = unit.senses[geometry_ref] == (placement.determinant() > 0.0);
    PatchInstance { geometry_ref, placement, same_sense }
}

/// Adds the primitive instances of every unit tile, shifted by `shift`.
fn push_tiles(model: &mut SolidModel, unit: &UnitCell, shift: &RigidTransform) {
    for g in &unit.tiles {
        let g = shift.compose(g);
        model.instances.push(instance(unit, unit.plus_ref, g));
        if let Some(m) = unit.minus_ref {
            model.instances.push(instance(unit, m, g.compose(&unit.minus_base)));
        }
    }
}

/// Duplicates the open unit over the lattice, then closes the outer
/// boundary with gap patches. Sheet models (d = 0) stay open.
pub fn replicate_lattice(unit_model: &SolidModel, lat: &LatticeSpec) -> Result<SolidModel> {
    let unit = unit_model.unit.as_ref().ok_or_else(|| Error::Topology("model carries no unit cell".into()))?;
    let mut model = SolidModel {
        geometries: unit_model.geometries.clone(),
        instances: Vec::new(),
        adjacency: Vec::new(),
        closed: false,
        unit: Some(unit.clone()),
    };
    let counts = [lat.nx as i64, lat.ny as i64, lat.nz as i64];
    let mut shifts = Vec::with_capacity(lat.cells());
    for i in 0..counts[0] {
        for j in 0..counts[1] {
            for k in 0..counts[2] {
                let t = Vec3::new(i as f64, j as f64, k as f64) * unit.period;
                shifts.push(([i, j, k], RigidTransform::translation(t)));
            }
        }
    }
    for (_, shift) in &shifts {
        push_tiles(&mut model, unit, shift);
    }
    let Some(gaps) = unit.gap_refs else {
        return Ok(model);
    };
    // Gap patches go last, only where a tile edge faces outside the lattice.
    for (cell, shift) in &shifts {
        for g in &unit.tiles {
            for (e, t) in unit.neighbours.iter().enumerate() {
                let q = unit.cell_of(&g.compose(t));
                let inside = (0..3).all(|a| (0..counts[a]).contains(&(q[a] + cell[a])));
                if !inside {
                    model.instances.push(instance(unit, gaps[e], shift.compose(g)));
                }
            }
        }
    }
    let report = check_watertight(&model);
    if !report.watertight {
        return Err(Error::Topology(report.summary()));
    }
    model.adjacency = report.matched.iter().map(|m| (m.0, m.1)).collect();
    model.closed = true;
    Ok(model)
}

/// Result of pairing up sampled edge-uses.
#[derive(Clone, Debug, Default, Serialize)]
pub struct TopologyReport {
    pub edge_uses: usize,
    pub degenerate: usize,
    pub matched: Vec<(EdgeUse, EdgeUse, f64)>,
    pub unmatched: Vec<EdgeUse>,
    /// Edge-uses matching more than one partner.
    pub overused: Vec<EdgeUse>,
    /// Pairs closer than `NEAR_MISS` but farther than `STITCH_TOL`.
    pub near_misses: Vec<(EdgeUse, EdgeUse, f64)>,
    pub max_gap: f64,
    pub watertight: bool,
}

impl TopologyReport {
    pub fn summary(&self) -> String {
        format!(
            "{} edge-uses, {} matched, {} unmatched, {} overused, {} near misses, max gap {:.3e}",
            self.edge_uses,
            self.matched.len(),
            self.unmatched.len(),
            self.overused.len(),
            self.near_misses.len(),
            self.max_gap
        )
    }
}

fn edge_distance(a: &[Vec3], b: &[Vec3]) -> f64 {
    let fwd = a.iter().zip(b).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
    let rev = a.iter().zip(b.iter().rev()).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
    fwd.min(rev)
}

/// Samples every instance edge at `EDGE_SAMPLES` points and pairs edge-uses
/// that agree pointwise within `STITCH_TOL`. Degenerate edges are skipped.
pub fn check_watertight(solid: &SolidModel) -> TopologyReport {
    let samples: Vec<(EdgeUse, Vec<Vec3>)> = (0..solid.instances.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let inst = &solid.instances[i];
            let s = &solid.geometries[inst.geometry_ref].surface;
            Edge::ALL.into_iter().map(move |e| {
                let pts = (0..EDGE_SAMPLES)
                    .map(|k| {
                        let (u, v) = e.uv(k as f64 / (EDGE_SAMPLES - 1) as f64, 0.0);
                        inst.placement.apply(&s.eval(u, v))
                    })
                    .collect();
                (EdgeUse { instance: i, edge: e }, pts)
            })
        })
        .collect();

    let mut report = TopologyReport { edge_uses: samples.len(), ..Default::default() };
    let cell = NEAR_MISS;
    let key = |c: &Vec3| [0, 1, 2].map(|a| (c[a] / cell).floor() as i64);
    let mut live = Vec::new();
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (k, (_, pts)) in samples.iter().enumerate() {
        let span = pts.iter().map(|p| (p - pts[0]).norm()).fold(0.0, f64::max);
        if span < STITCH_TOL {
            report.degenerate += 1;
            continue;
        }
        let c = pts.iter().sum::<Vec3>() / pts.len() as f64;
        grid.entry(key(&c)).or_default().push(k);
        live.push((k, c));
    }
    let mut partners = vec![0usize; samples.len()];
    for &(k, c) in &live {
        let q = key(&c);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    for &m in grid.get(&[q[0] + dx, q[1] + dy, q[2] + dz]).into_iter().flatten() {
                        if m <= k {
                            continue;
                        }
                        let d = edge_distance(&samples[k].1, &samples[m].1);
                        let pair = (samples[k].0, samples[m].0, d);
                        if d <= STITCH_TOL {
                            partners[k] += 1;
                            partners[m] += 1;
                            report.max_gap = report.max_gap.max(d);
                            report.matched.push(pair);
                        } else if d <= NEAR_MISS {
                            report.near_misses.push(pair);
                        }
                    }
                }
            }
        }
    }
    for &(k, _) in &live {
        match partners[k] {
            0 => report.unmatched.push(samples[k].0),
            1 => {}
            _ => report.overused.push(samples[k].0),
        }
    }
    report.matched.sort_by_key(|m| (m.0, m.1));
    report.near_misses.sort_by_key(|m| (m.0, m.1));
    report.watertight =
        !live.is_empty() && report.unmatched.is_empty() && report.overused.is_empty() && report.near_misses.is_empty();
    report
}

/// Spatial deformation Φ: ℝ³ → ℝ³ applied to control points.
pub trait Deformation: Sync {
    fn map(&self, p: &Vec3) -> Vec3;
}

impl<F: Fn(&Vec3) -> Vec3 + Sync> Deformation for F {
    fn map(&self, p: &Vec3) -> Vec3 {
        self(p)
    }
}

/// Named scaling fields.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum ScalingField {
    Identity,
    /// Uniform scale about the origin.
    Uniform(f64),
    /// z ↦ z₀ + h·(1 + a·h/H) with h = z − z₀ over a box of height H from z₀.
    LinearZ(f64),
}

impl ScalingField {
    /// Concrete map for a model occupying the box `lo..hi`.
    pub fn deformation(&self, lo: Vec3, hi: Vec3) -> Box<dyn Deformation> {
        match *self {
            ScalingField::Identity => Box::new(|p: &Vec3| *p),
            ScalingField::Uniform(s) => Box::new(move |p: &Vec3| p * s),
            ScalingField::LinearZ(a) => {
                let (z0, height) = (lo.z, (hi.z - lo.z).max(f64::MIN_POSITIVE));
                Box::new(move |p: &Vec3| {
                    let h = p.z - z0;
                    Vec3::new(p.x, p.y, z0 + h * (1.0 + a * h / height))
                })
            }
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, ScalingField::Identity)
    }
}

/// Sign of the Jacobian determinant of `phi` on a 9³ grid over the box;
/// errors if it vanishes or changes sign.
fn jacobian_sign(phi: &dyn Deformation, lo: Vec3, hi: Vec3) -> Result<f64> {
    let n = 9;
    let ext = (hi - lo).norm().max(1.0);
    let h = 1e-6 * ext;
    let mut sign = 0.0;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let f = Vec3::new(i as f64, j as f64, k as f64) / (n - 1) as f64;
                let p = lo + (hi - lo).component_mul(&f);
                let col = |d: Vec3| (phi.map(&(p + d * h)) - phi.map(&(p - d * h))) / (2.0 * h);
                let jac = nalgebra::Matrix3::from_columns(&[col(Vec3::x()), col(Vec3::y()), col(Vec3::z())]);
                let det = jac.determinant();
                if det.abs() < 1e-12 || (sign != 0.0 && det.signum() != sign) {
                    return Err(Error::NonInjectiveField);
                }
                sign = det.signum();
            }
        }
    }
    Ok(sign)
}

/// Bakes every placement into its own geometry and maps all control points
/// by `phi`. Weights and knots are kept.
pub fn apply_scaling(solid: &SolidModel, phi: &dyn Deformation) -> Result<SolidModel> {
    let (lo, hi) = solid.bounding_box();
    let sign = jacobian_sign(phi, lo, hi)?;
    let geometries: Vec<Geometry> = solid
        .instances
        .par_iter()
        .map(|inst| {
            let mut surface = solid.geometries[inst.geometry_ref].surface.transformed(&inst.placement);
            for p in surface.control_points.iter_mut() {
                *p = phi.map(p);
            }
            Geometry { surface, role: PatchRole::Baked }
        })
        .collect();
    let instances = solid
        .instances
        .iter()
        .enumerate()
        .map(|(k, inst)| PatchInstance {
            geometry_ref: k,
            placement: RigidTransform::identity(),
            same_sense: inst.same_sense == (sign > 0.0),
        })
        .collect();
    Ok(SolidModel { geometries, instances, adjacency: solid.adjacency.clone(), closed: solid.closed, unit: None })
}
