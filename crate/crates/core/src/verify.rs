//! Deviation of fitted patches from the analytic offset surface, and
//! derivative continuity across paired junctions.

use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::constraints::EdgePairing;
use crate::geom::{RigidTransform, Vec3};
use crate::nurbs::NurbsSurface;
use crate::weierstrass::{param, OffsetSurface};
use crate::{Error, Result};

pub const HISTOGRAM_BINS: usize = 10;
/// Gauss-Newton iterations of the closest-point refinement.
pub const NEWTON_ITERATIONS: usize = 8;

/// A surface that can be searched for closest points: a map from two real
/// coordinates to space with its tangent vectors, and a starting coordinate
/// for every parameter of the unit square.
pub trait Reference: Sync {
    fn coords(&self, u: f64, v: f64) -> Result<[f64; 2]>;
    fn point(&self, c: [f64; 2]) -> Result<Vec3>;
    fn tangents(&self, c: [f64; 2]) -> Result<[Vec3; 2]>;
}

/// The analytic offset primitive, searched in ζ = x + iy.
impl Reference for OffsetSurface {
    fn coords(&self, u: f64, v: f64) -> Result<[f64; 2]> {
        let z = param::zeta_of_uv(u, v)?;
        Ok([z.re, z.im])
    }

    fn point(&self, c: [f64; 2]) -> Result<Vec3> {
        Ok(self.eval_zeta(Complex64::new(c[0], c[1]))?.position)
    }

    fn tangents(&self, c: [f64; 2]) -> Result<[Vec3; 2]> {
        let z = Complex64::new(c[0], c[1]);
        Ok([self.tangent_zeta(z, Complex64::new(1.0, 0.0)), self.tangent_zeta(z, Complex64::i())])
    }
}

/// A NURBS surface searched in its own parameters, clamped to [0, 1]².
impl Reference for NurbsSurface {
    fn coords(&self, u: f64, v: f64) -> Result<[f64; 2]> {
        Ok([u, v])
    }

    fn point(&self, c: [f64; 2]) -> Result<Vec3> {
        Ok(self.eval(c[0].clamp(0.0, 1.0), c[1].clamp(0.0, 1.0)))
    }

    fn tangents(&self, c: [f64; 2]) -> Result<[Vec3; 2]> {
        let d = self.derivatives(c[0].clamp(0.0, 1.0), c[1].clamp(0.0, 1.0));
        Ok([d.su, d.sv])
    }
}

/// Deviation statistics of one or more patches.
#[derive(Clone, Debug, Serialize)]
pub struct DeviationReport {
    pub samples: usize,
    pub max_dev: f64,
    pub mean_dev: f64,
    pub tolerance: f64,
    /// Uniform bins on [0, tolerance]; values above the tolerance land in the last bin.
    pub histogram: Vec<usize>,
    pub above_tolerance: usize,
    pub patch_max: Vec<f64>,
    pub worst_point: Vec3,
    #[serde(skip)]
    pub cloud: Vec<(Vec3, f64)>,
}

impl DeviationReport {
    fn from_distances(points: &[Vec3], dists: &[f64], tolerance: f64, keep_cloud: bool) -> Self {
        let mut histogram = vec![0; HISTOGRAM_BINS];
        let mut above = 0;
        for &d in dists {
            let bin = if tolerance > 0.0 { (d / tolerance * HISTOGRAM_BINS as f64) as usize } else { HISTOGRAM_BINS };
            histogram[bin.min(HISTOGRAM_BINS - 1)] += 1;
            above += usize::from(d > tolerance);
        }
        let (mut max_dev, mut worst) = (0.0, 0);
        for (k, &d) in dists.iter().enumerate() {
            if d > max_dev {
                max_dev = d;
                worst = k;
            }
        }
        let mean_dev = if dists.is_empty() { 0.0 } else { dists.iter().sum::<f64>() / dists.len() as f64 };
        let cloud = if keep_cloud { points.iter().copied().zip(dists.iter().copied()).collect() } else { Vec::new() };
        Self {
            samples: dists.len(),
            max_dev,
            mean_dev,
            tolerance,
            histogram,
            above_tolerance: above,
            patch_max: vec![max_dev],
            worst_point: points.get(worst).copied().unwrap_or_else(Vec3::zeros),
            cloud,
        }
    }

    /// Pools the samples of several reports.
    pub fn merge(reports: Vec<DeviationReport>) -> DeviationReport {
        let mut out = DeviationReport {
            samples: 0,
            max_dev: 0.0,
            mean_dev: 0.0,
            tolerance: reports.first().map_or(0.0, |r| r.tolerance),
            histogram: vec![0; HISTOGRAM_BINS],
            above_tolerance: 0,
            patch_max: Vec::new(),
            worst_point: Vec3::zeros(),
            cloud: Vec::new(),
        };
        let mut sum = 0.0;
        for r in reports {
            sum += r.mean_dev * r.samples as f64;
            out.samples += r.samples;
            if r.max_dev >= out.max_dev {
                out.max_dev = r.max_dev;
                out.worst_point = r.worst_point;
            }
            for (a, b) in out.histogram.iter_mut().zip(&r.histogram) {
                *a += b;
            }
            out.above_tolerance += r.above_tolerance;
            out.patch_max.extend(r.patch_max);
            out.cloud.extend(r.cloud);
        }
        out.mean_dev = if out.samples > 0 { sum / out.samples as f64 } else { 0.0 };
        out
    }

    /// Summary and histogram as CSV.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "samples,max_dev,mean_dev,tolerance,above_tolerance")?;
        writeln!(w, "{},{:.17e},{:.17e},{:.17e},{}", self.samples, self.max_dev, self.mean_dev, self.tolerance, self.above_tolerance)?;
        writeln!(w, "bin_lo,bin_hi,count")?;
        let width = self.tolerance / HISTOGRAM_BINS as f64;
        for (k, c) in self.histogram.iter().enumerate() {
            writeln!(w, "{:.17e},{:.17e},{}", k as f64 * width, (k + 1) as f64 * width, c)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// "x y z err" lines.
    pub fn write_cloud<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (p, e) in &self.cloud {
            writeln!(w, "{:.17e} {:.17e} {:.17e} {:.17e}", p.x, p.y, p.z, e)?;
        }
        Ok(())
    }
}

/// Distance from `x` to `reference`, starting at coordinate `c0`: Gauss-Newton
/// steps are only accepted when they bring the point closer, so the result
/// never exceeds the starting distance.
pub fn closest_distance<R: Reference + ?Sized>(reference: &R, x: &Vec3, c0: [f64; 2], d0: f64) -> f64 {
    let mut c = c0;
    let mut best = d0;
    for _ in 0..NEWTON_ITERATIONS {
        let Ok(p) = reference.point(c) else { break };
        let Ok([tu, tv]) = reference.tangents(c) else { break };
        let r = x - p;
        let (a, b, d) = (tu.dot(&tu), tu.dot(&tv), tv.dot(&tv));
        let det = a * d - b * b;
        if !(det.abs() > 1e-300) {
            break;
        }
        let (gu, gv) = (tu.dot(&r), tv.dot(&r));
        let mut step = [(d * gu - b * gv) / det, (a * gv - b * gu) / det];
        let mut improved = false;
        for _ in 0..6 {
            let trial = [c[0] + step[0], c[1] + step[1]];
            if let Ok(q) = reference.point(trial) {
                let dist = (x - q).norm();
                if dist < best {
                    best = dist;
                    c = trial;
                    improved = true;
                    break;
                }
            }
            step = [0.5 * step[0], 0.5 * step[1]];
        }
        if !improved {
            break;
        }
    }
    best
}

/// Deviation of `approx` from `reference` on a `density × density`
/// parameter grid: each approximating point starts from the nearest of the
/// 3×3 reference points around its grid index, then is refined by
/// Gauss-Newton.
pub fn measure_deviation<R: Reference>(
    approx: &NurbsSurface,
    reference: &R,
    density: usize,
    tolerance: f64,
    keep_cloud: bool,
) -> Result<DeviationReport> {
    if density < 2 {
        return Err(Error::GridShape(format!("deviation density {density} is too small")));
    }
    let n = density;
    let t = |i: usize| i as f64 / (n - 1) as f64;
    let cloud: Vec<([f64; 2], Vec3)> = (0..n * n)
        .into_par_iter()
        .map(|k| {
            let c = reference.coords(t(k / n), t(k % n))?;
            Ok((c, reference.point(c)?))
        })
        .collect::<Result<_>>()?;
    let (points, dists): (Vec<Vec3>, Vec<f64>) = (0..n * n)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / n, k % n);
            let x = approx.eval(t(i), t(j));
            let mut start = (f64::INFINITY, cloud[k].0);
            for a in i.saturating_sub(1)..(i + 2).min(n) {
                for b in j.saturating_sub(1)..(j + 2).min(n) {
                    let (c, p) = &cloud[a * n + b];
                    let d = (x - p).norm();
                    if d < start.0 {
                        start = (d, *c);
                    }
                }
            }
            (x, closest_distance(reference, &x, start.1, start.0))
        })
        .unzip();
    Ok(DeviationReport::from_distances(&points, &dists, tolerance, keep_cloud))
}

/// Continuity statistics of one junction, in percent.
#[derive(Clone, Debug, Serialize)]
pub struct ContinuityReport {
    pub source: String,
    pub target: String,
    pub first_max: f64,
    pub first_mean: f64,
    pub second_max: f64,
    pub second_mean: f64,
}

/// A primitive surface placed in space.
#[derive(Clone, Copy, Debug)]
pub struct Placed<'a> {
    pub surface: &'a NurbsSurface,
    pub placement: &'a RigidTransform,
}

/// Cross-boundary derivatives of a placed patch at `t` along `edge`:
/// first and second derivative with respect to the inward parameter.
fn cross_derivatives(p: &Placed, edge: crate::nurbs::Edge, t: f64) -> (Vec3, Vec3, Vec3) {
    let (u, v) = edge.uv(t, 0.0);
    let d = p.surface.derivatives(u, v);
    let sign = if edge.at_end() { -1.0 } else { 1.0 };
    let (d1, d2) = if edge.runs_along_u() { (d.sv, d.svv) } else { (d.su, d.suu) };
    let r = p.placement;
    (r.apply(&d.s), r.apply_vector(&(d1 * sign)), r.apply_vector(&d2))
}

/// Compares cross-boundary derivatives of `a` (carrying the pairing's source
/// edge) and `b` (carrying its target edge) at `samples` stations. Both sides
/// are differentiated inward; the first derivatives must be opposite and the
/// second equal. Differences are relative to the mean magnitude of the two
/// sides, floored at 1e-3 of its largest value along the edge.
pub fn junction_continuity(a: Placed, b: Placed, pairing: &EdgePairing, samples: usize) -> Result<ContinuityReport> {
    let n = samples.max(2);
    let scale = a.surface.control_points.iter().map(|p| p.norm()).fold(1.0, f64::max);
    let mut rows = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 / (n - 1) as f64;
        let tb = if pairing.flip { 1.0 - t } else { t };
        let (pa, a1, a2) = cross_derivatives(&a, pairing.source.edge, t);
        let (pb, b1, b2) = cross_derivatives(&b, pairing.target.edge, tb);
        let gap = (pa - pb).norm();
        if gap > 1e-6 * scale {
            return Err(Error::PairingMismatch(format!(
                "{} and {} are {gap:e} apart at t = {t}",
                pairing.source.edge.name(),
                pairing.target.edge.name()
            )));
        }
        rows.push(((a1 + b1).norm(), (0.5 * (a1 - b1)).norm(), (a2 - b2).norm(), (0.5 * (a2 + b2)).norm()));
    }
    let floor1 = 1e-3 * rows.iter().map(|r| r.1).fold(0.0, f64::max);
    let floor2 = 1e-3 * rows.iter().map(|r| r.3).fold(0.0, f64::max);
    let rel = |diff: f64, norm: f64, floor: f64| if norm.max(floor) > 0.0 { 100.0 * diff / norm.max(floor) } else { 0.0 };
    let first: Vec<f64> = rows.iter().map(|r| rel(r.0, r.1, floor1)).collect();
    let second: Vec<f64> = rows.iter().map(|r| rel(r.2, r.3, floor2)).collect();
    let stats = |v: &[f64]| (v.iter().copied().fold(0.0, f64::max), v.iter().sum::<f64>() / v.len() as f64);
    let (first_max, first_mean) = stats(&first);
    let (second_max, second_mean) = stats(&second);
    Ok(ContinuityReport {
        source: format!("net{}:{}", pairing.source.net, pairing.source.edge.name()),
        target: format!("net{}:{}", pairing.target.net, pairing.target.edge.name()),
        first_max,
        first_mean,
        second_max,
        second_mean,
    })
}

/// Continuity of every pairing of a fitted kind, with the source primitive
/// at the identity and the target primitive placed by the pairing.
pub fn pairing_continuity(surfaces: &[NurbsSurface], pairings: &[EdgePairing], samples: usize) -> Result<Vec<ContinuityReport>> {
    let identity = RigidTransform::identity();
    pairings
        .iter()
        .map(|p| {
            let a = Placed { surface: &surfaces[p.source.net], placement: &identity };
            let b = Placed { surface: &surfaces[p.target.net], placement: &p.transform };
            junction_continuity(a, b, p, samples)
        })
        .collect()
}

/// Continuity rows as CSV.
pub fn write_continuity_csv<W: Write>(rows: &[ContinuityReport], mut w: W) -> std::io::Result<()> {
    writeln!(w, "source,target,first_max_pct,first_mean_pct,second_max_pct,second_mean_pct")?;
    for r in rows {
        writeln!(w, "{},{},{:.6e},{:.6e},{:.6e},{:.6e}", r.source, r.target, r.first_max, r.first_mean, r.second_max, r.second_mean)?;
    }
    Ok(())
}
