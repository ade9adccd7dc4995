//! ε-density sampling: derivative bounds, grid spacing from the tolerance,
//! the regular sample grid over the unit square, and the triangle mesh that
//! serves as the virtual intermediate surface.

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::weierstrass::{param, tau_of_zeta, OffsetSurface};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Safety factor applied to probed second-derivative maxima.
pub const SAFETY_FACTOR: f64 = 1.25;
/// Finite-difference step for derivative probing.
pub const PROBE_STEP: f64 = 1e-3;

/// Bounds on ‖S_uu‖, ‖S_uv‖, ‖S_vv‖ over the unit square.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivativeBounds {
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub probe_resolution: usize,
}

impl DerivativeBounds {
    /// Filip's factor (M1 + 2M2 + M3)/8.
    pub fn filip_factor(&self) -> f64 {
        (self.m1 + 2.0 * self.m2 + self.m3) / 8.0
    }

    /// Certified mesh deviation for spacing `delta`.
    pub fn epsilon_for(&self, delta: f64) -> f64 {
        self.filip_factor() * delta * delta
    }

    /// Componentwise maximum of two bounds.
    pub fn max(&self, other: &DerivativeBounds) -> DerivativeBounds {
        DerivativeBounds {
            m1: self.m1.max(other.m1),
            m2: self.m2.max(other.m2),
            m3: self.m3.max(other.m3),
            probe_resolution: self.probe_resolution.min(other.probe_resolution),
        }
    }
}

/// Probes second partials of `f` by central differences at the centres of a
/// `res × res` cell grid and returns the maxima times `safety`.
pub fn probe_bounds<F>(f: F, res: usize, safety: f64) -> Result<DerivativeBounds>
where
    F: Fn(f64, f64) -> Result<Vec3> + Sync,
{
    if res < 2 {
        return Err(Error::GridShape(format!("probe resolution {res} is too small")));
    }
    let h = PROBE_STEP.min(0.25 / res as f64);
    let maxima: Vec<[f64; 3]> = (0..res * res)
        .into_par_iter()
        .map(|k| {
            let u = (k / res) as f64 / res as f64 + 0.5 / res as f64;
            let v = (k % res) as f64 / res as f64 + 0.5 / res as f64;
            let c = f(u, v)?;
            let suu = (f(u + h, v)? - 2.0 * c + f(u - h, v)?) / (h * h);
            let svv = (f(u, v + h)? - 2.0 * c + f(u, v - h)?) / (h * h);
            let suv = (f(u + h, v + h)? - f(u + h, v - h)? - f(u - h, v + h)? + f(u - h, v - h)?) / (4.0 * h * h);
            Ok([suu.norm(), suv.norm(), svv.norm()])
        })
        .collect::<Result<_>>()?;
    let mut m = [0.0f64; 3];
    for row in &maxima {
        for c in 0..3 {
            m[c] = m[c].max(row[c]);
        }
    }
    if m.iter().all(|&x| x < 1e-12) {
        return Err(Error::DegenerateSurface);
    }
    Ok(DerivativeBounds { m1: safety * m[0], m2: safety * m[1], m3: safety * m[2], probe_resolution: res })
}

/// Second-derivative bounds of an offset primitive on the unit square.
pub fn estimate_derivative_bounds(surface: &OffsetSurface, probe_resolution: usize) -> Result<DerivativeBounds> {
    if probe_resolution < 16 {
        return Err(Error::GridShape(format!("probe resolution {probe_resolution} below 16")));
    }
    probe_bounds(|u, v| Ok(surface.eval_uv(u, v)?.position), probe_resolution, SAFETY_FACTOR)
}

/// Δ = √(8ε/(M1 + 2M2 + M3)), clamped so the grid keeps at least 4 × 4 nodes.
pub fn density_from_tolerance(bounds: &DerivativeBounds, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidTolerance(epsilon));
    }
    let denom = bounds.m1 + 2.0 * bounds.m2 + bounds.m3;
    if !(denom > 1e-12) {
        return Err(Error::DegenerateSurface);
    }
    Ok((8.0 * epsilon / denom).sqrt().min(1.0 / 3.0))
}

/// Node count per direction for a spacing no coarser than `delta`.
pub fn nodes_for_spacing(delta: f64) -> usize {
    let cells = (1.0 / delta - 1e-9).ceil().max(3.0) as usize;
    cells + 1
}

/// Samples of one primitive on a rectangular (u, v) grid, stored row-major
/// (`i * nv + j`, `i` along u).
#[derive(Clone, Debug)]
pub struct SampleGrid {
    pub params_u: Vec<f64>,
    pub params_v: Vec<f64>,
    pub zeta: Vec<Complex64>,
    pub points: Vec<Vec3>,
    pub delta: f64,
    pub epsilon: f64,
}

impl SampleGrid {
    pub fn nu(&self) -> usize {
        self.params_u.len()
    }

    pub fn nv(&self) -> usize {
        self.params_v.len()
    }

    pub fn point(&self, i: usize, j: usize) -> Vec3 {
        self.points[i * self.nv() + j]
    }

    /// τ of node (i, j).
    pub fn tau(&self, i: usize, j: usize) -> Complex64 {
        tau_of_zeta(self.zeta[i * self.nv() + j])
    }
}

/// Triangle soup over the grid, two triangles per cell.
#[derive(Clone, Debug)]
pub struct IntermediateMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

impl IntermediateMesh {
    pub fn from_grid(grid: &SampleGrid) -> Self {
        let (nu, nv) = (grid.nu(), grid.nv());
        let mut triangles = Vec::with_capacity(2 * (nu - 1) * (nv - 1));
        for i in 0..nu - 1 {
            for j in 0..nv - 1 {
                let v1 = i * nv + j;
                let v2 = (i + 1) * nv + j;
                let v3 = (i + 1) * nv + j + 1;
                let v4 = i * nv + j + 1;
                triangles.push([v1, v2, v3]);
                triangles.push([v1, v3, v4]);
            }
        }
        Self { vertices: grid.points.clone(), triangles }
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        0.5 * (self.vertices[b] - self.vertices[a]).cross(&(self.vertices[c] - self.vertices[a])).norm()
    }

    /// Writes "v x y z" and 1-based "f i j k" lines.
    pub fn write_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for v in &self.vertices {
            writeln!(w, "v {:.17e} {:.17e} {:.17e}", v.x, v.y, v.z)?;
        }
        for t in &self.triangles {
            writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        Ok(())
    }
}

/// ζ on a parameter grid. When both parameter lists agree, only u ≥ v is
/// solved and the rest is filled by ζ(v, u) = conj ζ(u, v).
pub fn zeta_grid(params_u: &[f64], params_v: &[f64]) -> Result<Vec<Complex64>> {
    let (nu, nv) = (params_u.len(), params_v.len());
    let symmetric = params_u == params_v;
    let mut zeta: Vec<Complex64> = (0..nu * nv)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / nv, k % nv);
            if symmetric && j > i {
                return Ok(Complex64::new(f64::NAN, 0.0));
            }
            param::zeta_of_uv(params_u[i], params_v[j])
        })
        .collect::<Result<_>>()?;
    if symmetric {
        for i in 0..nu {
            for j in i + 1..nv {
                zeta[i * nv + j] = zeta[j * nv + i].conj();
            }
        }
    }
    Ok(zeta)
}

/// Grid on explicit parameter lists.
pub fn build_grid_with_params(surface: &OffsetSurface, params_u: &[f64], params_v: &[f64]) -> Result<SampleGrid> {
    let zeta = zeta_grid(params_u, params_v)?;
    let points = zeta.par_iter().map(|&z| Ok(surface.eval_zeta(z)?.position)).collect::<Result<_>>()?;
    let delta = params_u
        .windows(2)
        .chain(params_v.windows(2))
        .map(|w| w[1] - w[0])
        .fold(0.0, f64::max);
    Ok(SampleGrid {
        params_u: params_u.to_vec(),
        params_v: params_v.to_vec(),
        zeta,
        points,
        delta,
        epsilon: f64::NAN,
    })
}

/// Regular grid with spacing no coarser than `delta`, together with its mesh.
/// `epsilon` of the grid is the certificate computed from `bounds`.
pub fn build_sample_grid(
    surface: &OffsetSurface,
    delta: f64,
    bounds: &DerivativeBounds,
) -> Result<(SampleGrid, IntermediateMesh)> {
    let n = nodes_for_spacing(delta);
    let params = crate::nurbs::uniform_params(n);
    let mut grid = build_grid_with_params(surface, &params, &params)?;
    grid.delta = 1.0 / (n - 1) as f64;
    grid.epsilon = bounds.epsilon_for(grid.delta);
    let mesh = IntermediateMesh::from_grid(&grid);
    Ok((grid, mesh))
}

/// Distance from `p` to triangle (a, b, c).
pub fn point_triangle_distance(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    // Ericson, closest point on triangle.
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return ap.norm();
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return bp.norm();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let t = d1 / (d1 - d3);
        return (p - (a + ab * t)).norm();
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return cp.norm();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let t = d2 / (d2 - d6);
        return (p - (a + ac * t)).norm();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (p - (b + (c - b) * t)).norm();
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (p - (a + ab * v + ac * w)).norm()
}

/// Maximum distance from analytic points on a probe set `factor` times denser
/// than the grid to the two mesh triangles of their parameter cell. This
/// bounds the true point-to-mesh distance from above.
pub fn mesh_deviation(surface: &OffsetSurface, grid: &SampleGrid, mesh: &IntermediateMesh, factor: usize) -> Result<f64> {
    let (nu, nv) = (grid.nu(), grid.nv());
    let per = factor.max(1);
    let jobs: Vec<(usize, usize)> = (0..nu - 1).flat_map(|i| (0..nv - 1).map(move |j| (i, j))).collect();
    let worst = jobs
        .par_iter()
        .map(|&(i, j)| {
            let (u0, u1) = (grid.params_u[i], grid.params_u[i + 1]);
            let (v0, v1) = (grid.params_v[j], grid.params_v[j + 1]);
            let t = 2 * ((i * (nv - 1)) + j);
            let tri = |k: usize| {
                let [a, b, c] = mesh.triangles[k];
                (mesh.vertices[a], mesh.vertices[b], mesh.vertices[c])
            };
            let (a1, b1, c1) = tri(t);
            let (a2, b2, c2) = tri(t + 1);
            let mut worst: f64 = 0.0;
            for a in 0..=per {
                for b in 0..=per {
                    let u = u0 + (u1 - u0) * a as f64 / per as f64;
                    let v = v0 + (v1 - v0) * b as f64 / per as f64;
                    let p = surface.eval_uv(u, v)?.position;
                    let d = point_triangle_distance(&p, &a1, &b1, &c1).min(point_triangle_distance(&p, &a2, &b2, &c2));
                    worst = worst.max(d);
                }
            }
            Ok(worst)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(worst.into_iter().fold(0.0, f64::max))
}
