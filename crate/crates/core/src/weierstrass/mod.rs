//! Enneper–Weierstrass evaluation of the P/D/G associate family and its
//! offset surfaces.
//!
//! The Weierstrass function R(τ) = (1 − 14τ⁴ + τ⁸)^(−1/2) has a branch point
//! at the kite corner τ = a = √(2 − √3). Integrals are therefore taken in the
//! variable ζ = √(a − τ), in which the integrand is analytic on the whole
//! fundamental domain, corner included.

pub mod param;
pub mod quadrature;

use crate::error::{Error, Result};
use crate::geom::Vec3;
use num_complex::Complex64;
use quadrature::{integrate, CVec3, QuadSettings};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

/// A point of the τ (or ω) plane.
pub type ComplexParam = Complex64;

/// Default branch guard on |1 − 14τ⁴ + τ⁸|.
pub const BRANCH_GUARD: f64 = 1e-8;

/// Kite corner on the real axis, a root of the radicand.
pub static KITE_A: LazyLock<f64> = LazyLock::new(|| (2.0 - 3f64.sqrt()).sqrt());
/// Kite corner at parameter (1, 0): (√2 − 1)·e^{iπ/4}.
pub static KITE_M: LazyLock<Complex64> =
    LazyLock::new(|| Complex64::from_polar(2f64.sqrt() - 1.0, std::f64::consts::FRAC_PI_4));
/// Centre of the circular edge u = 1; the edge v = 1 uses its conjugate.
pub static ARC_CENTRE: LazyLock<Complex64> =
    LazyLock::new(|| Complex64::new(-std::f64::consts::FRAC_1_SQRT_2, -std::f64::consts::FRAC_1_SQRT_2));
/// Radius of both circular edges.
pub const ARC_RADIUS: f64 = std::f64::consts::SQRT_2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TpmsKind {
    Gyroid,
    Diamond,
    SchwarzP,
}

/// Which primitive carries which offset sign.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OffsetSign {
    Plus,
    Minus,
}

impl OffsetSign {
    pub fn factor(self) -> f64 {
        match self {
            OffsetSign::Plus => 1.0,
            OffsetSign::Minus => -1.0,
        }
    }
}

impl TpmsKind {
    pub const ALL: [TpmsKind; 3] = [TpmsKind::Gyroid, TpmsKind::Diamond, TpmsKind::SchwarzP];

    pub fn bonnet_angle_deg(self) -> f64 {
        match self {
            TpmsKind::Diamond => 0.0,
            TpmsKind::Gyroid => 38.014_774_0,
            TpmsKind::SchwarzP => 90.0,
        }
    }

    pub fn bonnet_phase(self) -> Complex64 {
        Complex64::from_polar(1.0, self.bonnet_angle_deg().to_radians())
    }

    /// Offset convention: the `Plus` primitive is the patch displaced by +d
    /// along the Gauss-map normal n̂(τ) = (2Re τ, 2Im τ, |τ|² − 1)/(|τ|² + 1);
    /// the `Minus` primitive is displaced by −d.
    pub fn offset_sign_convention(self) -> &'static str {
        "plus primitive: +d along (2Re t, 2Im t, |t|^2-1)/(|t|^2+1); minus primitive: -d"
    }

    pub fn name(self) -> &'static str {
        match self {
            TpmsKind::Gyroid => "Gyroid",
            TpmsKind::Diamond => "Diamond",
            TpmsKind::SchwarzP => "SchwarzP",
        }
    }
}

impl fmt::Display for TpmsKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TpmsKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().replace(['_', '-', ' '], "").as_str() {
            "gyroid" | "g" => Ok(TpmsKind::Gyroid),
            "diamond" | "d" => Ok(TpmsKind::Diamond),
            "schwarzp" | "p" => Ok(TpmsKind::SchwarzP),
            _ => Err(format!("unknown TPMS kind '{s}' (expected Gyroid, Diamond or SchwarzP)")),
        }
    }
}

/// Evaluated point of an offset surface.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceSample {
    pub position: Vec3,
    pub normal: Vec3,
    pub offset: f64,
}

/// 1 − 14τ⁴ + τ⁸.
pub fn radicand(tau: Complex64) -> Complex64 {
    let t4 = tau.powi(4);
    Complex64::new(1.0, 0.0) - 14.0 * t4 + t4 * t4
}

/// Horner coefficients (highest power first) of radicand(τ)/(τ − a).
static QUOTIENT: LazyLock<[f64; 8]> = LazyLock::new(|| {
    let c = [1.0, 0.0, 0.0, 0.0, -14.0, 0.0, 0.0, 0.0, 1.0];
    let a = *KITE_A;
    let mut b = [0.0; 8];
    b[0] = c[0];
    for k in 1..8 {
        b[k] = c[k] + a * b[k - 1];
    }
    b
});

/// q(τ) = (1 − 14τ⁴ + τ⁸)/(τ − a) and its derivative.
pub fn quotient(tau: Complex64) -> (Complex64, Complex64) {
    let mut q = Complex64::new(0.0, 0.0);
    let mut dq = Complex64::new(0.0, 0.0);
    for &b in QUOTIENT.iter() {
        dq = dq * tau + q;
        q = q * tau + b;
    }
    (q, dq)
}

/// R(τ) = (1 − 14τ⁴ + τ⁸)^(−1/2), principal branch.
pub fn weierstrass_r(tau: ComplexParam) -> Result<Complex64> {
    weierstrass_r_guarded(tau, BRANCH_GUARD)
}

pub fn weierstrass_r_guarded(tau: ComplexParam, guard: f64) -> Result<Complex64> {
    let r = radicand(tau);
    if r.norm() < guard {
        return Err(Error::BranchPoint(r.norm()));
    }
    Ok(r.sqrt().inv())
}

/// τ = a − ζ².
pub fn tau_of_zeta(zeta: Complex64) -> Complex64 {
    *KITE_A - zeta * zeta
}

/// ζ = √(a − τ), principal branch (Re(a − τ) > 0 on the kite).
pub fn zeta_of_tau(tau: Complex64) -> Complex64 {
    (*KITE_A - tau).sqrt()
}

/// ζ of the anchor τ = 0.
pub fn zeta_anchor() -> Complex64 {
    Complex64::new(KITE_A.sqrt(), 0.0)
}

/// Integrand in ζ: (1 − τ², i(1 + τ²), 2τ)·R(τ)·dτ/dζ with the branch factor
/// of R absorbed, G = −2/√(−q(τ)).
pub fn zeta_integrand(zeta: Complex64) -> CVec3 {
    let tau = tau_of_zeta(zeta);
    let (q, _) = quotient(tau);
    let g = -2.0 / (-q).sqrt();
    let one = Complex64::new(1.0, 0.0);
    let t2 = tau * tau;
    [(one - t2) * g, Complex64::i() * (one + t2) * g, 2.0 * tau * g]
}

/// Complex integrals from the anchor ζ = √a to `zeta` along a straight segment.
pub fn minimal_integral(zeta: Complex64, quad: QuadSettings) -> Result<CVec3> {
    Ok(integrate(&zeta_integrand, zeta_anchor(), zeta, quad)?.value)
}

/// Complex integrals between two points of the ζ plane.
pub fn segment_integral(from: Complex64, to: Complex64, quad: QuadSettings) -> Result<CVec3> {
    Ok(integrate(&zeta_integrand, from, to, quad)?.value)
}

/// Real part of e^{iθ}·I.
pub fn rotate_real(kind: TpmsKind, i: &CVec3) -> Vec3 {
    let ph = kind.bonnet_phase();
    Vec3::new((ph * i[0]).re, (ph * i[1]).re, (ph * i[2]).re)
}

/// Gauss map n̂(τ) = (2Re τ, 2Im τ, |τ|² − 1)/(|τ|² + 1).
pub fn gauss_map(tau: Complex64) -> Vec3 {
    let s = tau.norm_sqr() + 1.0;
    Vec3::new(2.0 * tau.re / s, 2.0 * tau.im / s, 1.0 - 2.0 / s)
}

/// Partial derivatives of the Gauss map with respect to Re τ and Im τ.
pub fn gauss_map_jacobian(tau: Complex64) -> (Vec3, Vec3) {
    let (x, y) = (tau.re, tau.im);
    let s = x * x + y * y + 1.0;
    let s2 = s * s;
    (
        Vec3::new(2.0 / s - 4.0 * x * x / s2, -4.0 * x * y / s2, 4.0 * x / s2),
        Vec3::new(-4.0 * x * y / s2, 2.0 / s - 4.0 * y * y / s2, 4.0 * y / s2),
    )
}

/// Normal from n = (2Im(φ₂φ̄₃), 2Im(φ₃φ̄₁), 2Im(φ₁φ̄₂)) with the positive
/// factor |R|² dropped (it cancels on normalization).
fn phi_normal_unscaled(tau: Complex64) -> Vec3 {
    let one = Complex64::new(1.0, 0.0);
    let t2 = tau * tau;
    let p1 = one - t2;
    let p2 = Complex64::i() * (one + t2);
    let p3 = 2.0 * tau;
    Vec3::new(2.0 * (p2 * p3.conj()).im, 2.0 * (p3 * p1.conj()).im, 2.0 * (p1 * p2.conj()).im)
}

/// Unit surface normal from the φ formulas.
pub fn surface_normal(kind: TpmsKind, omega: ComplexParam) -> Result<Vec3> {
    let r = weierstrass_r(omega)?;
    let ph = kind.bonnet_phase() * r;
    let one = Complex64::new(1.0, 0.0);
    let t2 = omega * omega;
    let p1 = (one - t2) * ph;
    let p2 = Complex64::i() * (one + t2) * ph;
    let p3 = 2.0 * omega * ph;
    let n = Vec3::new(2.0 * (p2 * p3.conj()).im, 2.0 * (p3 * p1.conj()).im, 2.0 * (p1 * p2.conj()).im);
    let len = n.norm();
    if len < 1e-14 {
        return Err(Error::DegenerateNormal(len));
    }
    Ok(n / len)
}

/// Offset-surface point at ζ. Valid at the branch corner ζ = 0.
pub fn eval_zeta(kind: TpmsKind, offset_d: f64, zeta: Complex64, quad: QuadSettings) -> Result<SurfaceSample> {
    let integral = minimal_integral(zeta, quad)?;
    Ok(sample_from_integral(kind, offset_d, zeta, &integral))
}

/// Builds a sample from precomputed integrals at ζ.
pub fn sample_from_integral(kind: TpmsKind, offset_d: f64, zeta: Complex64, integral: &CVec3) -> SurfaceSample {
    let tau = tau_of_zeta(zeta);
    let n = phi_normal_unscaled(tau);
    let normal = n / n.norm();
    SurfaceSample { position: rotate_real(kind, integral) + offset_d * normal, normal, offset: offset_d }
}

/// Offset-surface point at τ = `omega`.
pub fn eval_offset_point(kind: TpmsKind, offset_d: f64, omega: ComplexParam, quad: QuadSettings) -> Result<SurfaceSample> {
    let r = radicand(omega);
    if r.norm() < BRANCH_GUARD {
        return Err(Error::BranchPoint(r.norm()));
    }
    eval_zeta(kind, offset_d, zeta_of_tau(omega), quad)
}

/// Tangent of the offset surface at ζ for a displacement `delta` of ζ.
pub fn tangent_zeta(kind: TpmsKind, offset_d: f64, zeta: Complex64, delta: Complex64) -> Vec3 {
    let f = zeta_integrand(zeta);
    let ph = kind.bonnet_phase();
    let base = Vec3::new((ph * f[0] * delta).re, (ph * f[1] * delta).re, (ph * f[2] * delta).re);
    if offset_d == 0.0 {
        return base;
    }
    let dtau = -2.0 * zeta * delta;
    let (nx, ny) = gauss_map_jacobian(tau_of_zeta(zeta));
    base + offset_d * (nx * dtau.re + ny * dtau.im)
}

/// Membership test for the closed kite-shaped fundamental domain.
pub fn in_fundamental_domain(tau: ComplexParam, slack: f64) -> bool {
    let c = *ARC_CENTRE;
    let arg_ok = tau.norm() <= slack || tau.arg().abs() <= std::f64::consts::FRAC_PI_4 + slack;
    arg_ok && (tau - c).norm() <= ARC_RADIUS + slack && (tau - c.conj()).norm() <= ARC_RADIUS + slack
}

/// Vertex list of the fundamental domain in (u, v) corner order
/// (0,0), (1,0), (1,1), (0,1).
pub fn fundamental_vertices() -> [Complex64; 4] {
    [Complex64::new(0.0, 0.0), *KITE_M, Complex64::new(*KITE_A, 0.0), KITE_M.conj()]
}

/// Convenience handle for one offset primitive.
#[derive(Clone, Copy, Debug)]
pub struct OffsetSurface {
    pub kind: TpmsKind,
    pub offset: f64,
    pub quad: QuadSettings,
}

impl OffsetSurface {
    pub fn new(kind: TpmsKind, offset: f64) -> Self {
        Self { kind, offset, quad: QuadSettings::default() }
    }

    pub fn eval_zeta(&self, zeta: Complex64) -> Result<SurfaceSample> {
        eval_zeta(self.kind, self.offset, zeta, self.quad)
    }

    /// Evaluation at a parameter of the unit square.
    pub fn eval_uv(&self, u: f64, v: f64) -> Result<SurfaceSample> {
        self.eval_zeta(param::zeta_of_uv(u, v)?)
    }

    pub fn tangent_zeta(&self, zeta: Complex64, delta: Complex64) -> Vec3 {
        tangent_zeta(self.kind, self.offset, zeta, delta)
    }
}

/// Schwarz reflection of τ across the kite edge `edge`; the continued
/// surface at the reflected point is the neighbouring patch across that edge.
pub fn reflect_tau(edge: crate::nurbs::Edge, tau: Complex64) -> Complex64 {
    use crate::nurbs::Edge;
    let c = *ARC_CENTRE;
    let r2 = ARC_RADIUS * ARC_RADIUS;
    match edge {
        Edge::V0 => Complex64::i() * tau.conj(),
        Edge::U0 => -Complex64::i() * tau.conj(),
        Edge::U1 => c + r2 / (tau - c).conj(),
        Edge::V1 => c.conj() + r2 / (tau - c.conj()).conj(),
    }
}

/// Integrand analytically continued from a reference point `z_ref`, where
/// √(−q) takes the value `sqrt_ref`; valid along short segments.
fn continued_integrand(zeta: Complex64, mq_ref: Complex64, sqrt_ref: Complex64) -> CVec3 {
    let tau = tau_of_zeta(zeta);
    let (q, _) = quotient(tau);
    let s = sqrt_ref * ((-q) / mq_ref).sqrt();
    let g = -2.0 / s;
    let one = Complex64::new(1.0, 0.0);
    let t2 = tau * tau;
    [(one - t2) * g, Complex64::i() * (one + t2) * g, 2.0 * tau * g]
}

/// Point of the analytic continuation of the surface across `edge`: the
/// mirror image, in τ, of the parameter `edge.uv(t, s)`. The sheet of
/// ζ = ±√(a − τ) is the one nearest the mirror image of ζ across the tangent
/// of the edge's ζ-image, which stays unambiguous at the branch corner
/// τ = a; the path then runs straight in ζ, where the integrand is analytic.
pub fn eval_across_edge(surface: &OffsetSurface, edge: crate::nurbs::Edge, t: f64, s: f64) -> Result<SurfaceSample> {
    let (ui, vi) = edge.uv(t, s);
    let zi = param::zeta_of_uv(ui, vi)?;
    let tr = reflect_tau(edge, tau_of_zeta(zi));
    let delta = 1e-4;
    let at = |x: f64| {
        let (u, v) = edge.uv(x.clamp(0.0, 1.0), 0.0);
        param::zeta_of_uv(u, v)
    };
    let ze = at(t)?;
    let dir = at(t + delta)? - at(t - delta)?;
    let dir = dir / dir.norm();
    let mirrored = ze + dir * dir * (zi - ze).conj();
    let mut zr = zeta_of_tau(tr);
    if (zr - mirrored).norm() > (-zr - mirrored).norm() {
        zr = -zr;
    }
    let base = minimal_integral(zi, surface.quad)?;
    let mq = -quotient(tau_of_zeta(zi)).0;
    let sq = mq.sqrt();
    let ext = integrate(&|w| continued_integrand(w, mq, sq), zi, zr, surface.quad)?.value;
    let total = [base[0] + ext[0], base[1] + ext[1], base[2] + ext[2]];
    Ok(sample_from_integral(surface.kind, surface.offset, zr, &total))
}
