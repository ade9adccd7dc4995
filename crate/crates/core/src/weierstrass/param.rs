//! Conformal-type parameterization of the kite by the unit square.
//!
//! The square is sent to a quarter of the lemniscatic period square through
//! z = Ω(u − iv), and the lemniscatic ℘ (g₂ = 4, g₃ = 0) maps that quarter onto
//! a half plane. On the kite side, W(ζ) ∝ ζ³(−q)^{3/2}/(τ²(τ⁴ + 1)²) has the
//! same corner behaviour, so solving W(ζ) = ℘(z) yields a map whose edge
//! reflections coincide with the kite's edge reflections. A radial damping of
//! ℘ near its zero evens out the parametric speed at the corner τ = a.

use super::{quotient, tau_of_zeta, zeta_anchor, KITE_A, KITE_M};
use crate::error::{Error, Result};
use num_complex::Complex64;
use std::sync::LazyLock;

/// Real half period Ω of the lemniscatic lattice (g₂ = 4, g₃ = 0).
pub const OMEGA: f64 = 1.311_028_777_146_059_9;

/// Radial damping of ℘ near its zero: ℘·(x/(x + CC·b(x)))^{GAM/2},
/// x = |℘|², b = (1 − x/X1)⁴ on x < X1 and 0 beyond.
pub const DAMP_CC: f64 = 0.1;
pub const DAMP_GAM: f64 = 2.0;
pub const DAMP_X1: f64 = 1.0;

/// Resolution of the continuation table used for initial guesses.
pub const TABLE_SIZE: usize = 129;

const HALVINGS: i32 = 8;

static LAURENT: LazyLock<[f64; 12]> = LazyLock::new(|| {
    let mut c = [0.0; 12];
    c[1] = 0.2;
    for k in 3..12 {
        let s: f64 = (1..k - 1).map(|m| c[m] * c[k - 1 - m]).sum();
        c[k] = 3.0 / ((2 * k + 3) as f64 * (k - 2) as f64) * s;
    }
    c
});

/// Lemniscatic Weierstrass ℘(z) with g₂ = 4, g₃ = 0.
pub fn wp(z: Complex64) -> Complex64 {
    let zs = z / 2f64.powi(HALVINGS);
    let z2 = zs * zs;
    let mut series = Complex64::new(0.0, 0.0);
    for k in (1..12).rev() {
        series = (series + LAURENT[k]) * z2;
    }
    let mut p = z2.inv() + series;
    for _ in 0..HALVINGS {
        let p2 = p * p;
        p = (p2 + 1.0).powi(2) / (4.0 * p * (p2 - 1.0));
    }
    p
}

/// Damped target ℘ value for a parameter of the square.
pub fn w_target(u: f64, v: f64) -> Complex64 {
    damp(wp(Complex64::new(OMEGA * u, -OMEGA * v)))
}

fn damp(p: Complex64) -> Complex64 {
    let x = p.norm_sqr();
    let t = x / DAMP_X1;
    if t >= 1.0 || x == 0.0 {
        return p;
    }
    let b = (1.0 - t).powi(4);
    p * (x / (x + DAMP_CC * b)).powf(DAMP_GAM / 2.0)
}

/// H(τ) = (−q)^{3/2}/(τ²(τ⁴ + 1)²) and H'(τ)/H(τ).
fn h_and_logderiv(tau: Complex64) -> (Complex64, Complex64) {
    let (q, dq) = quotient(tau);
    let mq = -q;
    let t4p1 = tau.powi(4) + 1.0;
    let h = mq * mq.sqrt() / (tau * tau * t4p1 * t4p1);
    let ld = 1.5 * dq / q - 2.0 / tau - 8.0 * tau.powi(3) / t4p1;
    (h, ld)
}

static W_NORM: LazyLock<Complex64> = LazyLock::new(|| {
    let zm = (*KITE_A - *KITE_M).sqrt();
    zm.powi(3) * h_and_logderiv(*KITE_M).0
});

static H_CORNER: LazyLock<Complex64> = LazyLock::new(|| h_and_logderiv(Complex64::new(*KITE_A, 0.0)).0);

/// W(ζ) normalised so that W = 1 at the corner τ = m, with dW/dζ.
pub fn w_of_zeta(zeta: Complex64) -> (Complex64, Complex64) {
    let tau = tau_of_zeta(zeta);
    let (h, ld) = h_and_logderiv(tau);
    let z2 = zeta * zeta;
    let w = z2 * zeta * h / *W_NORM;
    let dw = (3.0 * z2 * h + z2 * zeta * h * ld * (-2.0 * zeta)) / *W_NORM;
    (w, dw)
}

/// Cube-root form g(ζ) = ζ·(H(τ)/H(a))^{1/3}, regular at ζ = 0, with g'.
fn cube_form(zeta: Complex64) -> (Complex64, Complex64) {
    let tau = tau_of_zeta(zeta);
    let (h, ld) = h_and_logderiv(tau);
    let r = (h / *H_CORNER).powf(1.0 / 3.0);
    let g = zeta * r;
    // g'/g = 1/ζ + (1/3)·H'/H·dτ/dζ
    let dg = r + g * ld * (-2.0 * zeta) / 3.0;
    (g, dg)
}

fn cube_target(wt: Complex64) -> Complex64 {
    let w3 = *H_CORNER / *W_NORM;
    let r = (wt / w3).powf(1.0 / 3.0);
    (0..3)
        .map(|k| r * Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * k as f64 / 3.0))
        .min_by(|x, y| x.arg().abs().total_cmp(&y.arg().abs()))
        .unwrap()
}

/// Newton solve of W(ζ) = wt from `guess`, with the residual form chosen by |wt|.
pub fn solve_w(wt: Complex64, guess: Complex64) -> Option<Complex64> {
    let mag = wt.norm();
    let small = mag < 0.05;
    let large = mag > 4.0;
    let rt = if small { cube_target(wt) } else { Complex64::new(0.0, 0.0) };
    let mut z = if small && (guess.norm() > 0.3 || !guess.re.is_finite()) { rt } else { guess };
    for _ in 0..200 {
        let (f, df) = if small {
            let (g, dg) = cube_form(z);
            (g - rt, dg)
        } else {
            let (w, dw) = w_of_zeta(z);
            if large {
                (w.inv() - wt.inv(), -dw / (w * w))
            } else {
                (w - wt, dw)
            }
        };
        if !f.re.is_finite() || !df.re.is_finite() || df.norm() == 0.0 {
            return None;
        }
        let mut step = f / df;
        let sn = step.norm();
        if sn > 0.05 {
            step *= 0.05 / sn;
        }
        z -= step;
        if step.norm() <= 1e-15 * z.norm().max(1e-3) {
            return Some(z);
        }
    }
    // Accept if the last iterates stagnated at rounding level.
    let (w, _) = w_of_zeta(z);
    let rel = if large { (w.inv() - wt.inv()).norm() * mag } else { (w - wt).norm() / mag.max(1e-300) };
    (rel < 1e-11 || (small && (cube_form(z).0 - rt).norm() < 1e-13)).then_some(z)
}

/// ζ values on a uniform (u, v) grid built by continuation.
pub struct ZetaTable {
    pub n: usize,
    pub zeta: Vec<Complex64>,
}

impl ZetaTable {
    pub fn build(n: usize) -> Result<Self> {
        assert!(n >= 3);
        let h = 1.0 / (n - 1) as f64;
        let mut zeta = vec![Complex64::new(f64::NAN, 0.0); n * n];
        let a = *KITE_A;
        for i in 0..n {
            zeta[i * n + i] = if i == 0 {
                zeta_anchor()
            } else if i == n - 1 {
                Complex64::new(0.0, 0.0)
            } else {
                let t = diagonal_tau(i as f64 * h);
                Complex64::new((a - t).sqrt(), 0.0)
            };
        }
        zeta[(n - 1) * n] = (a - *KITE_M).sqrt();
        zeta[n - 1] = zeta[(n - 1) * n].conj();
        for j in 1..n {
            for i in (0..j).rev() {
                if i == 0 && j == n - 1 {
                    continue;
                }
                let (u, v) = (i as f64 * h, j as f64 * h);
                let guess = zeta[(i + 1) * n + j];
                let z = solve_w(w_target(u, v), guess).ok_or(Error::Parameterization { u, v })?;
                zeta[i * n + j] = z;
                zeta[j * n + i] = z.conj();
            }
        }
        Ok(Self { n, zeta })
    }

    pub fn at(&self, i: usize, j: usize) -> Complex64 {
        self.zeta[i * self.n + j]
    }

    /// Bilinear interpolation of ζ.
    pub fn guess(&self, u: f64, v: f64) -> Complex64 {
        let s = (self.n - 1) as f64;
        let (x, y) = ((u * s).clamp(0.0, s), (v * s).clamp(0.0, s));
        let i = (x.floor() as usize).min(self.n - 2);
        let j = (y.floor() as usize).min(self.n - 2);
        let (fx, fy) = (x - i as f64, y - j as f64);
        self.at(i, j) * (1.0 - fx) * (1.0 - fy)
            + self.at(i + 1, j) * fx * (1.0 - fy)
            + self.at(i, j + 1) * (1.0 - fx) * fy
            + self.at(i + 1, j + 1) * fx * fy
    }
}

/// τ ∈ (0, a) on the diagonal u = v, by bisection (W is imaginary there).
fn diagonal_tau(u: f64) -> f64 {
    let target = w_target(u, u).im;
    let (mut lo, mut hi) = (0.0, *KITE_A);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let w = w_of_zeta(Complex64::new((*KITE_A - mid).sqrt(), 0.0)).0.im;
        if w > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-17 {
            break;
        }
    }
    0.5 * (lo + hi)
}

static TABLE: LazyLock<ZetaTable> =
    LazyLock::new(|| ZetaTable::build(TABLE_SIZE).expect("parameterization table must build"));

/// Shared continuation table.
pub fn table() -> &'static ZetaTable {
    &TABLE
}

/// ζ(u, v) for (u, v) ∈ [0,1]². The corners map to τ = 0, m, a, m̄.
pub fn zeta_of_uv(u: f64, v: f64) -> Result<Complex64> {
    if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
        return Err(Error::Parameterization { u, v });
    }
    if u == 0.0 && v == 0.0 {
        return Ok(zeta_anchor());
    }
    if u == 1.0 && v == 1.0 {
        return Ok(Complex64::new(0.0, 0.0));
    }
    if v > u {
        return zeta_of_uv(v, u).map(|z| z.conj());
    }
    if u == 1.0 && v == 0.0 {
        return Ok((*KITE_A - *KITE_M).sqrt());
    }
    let t = table();
    let guess = t.guess(u, v);
    let wt = w_target(u, v);
    let z = match solve_w(wt, guess) {
        Some(z) if (z - guess).norm() < 0.05 => z,
        _ => continuation(u, v)?,
    };
    Ok(if u == v { Complex64::new(z.re, 0.0) } else { z })
}

/// Fallback: march from the nearest table node to (u, v) in small steps.
fn continuation(u: f64, v: f64) -> Result<Complex64> {
    let t = table();
    let s = (t.n - 1) as f64;
    let (i, j) = ((u * s).round() as usize, (v * s).round() as usize);
    let (u0, v0) = (i as f64 / s, j as f64 / s);
    let mut z = t.at(i, j);
    let steps = 64;
    for k in 1..=steps {
        let f = k as f64 / steps as f64;
        let (uk, vk) = (u0 + (u - u0) * f, v0 + (v - v0) * f);
        z = solve_w(w_target(uk, vk), z).ok_or(Error::Parameterization { u, v })?;
    }
    Ok(z)
}

/// τ(u, v).
pub fn tau_of_uv(u: f64, v: f64) -> Result<Complex64> {
    Ok(tau_of_zeta(zeta_of_uv(u, v)?))
}
