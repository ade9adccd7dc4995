//! Adaptive Gauss–Kronrod (7/15) quadrature of vector-valued analytic
//! functions along straight segments of the complex plane.

use crate::error::{Error, Result};
use num_complex::Complex64;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

pub type CVec3 = [Complex64; 3];

/// Quadrature settings: absolute error target per component and recursion cap.
#[derive(Clone, Copy, Debug)]
pub struct QuadSettings {
    pub tol: f64,
    pub max_depth: usize,
}

impl Default for QuadSettings {
    fn default() -> Self {
        Self { tol: 1e-13, max_depth: 40 }
    }
}

/// Integral estimate with its error estimate (max over components).
#[derive(Clone, Copy, Debug)]
pub struct QuadResult {
    pub value: CVec3,
    pub error: f64,
    pub evaluations: usize,
}

fn zero() -> CVec3 {
    [Complex64::new(0.0, 0.0); 3]
}

/// One 15-point Kronrod panel on [a, b] with the embedded 7-point Gauss error estimate.
pub fn gk15<F: Fn(Complex64) -> CVec3>(f: &F, a: Complex64, b: Complex64) -> (CVec3, f64) {
    let c = (a + b) * 0.5;
    let h = (b - a) * 0.5;
    let mut k = zero();
    let mut g = zero();
    for (idx, (&x, &w)) in XGK.iter().zip(WGK.iter()).enumerate() {
        let pts: &[Complex64] = if x == 0.0 { &[c] } else { &[c - h * x, c + h * x] };
        for &z in pts {
            let v = f(z);
            for m in 0..3 {
                k[m] += v[m] * w;
                if idx % 2 == 1 {
                    g[m] += v[m] * WG[idx / 2];
                }
            }
        }
    }
    let mut err: f64 = 0.0;
    for m in 0..3 {
        k[m] *= h;
        g[m] *= h;
        err = err.max((k[m] - g[m]).norm());
    }
    (k, err)
}

/// Adaptive integral of `f` along the straight segment from `a` to `b`.
pub fn integrate<F: Fn(Complex64) -> CVec3>(f: &F, a: Complex64, b: Complex64, s: QuadSettings) -> Result<QuadResult> {
    if a == b {
        return Ok(QuadResult { value: zero(), error: 0.0, evaluations: 0 });
    }
    let mut out = QuadResult { value: zero(), error: 0.0, evaluations: 0 };
    recurse(f, a, b, s.tol, 0, s.max_depth, &mut out)?;
    Ok(out)
}

fn recurse<F: Fn(Complex64) -> CVec3>(
    f: &F,
    a: Complex64,
    b: Complex64,
    tol: f64,
    depth: usize,
    max_depth: usize,
    out: &mut QuadResult,
) -> Result<()> {
    let (v, err) = gk15(f, a, b);
    out.evaluations += 15;
    if !err.is_finite() || v.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::Quadrature(format!("non-finite integrand on [{a}, {b}]")));
    }
    if err <= tol {
        for m in 0..3 {
            out.value[m] += v[m];
        }
        out.error += err;
        return Ok(());
    }
    if depth >= max_depth {
        return Err(Error::Quadrature(format!("error {err:e} above {tol:e} at depth {depth}")));
    }
    let mid = (a + b) * 0.5;
    recurse(f, a, mid, tol * 0.5, depth + 1, max_depth, out)?;
    recurse(f, mid, b, tol * 0.5, depth + 1, max_depth, out)
}
