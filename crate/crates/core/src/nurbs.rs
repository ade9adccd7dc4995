//! B-spline basis functions and the tensor-product NURBS surface kernel.

use crate::error::{Error, Result};
use crate::geom::{RigidTransform, Vec3};
use serde::{Deserialize, Serialize};

/// Clamped knot vector on [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnotVector {
    values: Vec<f64>,
    degree: usize,
}

impl KnotVector {
    pub fn new(values: Vec<f64>, degree: usize) -> Result<Self> {
        if values.len() < 2 * (degree + 1) {
            return Err(Error::InvalidKnots(format!(
                "{} knots is too few for degree {degree}",
                values.len()
            )));
        }
        if values.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidKnots("knots must be non-decreasing".into()));
        }
        let n = values.len();
        if values[..=degree].iter().any(|&k| k != 0.0) || values[n - degree - 1..].iter().any(|&k| k != 1.0) {
            return Err(Error::InvalidKnots("knots must be clamped on [0, 1]".into()));
        }
        let interior = &values[degree + 1..n - degree - 1];
        if interior.iter().any(|&k| k <= 0.0 || k >= 1.0) {
            return Err(Error::InvalidKnots("interior knots must lie strictly inside (0, 1)".into()));
        }
        Ok(Self { values, degree })
    }

    /// Clamped knots with equally spaced interior knots.
    pub fn clamped_uniform(n_ctrl: usize, degree: usize) -> Result<Self> {
        if n_ctrl < degree + 1 {
            return Err(Error::InvalidKnots(format!("{n_ctrl} control points is too few for degree {degree}")));
        }
        let spans = n_ctrl - degree;
        let mut v = vec![0.0; degree + 1];
        v.extend((1..spans).map(|k| k as f64 / spans as f64));
        v.extend(std::iter::repeat(1.0).take(degree + 1));
        Self::new(v, degree)
    }

    /// Clamped knots obtained by averaging `degree` consecutive parameters,
    /// sized so that the control count equals the parameter count.
    pub fn averaged(params: &[f64], degree: usize) -> Result<Self> {
        let n = params.len();
        if n < degree + 1 {
            return Err(Error::InvalidKnots(format!("{n} parameters is too few for degree {degree}")));
        }
        let mut v = vec![0.0; degree + 1];
        for j in 1..n - degree {
            let s: f64 = params[j..j + degree].iter().sum();
            v.push(s / degree as f64);
        }
        v.extend(std::iter::repeat(1.0).take(degree + 1));
        Self::new(v, degree)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_ctrl(&self) -> usize {
        self.values.len() - self.degree - 1
    }

    /// Distinct knot values and their multiplicities.
    pub fn distinct_with_multiplicities(&self) -> (Vec<f64>, Vec<usize>) {
        let mut vals: Vec<f64> = Vec::new();
        let mut mult: Vec<usize> = Vec::new();
        for &k in &self.values {
            match vals.last() {
                Some(&last) if last == k => *mult.last_mut().unwrap() += 1,
                _ => {
                    vals.push(k);
                    mult.push(1);
                }
            }
        }
        (vals, mult)
    }

    /// Knot span index containing `u`; the last non-empty span includes u = 1.
    pub fn find_span(&self, u: f64) -> usize {
        let p = self.degree;
        let n = self.n_ctrl() - 1;
        let u = u.clamp(0.0, 1.0);
        if u >= self.values[n + 1] {
            return n;
        }
        if u <= self.values[p] {
            return p;
        }
        let (mut lo, mut hi) = (p, n + 1);
        let mut mid = (lo + hi) / 2;
        while u < self.values[mid] || u >= self.values[mid + 1] {
            if u < self.values[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
            mid = (lo + hi) / 2;
        }
        mid
    }

    /// Non-zero basis functions N_{span-p..=span}(u).
    pub fn basis_funs(&self, span: usize, u: f64) -> Vec<f64> {
        let p = self.degree;
        let k = &self.values;
        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = u - k[span + 1 - j];
            right[j] = k[span + j] - u;
            let mut saved = 0.0;
            for r in 0..j {
                let tmp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            n[j] = saved;
        }
        n
    }

    /// Basis functions and derivatives up to `nd`: result[k][r] is the k-th
    /// derivative of N_{span-p+r}.
    pub fn ders_basis_funs(&self, span: usize, u: f64, nd: usize) -> Vec<Vec<f64>> {
        let p = self.degree;
        let k = &self.values;
        let mut ndu = vec![vec![0.0; p + 1]; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = u - k[span + 1 - j];
            right[j] = k[span + j] - u;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let tmp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            ndu[j][j] = saved;
        }
        let mut ders = vec![vec![0.0; p + 1]; nd + 1];
        for j in 0..=p {
            ders[0][j] = ndu[j][p];
        }
        let mut a = vec![vec![0.0; p + 1]; 2];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0][0] = 1.0;
            for kk in 1..=nd.min(p) {
                let mut d = 0.0;
                let rk = r as isize - kk as isize;
                let pk = p - kk;
                if r >= kk {
                    a[s2][0] = a[s1][0] / ndu[pk + 1][rk as usize];
                    d = a[s2][0] * ndu[rk as usize][pk];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if (r as isize - 1) <= pk as isize { kk - 1 } else { p - r };
                for j in j1..=j2 {
                    let idx = (rk + j as isize) as usize;
                    a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][idx];
                    d += a[s2][j] * ndu[idx][pk];
                }
                if r <= pk {
                    a[s2][kk] = -a[s1][kk - 1] / ndu[pk + 1][r];
                    d += a[s2][kk] * ndu[r][pk];
                }
                ders[kk][r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut fac = p as f64;
        for kk in 1..=nd.min(p) {
            for v in ders[kk].iter_mut() {
                *v *= fac;
            }
            fac *= (p - kk) as f64;
        }
        ders
    }

    /// Coefficients of the first and second derivatives at the start
    /// (`at_end = false`) or end of the curve, with respect to the parameter
    /// running inward from that end, in terms of the three nearest control
    /// points ordered from the boundary inward.
    pub fn end_stencils(&self, at_end: bool) -> ([f64; 2], [f64; 3]) {
        let p = self.degree as f64;
        let k: Vec<f64> = if at_end {
            self.values.iter().rev().map(|x| 1.0 - x).collect()
        } else {
            self.values.clone()
        };
        let d = self.degree;
        // Q_i = p (P_{i+1} − P_i) / (U_{i+p+1} − U_{i+1});
        // R_0 = (p − 1)(Q_1 − Q_0) / (U_{p+1} − U_2).
        let q0 = p / (k[d + 1] - k[1]);
        let q1 = p / (k[d + 2] - k[2]);
        let r = (p - 1.0) / (k[d + 1] - k[2]);
        let first = [-q0, q0];
        let second = [r * q0, -r * (q1 + q0), r * q1];
        (first, second)
    }
}

/// Cox–de Boor recursion for a single basis function, with the right-end
/// convention that the last basis function equals 1 at u = 1.
pub fn basis_value(knots: &KnotVector, i: usize, p: usize, u: f64) -> Result<f64> {
    let k = knots.values();
    let count = k.len().saturating_sub(p + 1);
    if i >= count {
        return Err(Error::Index { index: i, count });
    }
    Ok(cox_de_boor(k, i, p, u))
}

fn cox_de_boor(k: &[f64], i: usize, p: usize, u: f64) -> f64 {
    if p == 0 {
        let last = *k.last().unwrap();
        if k[i] <= u && u < k[i + 1] {
            return 1.0;
        }
        // The final non-empty interval is closed on the right.
        if u == last && k[i + 1] == last && k[i] < k[i + 1] {
            return 1.0;
        }
        return 0.0;
    }
    let mut val = 0.0;
    let d1 = k[i + p] - k[i];
    if d1 > 0.0 {
        val += (u - k[i]) / d1 * cox_de_boor(k, i, p - 1, u);
    }
    let d2 = k[i + p + 1] - k[i + 1];
    if d2 > 0.0 {
        val += (k[i + p + 1] - u) / d2 * cox_de_boor(k, i + 1, p - 1, u);
    }
    val
}

/// Pre-evaluated non-zero basis functions for a list of parameters.
#[derive(Clone, Debug)]
pub struct BasisTable {
    pub spans: Vec<usize>,
    pub values: Vec<Vec<f64>>,
    pub degree: usize,
}

impl BasisTable {
    pub fn new(knots: &KnotVector, params: &[f64]) -> Self {
        let spans: Vec<usize> = params.iter().map(|&u| knots.find_span(u)).collect();
        let values = params.iter().zip(&spans).map(|(&u, &s)| knots.basis_funs(s, u)).collect();
        Self { spans, values, degree: knots.degree() }
    }

    /// Dense collocation matrix (rows: parameters, columns: basis functions).
    pub fn dense(&self, n_ctrl: usize) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.spans.len(), n_ctrl);
        for (r, (&s, vals)) in self.spans.iter().zip(&self.values).enumerate() {
            for (k, v) in vals.iter().enumerate() {
                m[(r, s - self.degree + k)] = *v;
            }
        }
        m
    }
}

/// Surface derivatives up to second order at one parameter.
#[derive(Clone, Copy, Debug, Default)]
pub struct SurfaceDerivatives {
    pub s: Vec3,
    pub su: Vec3,
    pub sv: Vec3,
    pub suu: Vec3,
    pub suv: Vec3,
    pub svv: Vec3,
}

/// Tensor-product rational B-spline surface. Control points are stored
/// row-major: index `i * nv + j` with `i` running along u.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NurbsSurface {
    pub knots_u: KnotVector,
    pub knots_v: KnotVector,
    pub nu: usize,
    pub nv: usize,
    pub control_points: Vec<Vec3>,
    pub weights: Vec<f64>,
}

impl NurbsSurface {
    pub fn new(
        knots_u: KnotVector,
        knots_v: KnotVector,
        control_points: Vec<Vec3>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let nu = knots_u.n_ctrl();
        let nv = knots_v.n_ctrl();
        if control_points.len() != nu * nv || weights.len() != nu * nv {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} net expected, got {} points and {} weights",
                nu,
                nv,
                control_points.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::ShapeMismatch("weights must be positive".into()));
        }
        Ok(Self { knots_u, knots_v, nu, nv, control_points, weights })
    }

    /// Non-rational surface (all weights 1).
    pub fn polynomial(knots_u: KnotVector, knots_v: KnotVector, control_points: Vec<Vec3>) -> Result<Self> {
        let w = vec![1.0; control_points.len()];
        Self::new(knots_u, knots_v, control_points, w)
    }

    pub fn degree_u(&self) -> usize {
        self.knots_u.degree()
    }

    pub fn degree_v(&self) -> usize {
        self.knots_v.degree()
    }

    pub fn cp(&self, i: usize, j: usize) -> Vec3 {
        self.control_points[i * self.nv + j]
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.nv + j]
    }

    pub fn eval(&self, u: f64, v: f64) -> Vec3 {
        let (pu, pv) = (self.degree_u(), self.degree_v());
        let su = self.knots_u.find_span(u);
        let sv = self.knots_v.find_span(v);
        let nu = self.knots_u.basis_funs(su, u);
        let nv = self.knots_v.basis_funs(sv, v);
        let mut num = Vec3::zeros();
        let mut den = 0.0;
        for (a, bu) in nu.iter().enumerate() {
            let i = su - pu + a;
            for (b, bv) in nv.iter().enumerate() {
                let j = sv - pv + b;
                let w = self.weights[i * self.nv + j] * bu * bv;
                num += self.control_points[i * self.nv + j] * w;
                den += w;
            }
        }
        num / den
    }

    /// Analytic partial derivatives up to second order (quotient rule).
    pub fn derivatives(&self, u: f64, v: f64) -> SurfaceDerivatives {
        let (pu, pv) = (self.degree_u(), self.degree_v());
        let su = self.knots_u.find_span(u);
        let sv = self.knots_v.find_span(v);
        let du = self.knots_u.ders_basis_funs(su, u, 2);
        let dv = self.knots_v.ders_basis_funs(sv, v, 2);
        // a[k][l] = Σ N_i^(k) N_j^(l) w P, w[k][l] = Σ N_i^(k) N_j^(l) w
        let mut a = [[Vec3::zeros(); 3]; 3];
        let mut w = [[0.0; 3]; 3];
        for r in 0..=pu {
            let i = su - pu + r;
            for s in 0..=pv {
                let j = sv - pv + s;
                let wt = self.weights[i * self.nv + j];
                let p = self.control_points[i * self.nv + j] * wt;
                for k in 0..3 {
                    for l in 0..3 - k {
                        let b = du[k][r] * dv[l][s];
                        a[k][l] += p * b;
                        w[k][l] += wt * b;
                    }
                }
            }
        }
        let s = a[0][0] / w[0][0];
        let su_ = (a[1][0] - s * w[1][0]) / w[0][0];
        let sv_ = (a[0][1] - s * w[0][1]) / w[0][0];
        let suu = (a[2][0] - su_ * (2.0 * w[1][0]) - s * w[2][0]) / w[0][0];
        let svv = (a[0][2] - sv_ * (2.0 * w[0][1]) - s * w[0][2]) / w[0][0];
        let suv = (a[1][1] - su_ * w[0][1] - sv_ * w[1][0] - s * w[1][1]) / w[0][0];
        SurfaceDerivatives { s, su: su_, sv: sv_, suu, suv, svv }
    }

    /// Copy with every control point mapped by `t`.
    pub fn transformed(&self, t: &RigidTransform) -> NurbsSurface {
        let mut out = self.clone();
        for p in out.control_points.iter_mut() {
            *p = t.apply(p);
        }
        out
    }

    /// Copy with the roles of u and v exchanged.
    pub fn swapped_uv(&self) -> NurbsSurface {
        let mut cps = Vec::with_capacity(self.control_points.len());
        let mut ws = Vec::with_capacity(self.weights.len());
        for j in 0..self.nv {
            for i in 0..self.nu {
                cps.push(self.cp(i, j));
                ws.push(self.weight(i, j));
            }
        }
        NurbsSurface {
            knots_u: self.knots_v.clone(),
            knots_v: self.knots_u.clone(),
            nu: self.nv,
            nv: self.nu,
            control_points: cps,
            weights: ws,
        }
    }

    /// Boundary curve along `edge`, running in increasing parameter.
    pub fn boundary_curve(&self, edge: Edge) -> NurbsCurve {
        let (n, knots) = match edge {
            Edge::V0 | Edge::V1 => (self.nu, self.knots_u.clone()),
            Edge::U0 | Edge::U1 => (self.nv, self.knots_v.clone()),
        };
        let mut pts = Vec::with_capacity(n);
        let mut ws = Vec::with_capacity(n);
        for t in 0..n {
            let (i, j) = edge.index(t, 0, self.nu, self.nv);
            pts.push(self.cp(i, j));
            ws.push(self.weight(i, j));
        }
        NurbsCurve { knots, control_points: pts, weights: ws }
    }
}

/// The four boundary edges of a patch on [0, 1]²: `V0` is v = 0, `U1` is u = 1, etc.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Edge {
    V0,
    U1,
    U0,
    V1,
}

impl Edge {
    pub const ALL: [Edge; 4] = [Edge::V0, Edge::U1, Edge::U0, Edge::V1];

    pub fn name(self) -> &'static str {
        match self {
            Edge::V0 => "v0",
            Edge::U1 => "u1",
            Edge::U0 => "u0",
            Edge::V1 => "v1",
        }
    }

    /// Control index of station `t` along the edge, `k` rows inward.
    pub fn index(self, t: usize, k: usize, nu: usize, nv: usize) -> (usize, usize) {
        match self {
            Edge::V0 => (t, k),
            Edge::V1 => (t, nv - 1 - k),
            Edge::U0 => (k, t),
            Edge::U1 => (nu - 1 - k, t),
        }
    }

    /// Parameter point at `t` along the edge, offset `s` inward.
    pub fn uv(self, t: f64, s: f64) -> (f64, f64) {
        match self {
            Edge::V0 => (t, s),
            Edge::V1 => (t, 1.0 - s),
            Edge::U0 => (s, t),
            Edge::U1 => (1.0 - s, t),
        }
    }

    /// True when the edge lies at the far end (parameter 1) of its cross direction.
    pub fn at_end(self) -> bool {
        matches!(self, Edge::V1 | Edge::U1)
    }

    /// True when the edge runs along u (a v = const edge).
    pub fn runs_along_u(self) -> bool {
        matches!(self, Edge::V0 | Edge::V1)
    }

    /// Edge label after exchanging u and v.
    pub fn swapped(self) -> Edge {
        match self {
            Edge::V0 => Edge::U0,
            Edge::U0 => Edge::V0,
            Edge::V1 => Edge::U1,
            Edge::U1 => Edge::V1,
        }
    }
}

/// Rational B-spline curve on [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NurbsCurve {
    pub knots: KnotVector,
    pub control_points: Vec<Vec3>,
    pub weights: Vec<f64>,
}

impl NurbsCurve {
    pub fn eval(&self, t: f64) -> Vec3 {
        let p = self.knots.degree();
        let s = self.knots.find_span(t);
        let n = self.knots.basis_funs(s, t);
        let mut num = Vec3::zeros();
        let mut den = 0.0;
        for (a, b) in n.iter().enumerate() {
            let i = s - p + a;
            let w = self.weights[i] * b;
            num += self.control_points[i] * w;
            den += w;
        }
        num / den
    }

    pub fn transformed(&self, t: &RigidTransform) -> NurbsCurve {
        let mut out = self.clone();
        for p in out.control_points.iter_mut() {
            *p = t.apply(p);
        }
        out
    }
}

/// Parameters, knots and weights for fitting a `nu × nv` sample grid with as
/// many control points as samples.
#[derive(Clone, Debug)]
pub struct FitSetup {
    pub params_u: Vec<f64>,
    pub params_v: Vec<f64>,
    pub knots_u: KnotVector,
    pub knots_v: KnotVector,
    pub weights: Vec<f64>,
}

/// Setup for parameter lists already attached to a grid: knots by parameter
/// averaging, unit weights.
pub fn setup_for_params(params_u: &[f64], params_v: &[f64], degree: usize) -> Result<FitSetup> {
    for params in [params_u, params_v] {
        if params.len() < degree + 1 {
            return Err(Error::GridShape(format!(
                "{} samples per direction is too few for degree {degree}",
                params.len()
            )));
        }
        if params.windows(2).any(|w| !(w[1] > w[0])) || params[0] != 0.0 || *params.last().unwrap() != 1.0 {
            return Err(Error::GridShape("parameters must increase strictly from 0 to 1".into()));
        }
    }
    Ok(FitSetup {
        params_u: params_u.to_vec(),
        params_v: params_v.to_vec(),
        knots_u: KnotVector::averaged(params_u, degree)?,
        knots_v: KnotVector::averaged(params_v, degree)?,
        weights: vec![1.0; params_u.len() * params_v.len()],
    })
}

/// Uniform parameters i/(n−1) on an `nu × nv` grid, averaged clamped knots
/// (uniform interior spacing) and unit weights.
pub fn make_uniform_setup(nu: usize, nv: usize, degree: usize) -> Result<FitSetup> {
    if nu < 2 || nv < 2 {
        return Err(Error::GridShape(format!("{nu}x{nv} grid is too small")));
    }
    let pu = uniform_params(nu);
    let pv = uniform_params(nv);
    setup_for_params(&pu, &pv, degree)
}

pub fn uniform_params(n: usize) -> Vec<f64> {
    (0..n).map(|i| if i + 1 == n { 1.0 } else { i as f64 / (n - 1) as f64 }).collect()
}
