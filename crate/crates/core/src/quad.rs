//! Quadrature for integrands with algebraic endpoint singularities.
//!
//! An integrand behaving like `d^e` at an endpoint (`d` the distance to it,
//! `e > -1`) is integrated on a graded mesh: with `d = len * v^q` and
//! `q = ceil(1 + e) / (1 + e)` the pulled-back integrand in `v` is smooth, so
//! composite Gauss-Legendre panels in `v` converge fast. For `e = alpha - 1`
//! this is the classical grading exponent `1 / alpha`.
//!
//! Singularities sitting just outside the interval (at distance `offset`
//! beyond an endpoint) are handled by geometric refinement toward that end.
//!
//! Integrands receive `(x, dl, dr)` where `dl` and `dr` are the distances to
//! the left and right endpoint. They are computed without cancellation, so
//! `dr.powf(alpha - 1.0)` stays finite even when `x` rounds onto the endpoint.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Gauss-Legendre order used on every panel.
pub const PANEL_ORDER: usize = 8;

/// Gauss-Legendre nodes and weights mapped to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre<T> {
    pub nodes: Vec<T>,
    pub weights: Vec<T>,
}

impl<T: Real> GaussLegendre<T> {
    pub fn new(order: usize) -> Self {
        let (x, w) = if order == PANEL_ORDER {
            let cached = DEFAULT_GL.get_or_init(|| legendre_f64(PANEL_ORDER));
            (cached.0.clone(), cached.1.clone())
        } else {
            legendre_f64(order)
        };
        Self {
            nodes: x.into_iter().map(T::lit).collect(),
            weights: w.into_iter().map(T::lit).collect(),
        }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// Plain rule on `[a, b]`.
    pub fn integrate<F: Fn(T) -> T>(&self, f: F, a: T, b: T) -> T {
        let h = b - a;
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(a + h * x))
            .sum::<T>()
            * h
    }
}

static DEFAULT_GL: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();

fn legendre_f64(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut xs = vec![0.0; n];
    let mut ws = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 1 { z } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * p - pm1) / (z * z - 1.0);
            let dz = p / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        // map from [-1, 1] to [0, 1]
        xs[i] = 0.5 * (1.0 - z);
        xs[n - 1 - i] = 0.5 * (1.0 + z);
        ws[i] = 0.5 * w;
        ws[n - 1 - i] = 0.5 * w;
    }
    (xs, ws)
}

/// Gauss-Hermite rule for `E[h(Z)]`, `Z ~ N(0, 1)`: nodes `z_k`, weights summing to one.
pub fn gauss_hermite_normal(n: usize) -> (Vec<f64>, Vec<f64>) {
    // Physicists' Hermite roots by Newton iteration on the orthonormal recurrence.
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / (j as f64 + 1.0)).sqrt() * p2 - (j as f64 / (j as f64 + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() < 1e-15 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    // exp(-x^2) weights -> standard normal
    let scale = std::f64::consts::PI.sqrt();
    let nodes = x.iter().map(|&v| v * std::f64::consts::SQRT_2).collect();
    let weights = w.iter().map(|&v| v / scale).collect();
    (nodes, weights)
}

/// Grading exponent that makes `d^e * Jacobian` smooth in the mesh variable.
pub fn grading_exponent<T: Real>(e: T) -> T {
    let one = T::one();
    let p = one + e;
    if p <= T::zero() {
        return T::one();
    }
    (p.ceil() / p).max(one)
}

/// Endpoint behaviour of an integrand on `[start, start + len]`.
#[derive(Debug, Clone, Copy)]
pub struct Ends<T> {
    /// Algebraic exponent at the left end (0 for a regular end).
    pub left_exp: T,
    pub right_exp: T,
    /// Distance beyond the left end of a nearby singularity (0 for none).
    pub left_offset: T,
    pub right_offset: T,
    /// Overrides the automatic grading exponent at singular ends.
    pub grading: Option<T>,
}

impl<T: Real> Default for Ends<T> {
    fn default() -> Self {
        Self {
            left_exp: T::zero(),
            right_exp: T::zero(),
            left_offset: T::zero(),
            right_offset: T::zero(),
            grading: None,
        }
    }
}

impl<T: Real> Ends<T> {
    pub fn left(e: T) -> Self {
        Self {
            left_exp: e,
            ..Self::default()
        }
    }

    pub fn right(e: T) -> Self {
        Self {
            right_exp: e,
            ..Self::default()
        }
    }

    pub fn both(left: T, right: T) -> Self {
        Self {
            left_exp: left,
            right_exp: right,
            ..Self::default()
        }
    }

    pub fn with_right_offset(mut self, d: T) -> Self {
        self.right_offset = d;
        self
    }

    pub fn with_left_offset(mut self, d: T) -> Self {
        self.left_offset = d;
        self
    }

    pub fn with_grading(mut self, q: Option<T>) -> Self {
        self.grading = q;
        self
    }

    fn q(&self, e: T) -> T {
        if e == T::zero() {
            return T::one();
        }
        match self.grading {
            Some(q) if q > T::zero() => q,
            _ => grading_exponent(e),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Piece<T> {
    dl0: T,
    dr1: T,
    width: T,
    q_left: T,
    q_right: T,
}

/// Integrates `f(x, dl, dr)` over `[start, start + len]` with `panels` graded
/// panels per singular end.
pub fn integrate<T, F>(f: &F, start: T, len: T, ends: Ends<T>, panels: usize, gl: &GaussLegendre<T>) -> T
where
    T: Real,
    F: Fn(T, T, T) -> T,
{
    if len <= T::zero() {
        return T::zero();
    }
    let two = T::lit(2.0);
    let half = len / two;
    let quarter = len / T::lit(4.0);

    let mut left_marks = Vec::new();
    if ends.left_offset > T::zero() && ends.left_offset < quarter {
        let mut d = ends.left_offset;
        while d < half {
            left_marks.push(d);
            d *= two;
        }
    }
    let mut right_marks = Vec::new();
    if ends.right_offset > T::zero() && ends.right_offset < quarter {
        let mut d = ends.right_offset;
        while d < half {
            right_marks.push(d);
            d *= two;
        }
    }

    // boundaries as (distance from left, distance from right)
    let mut bounds: Vec<(T, T)> = vec![(T::zero(), len)];
    for &d in &left_marks {
        bounds.push((d, len - d));
    }
    for &d in right_marks.iter().rev() {
        bounds.push((len - d, d));
    }
    bounds.push((len, T::zero()));

    let n_pieces = bounds.len() - 1;
    let geo_panels = (panels / 4).max(1);
    let mut total = T::zero();
    for k in 0..n_pieces {
        let (dl0, _) = bounds[k];
        let (dl1, dr1) = bounds[k + 1];
        let piece = Piece {
            dl0,
            dr1,
            width: dl1 - dl0,
            q_left: if k == 0 { ends.q(ends.left_exp) } else { T::one() },
            q_right: if k + 1 == n_pieces {
                ends.q(ends.right_exp)
            } else {
                T::one()
            },
        };
        let np = if k == 0 || k + 1 == n_pieces { panels } else { geo_panels };
        total += piece_integral(f, start, piece, np, gl);
    }
    total
}

fn piece_integral<T, F>(f: &F, start: T, p: Piece<T>, panels: usize, gl: &GaussLegendre<T>) -> T
where
    T: Real,
    F: Fn(T, T, T) -> T,
{
    let one = T::one();
    let graded_left = p.q_left != one;
    let graded_right = p.q_right != one;
    match (graded_left, graded_right) {
        (true, true) => {
            let h = p.width / T::lit(2.0);
            let left = sweep(panels, gl, p.q_left, |off, jac| {
                let dl = p.dl0 + h * off;
                let dr = p.dr1 + (p.width - h * off);
                f(start + dl, dl, dr) * jac * h
            });
            let right = sweep(panels, gl, p.q_right, |off, jac| {
                let dr = p.dr1 + h * off;
                let dl = p.dl0 + (p.width - h * off);
                f(start + dl, dl, dr) * jac * h
            });
            left + right
        }
        (false, true) => sweep(panels, gl, p.q_right, |off, jac| {
            let dr = p.dr1 + p.width * off;
            let dl = p.dl0 + p.width * (one - off);
            f(start + dl, dl, dr) * jac * p.width
        }),
        _ => sweep(panels, gl, p.q_left, |off, jac| {
            let dl = p.dl0 + p.width * off;
            let dr = p.dr1 + p.width * (one - off);
            f(start + dl, dl, dr) * jac * p.width
        }),
    }
}

/// Sum over `panels` uniform panels of `v` in `[0, 1]` of `g(v^q, q v^(q-1))`.
fn sweep<T, G>(panels: usize, gl: &GaussLegendre<T>, q: T, g: G) -> T
where
    T: Real,
    G: Fn(T, T) -> T,
{
    let one = T::one();
    let n = T::idx(panels);
    let mut acc = T::zero();
    for j in 0..panels {
        let a = T::idx(j) / n;
        let mut panel = T::zero();
        for (&x, &w) in gl.nodes.iter().zip(&gl.weights) {
            let v = a + x / n;
            let (off, jac) = if q == one {
                (v, one)
            } else {
                (v.powf(q), q * v.powf(q - one))
            };
            panel += w * g(off, jac);
        }
        acc += panel / n;
    }
    acc
}

/// Absolute/relative tolerance pair.
#[derive(Debug, Clone, Copy)]
pub struct Tolerance<T> {
    pub abs: T,
    pub rel: T,
}

impl<T: Real> Tolerance<T> {
    pub fn new(abs: T, rel: T) -> Self {
        Self { abs, rel }
    }

    pub fn bound(&self, value: T) -> T {
        self.abs.max(self.rel * value.abs())
    }
}

impl<T: Real> Default for Tolerance<T> {
    fn default() -> Self {
        Self {
            abs: T::lit(1e-8).max(T::tol_floor()),
            rel: T::lit(1e-6).max(T::tol_floor()),
        }
    }
}

/// Panel doubling from `panels` until successive results agree to `tol`.
///
/// Returns the finer result; fails once `max_panels` is exceeded.
#[allow(clippy::too_many_arguments)]
pub fn integrate_adaptive<T, F>(
    f: &F,
    start: T,
    len: T,
    ends: Ends<T>,
    panels: usize,
    max_panels: usize,
    tol: Tolerance<T>,
    context: &str,
) -> Result<T>
where
    T: Real,
    F: Fn(T, T, T) -> T,
{
    let gl = GaussLegendre::new(PANEL_ORDER);
    let mut n = panels.max(1);
    let mut coarse = integrate(f, start, len, ends, n, &gl);
    loop {
        let fine = integrate(f, start, len, ends, 2 * n, &gl);
        let est = (fine - coarse).abs();
        if !fine.is_finite() {
            return Err(Error::Quadrature {
                context: context.to_string(),
                estimate: f64::INFINITY,
                tolerance: tol.bound(fine).f64(),
            });
        }
        if est <= tol.bound(fine) {
            return Ok(fine);
        }
        n *= 2;
        if 2 * n > max_panels {
            return Err(Error::Quadrature {
                context: context.to_string(),
                estimate: est.f64(),
                tolerance: tol.bound(fine).f64(),
            });
        }
        coarse = fine;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_integrates_polynomials_exactly() {
        let gl = GaussLegendre::<f64>::new(8);
        let s: f64 = gl.weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
        // degree 15 is exact for the 8-point rule
        let v = gl.integrate(|x| x.powi(15), 0.0, 1.0);
        assert!((v - 1.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn hermite_moments() {
        let (z, w) = gauss_hermite_normal(40);
        let m0: f64 = w.iter().sum();
        let m2: f64 = z.iter().zip(&w).map(|(z, w)| w * z * z).sum();
        let m4: f64 = z.iter().zip(&w).map(|(z, w)| w * z.powi(4)).sum();
        let c: f64 = z.iter().zip(&w).map(|(z, w)| w * z.cos()).sum();
        assert!((m0 - 1.0).abs() < 1e-13);
        assert!((m2 - 1.0).abs() < 1e-12);
        assert!((m4 - 3.0).abs() < 1e-11);
        assert!((c - (-0.5f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn grading_exponents() {
        assert_eq!(grading_exponent(-0.75f64), 4.0);
        assert_eq!(grading_exponent(0.0f64), 1.0);
        assert!((grading_exponent(0.25f64) - 1.6).abs() < 1e-15);
    }

    #[test]
    fn endpoint_singularities_are_integrated_to_machine_precision() {
        let gl = GaussLegendre::<f64>::new(PANEL_ORDER);
        // int_0^1 x^{-3/4} (1-x)^{-1/2} dx = B(1/4, 1/2)
        let f = |_x: f64, dl: f64, dr: f64| dl.powf(-0.75) * dr.powf(-0.5);
        let v = integrate(&f, 0.0, 1.0, Ends::both(-0.75, -0.5), 8, &gl);
        let exact = crate::scalar::beta_fn(0.25, 0.5);
        assert!((v - exact).abs() < 1e-12, "{v} vs {exact}");
    }

    #[test]
    fn nearby_singularity_is_resolved() {
        // int_0^1 (1 + d - x)^{-1/2} dx with d = 1e-9
        let d = 1e-9f64;
        let f = |_x: f64, _dl: f64, dr: f64| (d + dr).powf(-0.5);
        let exact = 2.0 * ((1.0 + d).sqrt() - d.sqrt());
        let gl = GaussLegendre::new(PANEL_ORDER);
        let v = integrate(&f, 0.0, 1.0, Ends::default().with_right_offset(d), 4, &gl);
        assert!((v - exact).abs() < 1e-10, "{v} vs {exact}");
    }

    #[test]
    fn adaptive_reports_failure() {
        let f = |_x: f64, _dl: f64, dr: f64| (dr + 1e-12).powf(-0.99);
        let r = integrate_adaptive(&f, 0.0, 1.0, Ends::default(), 1, 4, Tolerance::new(1e-14, 1e-14), "test");
        assert!(matches!(r, Err(Error::Quadrature { .. })));
    }
}
