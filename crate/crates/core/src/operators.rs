//! The adjoint operator `K*`, the kernels `phi` and `phi~`, the covariance
//! `R` and the variance curve of `N_t = int_0^t (K*_t sigma)_s dW_s`.
//!
//! ```text
//! (K*_t sigma)_u = int_u^t sigma_s dK/ds(s, u) ds
//! phi(r, s)      = int_0^{min(r,s)} dK/dr(r, v) dK/ds(s, v) dv
//! R(t, s)        = int_0^{min(t,s)} K(t, u) K(s, u) du
//! Var(N_t)       = int_0^t (K*_t sigma)_u^2 du
//!                = int_0^t int_0^t phi(r, u) sigma_r sigma_u dr du
//! ```
//!
//! All integrals go through [`crate::quad`] with the endpoint exponents
//! implied by the kernel's local regularity.

use std::cell::RefCell;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::Kernel;
use crate::quad::{self, Ends, Tolerance};
use crate::scalar::Real;
use crate::spline::MonotoneCubic;
use crate::table::{fmt_num, CsvTable};

/// A piecewise constant integrand on `[0, T]`.
pub trait StepIntegrand<T: Real>: Sync {
    fn value(&self, t: T) -> T;
    /// Interior jump points, increasing.
    fn breakpoints(&self) -> Vec<T>;
}

/// Deterministic volatility `sigma_t` with `0 < c0 <= sigma_t <= C0`.
#[derive(Debug, Clone, PartialEq)]
pub enum Volatility<T> {
    Constant(T),
    /// `values[k]` on `[knots[k], knots[k+1])`; `knots[0] = 0`, the last
    /// value extends to the horizon.
    Table { knots: Vec<T>, values: Vec<T> },
}

impl<T: Real> Volatility<T> {
    pub fn constant(v: T) -> Result<Self> {
        if !(v > T::zero() && v.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma = {v} must be positive and finite")));
        }
        Ok(Volatility::Constant(v))
    }

    pub fn table(knots: Vec<T>, values: Vec<T>) -> Result<Self> {
        if knots.is_empty() || knots.len() != values.len() {
            return Err(Error::InvalidParameter(format!(
                "sigma table needs matching non-empty knots/values ({} vs {})",
                knots.len(),
                values.len()
            )));
        }
        if knots[0] != T::zero() {
            return Err(Error::InvalidParameter(format!("sigma knots must start at 0, got {}", knots[0])));
        }
        if knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter("sigma knots must be strictly increasing".into()));
        }
        if let Some(v) = values.iter().find(|v| !(**v > T::zero() && v.is_finite())) {
            return Err(Error::InvalidParameter(format!("sigma value {v} must be positive and finite")));
        }
        Ok(Volatility::Table { knots, values })
    }

    /// `(c0, C0)`.
    pub fn bounds(&self) -> (T, T) {
        match self {
            Volatility::Constant(v) => (*v, *v),
            Volatility::Table { values, .. } => values
                .iter()
                .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v))),
        }
    }

    pub fn id(&self) -> String {
        match self {
            Volatility::Constant(v) => format!("constant({})", v.f64()),
            Volatility::Table { knots, values } => {
                let k: Vec<String> = knots.iter().map(|v| v.f64().to_string()).collect();
                let v: Vec<String> = values.iter().map(|v| v.f64().to_string()).collect();
                format!("table(knots=[{}],values=[{}])", k.join(","), v.join(","))
            }
        }
    }
}

impl<T: Real> StepIntegrand<T> for Volatility<T> {
    fn value(&self, t: T) -> T {
        match self {
            Volatility::Constant(v) => *v,
            Volatility::Table { knots, values } => {
                let k = knots.partition_point(|&x| x <= t);
                values[k.saturating_sub(1)]
            }
        }
    }

    fn breakpoints(&self) -> Vec<T> {
        match self {
            Volatility::Constant(_) => Vec::new(),
            Volatility::Table { knots, .. } => knots[1..].to_vec(),
        }
    }
}

/// `1_{[0, r]}`.
#[derive(Debug, Clone, Copy)]
pub struct Indicator<T> {
    pub r: T,
}

impl<T: Real> StepIntegrand<T> for Indicator<T> {
    fn value(&self, t: T) -> T {
        if t <= self.r {
            T::one()
        } else {
            T::zero()
        }
    }

    fn breakpoints(&self) -> Vec<T> {
        vec![self.r]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadKind {
    /// Graded mesh at the singular endpoint.
    GradedMesh,
    /// `sigma_u K(t, u)` plus the integral of `(sigma_s - sigma_u) dK/ds`,
    /// whose integrand vanishes near the singularity.
    SingularityExtraction,
}

#[derive(Debug, Clone, Copy)]
pub struct SingularQuadRule<T> {
    pub kind: QuadKind,
    /// Initial panels per singular end; doubled until converged.
    pub n_nodes: usize,
    /// Mesh grading; `None` picks `1 / alpha` style grading per endpoint.
    pub grading_exponent: Option<T>,
    pub tol: Tolerance<T>,
    pub max_panels: usize,
}

impl<T: Real> Default for SingularQuadRule<T> {
    fn default() -> Self {
        Self {
            kind: QuadKind::GradedMesh,
            n_nodes: 8,
            grading_exponent: None,
            tol: Tolerance::default(),
            max_panels: 4096,
        }
    }
}

impl<T: Real> SingularQuadRule<T> {
    pub fn with_tolerance(mut self, abs: T, rel: T) -> Self {
        self.tol = Tolerance::new(abs.max(T::tol_floor()), rel.max(T::tol_floor()));
        self
    }

    pub fn extraction() -> Self {
        Self {
            kind: QuadKind::SingularityExtraction,
            ..Self::default()
        }
    }

    fn integrate<F: Fn(T, T, T) -> T>(&self, f: &F, start: T, len: T, ends: Ends<T>, context: &str) -> Result<T> {
        quad::integrate_adaptive(
            f,
            start,
            len,
            ends.with_grading(self.grading_exponent),
            self.n_nodes,
            self.max_panels,
            self.tol,
            context,
        )
    }
}

/// Consecutive pieces `[a, b]` of `[lo, hi]` cut at the given points.
fn pieces<T: Real>(lo: T, hi: T, cuts: &[T]) -> Vec<(T, T)> {
    let mut out = Vec::new();
    let mut a = lo;
    for &c in cuts {
        if c > a && c < hi {
            out.push((a, c));
            a = c;
        }
    }
    out.push((a, hi));
    out
}

/// Keeps the first error raised inside a quadrature closure.
struct ErrSlot(RefCell<Option<Error>>);

impl ErrSlot {
    fn new() -> Self {
        Self(RefCell::new(None))
    }

    fn catch<T: Real>(&self, r: Result<T>) -> T {
        match r {
            Ok(v) => v,
            Err(e) => {
                self.0.borrow_mut().get_or_insert(e);
                T::nan()
            }
        }
    }

    fn check<T>(self, v: Result<T>) -> Result<T> {
        match self.0.into_inner() {
            Some(e) => Err(e),
            None => v,
        }
    }
}

fn check_time<T: Real, K: Kernel<T> + ?Sized>(kernel: &K, name: &str, v: T) -> Result<()> {
    let top = kernel.horizon() * (T::one() + T::lit(16.0) * T::epsilon());
    if !v.is_finite() || v < T::zero() || v > top {
        return Err(Error::Domain(format!("{name} = {v} outside [0, {}]", kernel.horizon())));
    }
    Ok(())
}

/// `(K*_t sigma)_u` for `0 <= u < t <= T`.
///
/// Infinite at `u = 0` for kernels with `beta > 0`, like `K(t, 0)`.
pub fn kstar_apply<T, K, S>(kernel: &K, sigma: &S, t: T, u: T, rule: &SingularQuadRule<T>) -> Result<T>
where
    T: Real,
    K: Kernel<T> + ?Sized,
    S: StepIntegrand<T> + ?Sized,
{
    check_time(kernel, "t", t)?;
    check_time(kernel, "u", u)?;
    if u >= t {
        return Err(Error::Domain(format!("K* needs u < t, got u = {u}, t = {t}")));
    }
    if u == T::zero() && kernel.beta() > T::zero() {
        return Ok(sigma.value(T::zero()) * T::infinity());
    }
    let alpha = kernel.local_alpha(u);
    let sigma_u = sigma.value(u);
    let mut total = match rule.kind {
        QuadKind::GradedMesh => T::zero(),
        QuadKind::SingularityExtraction => sigma_u * kernel.eval_gap(t, u, t - u),
    };
    for (k, (a, b)) in pieces(u, t, &sigma.breakpoints()).into_iter().enumerate() {
        let mid = (a + b) / T::lit(2.0);
        let mut weight = sigma.value(mid);
        if rule.kind == QuadKind::SingularityExtraction {
            weight -= sigma_u;
        }
        if weight == T::zero() {
            continue;
        }
        let offset = a - u;
        let f = |s: T, dl: T, _dr: T| kernel.dt_gap(s, u, offset + dl);
        let ends = if k == 0 {
            Ends::left(alpha - T::one())
        } else {
            Ends::default().with_left_offset(offset)
        };
        total += weight * rule.integrate(&f, a, b - a, ends, "K* integral")?;
    }
    Ok(total)
}

fn phi_generic<T, K>(kernel: &K, r: T, s: T, absolute: bool, rule: &SingularQuadRule<T>) -> Result<T>
where
    T: Real,
    K: Kernel<T> + ?Sized,
{
    check_time(kernel, "r", r)?;
    check_time(kernel, "s", s)?;
    if r <= T::zero() || s <= T::zero() {
        return Err(Error::Domain(format!("phi needs r, s > 0, got ({r}, {s})")));
    }
    if r == s {
        return Err(Error::Domain(format!("phi is not defined on the diagonal r = s = {r}")));
    }
    let (lo, hi) = if r < s { (r, s) } else { (s, r) };
    let offset = hi - lo;
    let f = |v: T, _dl: T, dr: T| {
        let a = kernel.dt_gap(hi, v, offset + dr);
        let b = kernel.dt_gap(lo, v, dr);
        if absolute {
            a.abs() * b.abs()
        } else {
            a * b
        }
    };
    let ends = Ends::both(-T::lit(2.0) * kernel.beta(), kernel.local_alpha(lo) - T::one()).with_right_offset(offset);
    rule.integrate(&f, T::zero(), lo, ends, "phi integral")
}

/// `phi(r, s)` for `0 < r, s <= T`, `r != s`.
pub fn phi_eval<T: Real, K: Kernel<T> + ?Sized>(kernel: &K, r: T, s: T, rule: &SingularQuadRule<T>) -> Result<T> {
    phi_generic(kernel, r, s, false, rule)
}

/// `phi~(r, s)`: as [`phi_eval`] with absolute values of both factors.
pub fn phi_tilde_eval<T: Real, K: Kernel<T> + ?Sized>(kernel: &K, r: T, s: T, rule: &SingularQuadRule<T>) -> Result<T> {
    phi_generic(kernel, r, s, true, rule)
}

/// `R(t, s) = int_0^{min(t,s)} K(t, u) K(s, u) du`.
pub fn covariance_r<T: Real, K: Kernel<T> + ?Sized>(kernel: &K, t: T, s: T, rule: &SingularQuadRule<T>) -> Result<T> {
    check_time(kernel, "t", t)?;
    check_time(kernel, "s", s)?;
    let (lo, hi) = if t <= s { (t, s) } else { (s, t) };
    if lo == T::zero() {
        return Ok(T::zero());
    }
    let offset = hi - lo;
    let a_lo = kernel.local_alpha(lo);
    let right = if offset == T::zero() { T::lit(2.0) * a_lo } else { a_lo };
    let f = |u: T, _dl: T, dr: T| kernel.eval_gap(hi, u, offset + dr) * kernel.eval_gap(lo, u, dr);
    let ends = Ends::both(-T::lit(2.0) * kernel.beta(), right).with_right_offset(offset);
    rule.integrate(&f, T::zero(), lo, ends, "covariance integral")
}

/// `Var(N_t)` as the squared `L^2` norm of `K*_t sigma`.
pub fn variance_l2<T, K, S>(kernel: &K, sigma: &S, t: T, rule: &SingularQuadRule<T>) -> Result<T>
where
    T: Real,
    K: Kernel<T> + ?Sized,
    S: StepIntegrand<T> + ?Sized,
{
    check_time(kernel, "t", t)?;
    if t == T::zero() {
        return Ok(T::zero());
    }
    let two = T::lit(2.0);
    let alpha = kernel.local_alpha(t);
    let parts = pieces(T::zero(), t, &sigma.breakpoints());
    let last = parts.len() - 1;
    let mut total = T::zero();
    for (k, (a, b)) in parts.into_iter().enumerate() {
        let slot = ErrSlot::new();
        let f = |u: T, _dl: T, _dr: T| {
            let v = slot.catch(kstar_apply(kernel, sigma, t, u, rule));
            v * v
        };
        let left = if k == 0 { -two * kernel.beta() } else { T::zero() };
        let ends = if k == last {
            Ends::both(left, two * alpha)
        } else {
            Ends::left(left).with_right_offset(t - b)
        };
        let v = rule.integrate(&f, a, b - a, ends, "variance (L2 route)");
        total += slot.check(v)?;
    }
    Ok(total)
}

/// `d/dr Var(N_r) = 2 sigma_r int_0^r phi(r, u) sigma_u du`, computed
/// directly from `phi`.
pub fn variance_rate_direct<T, K, S>(kernel: &K, sigma: &S, r: T, rule: &SingularQuadRule<T>) -> Result<T>
where
    T: Real,
    K: Kernel<T> + ?Sized,
    S: StepIntegrand<T> + ?Sized,
{
    check_time(kernel, "r", r)?;
    if r == T::zero() {
        return Ok(T::zero());
    }
    let two = T::lit(2.0);
    let alpha = kernel.local_alpha(r);
    let parts = pieces(T::zero(), r, &sigma.breakpoints());
    let last = parts.len() - 1;
    let mut total = T::zero();
    for (k, (a, b)) in parts.into_iter().enumerate() {
        let w = sigma.value((a + b) / two);
        let slot = ErrSlot::new();
        let f = |u: T, _dl: T, _dr: T| slot.catch(phi_eval(kernel, r, u, rule));
        let left = if k == 0 { alpha - kernel.beta() } else { T::zero() };
        let ends = if k == last {
            Ends::both(left, two * alpha - T::one())
        } else {
            Ends::left(left).with_right_offset(r - b)
        };
        let v = rule.integrate(&f, a, b - a, ends, "variance rate (phi route)");
        total += w * slot.check(v)?;
    }
    Ok(two * sigma.value(r) * total)
}

/// `Var(N_t)` at each grid time as the double `phi` integral, accumulated
/// interval by interval from `variance_rate_direct`.
pub fn variance_double_integral<T, K, S>(kernel: &K, sigma: &S, grid: &[T], rule: &SingularQuadRule<T>) -> Result<Vec<T>>
where
    T: Real,
    K: Kernel<T> + ?Sized,
    S: StepIntegrand<T> + ?Sized,
{
    check_grid(kernel, grid)?;
    let alpha = kernel.local_alpha(T::zero());
    let mut cuts: Vec<T> = sigma.breakpoints();
    cuts.extend_from_slice(grid);
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut out = Vec::with_capacity(grid.len());
    let mut acc = T::zero();
    let mut lo = T::zero();
    for &g in grid {
        for (a, b) in pieces(lo, g, &cuts) {
            if b <= a {
                continue;
            }
            let slot = ErrSlot::new();
            let f = |x: T, _dl: T, _dr: T| slot.catch(variance_rate_direct(kernel, sigma, x, rule));
            let ends = if a == T::zero() {
                Ends::left(T::lit(2.0) * alpha)
            } else {
                Ends::default()
            };
            let gl = quad::GaussLegendre::new(quad::PANEL_ORDER);
            let v = quad::integrate(&f, a, b - a, ends.with_grading(rule.grading_exponent), 2, &gl);
            acc += slot.check(Ok(v))?;
        }
        lo = g;
        out.push(acc);
    }
    Ok(out)
}

fn check_grid<T: Real, K: Kernel<T> + ?Sized>(kernel: &K, grid: &[T]) -> Result<()> {
    if grid.len() < 2 {
        return Err(Error::InvalidParameter("time grid needs at least two points".into()));
    }
    for &t in grid {
        check_time(kernel, "grid time", t)?;
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("time grid must be strictly increasing".into()));
    }
    Ok(())
}

/// Tabulated `Var(N_t)` and its rate on a grid starting at 0.
#[derive(Debug, Clone)]
pub struct VarianceCurve<T> {
    pub grid: Vec<T>,
    pub var: Vec<T>,
    pub rate: Vec<T>,
    spline: MonotoneCubic<T>,
}

/// Largest decrease of the computed variance treated as quadrature noise.
pub const MONOTONICITY_TOL: f64 = 1e-9;

/// `Var(N_t)` on `grid` (the `L^2` route), with the rate from a monotone
/// cubic fit.
///
/// Decreases up to [`MONOTONICITY_TOL`] are clamped; larger ones are errors,
/// as is a non-positive rate at an interior grid time.
pub fn variance_curve<T, K>(kernel: &K, sigma: &Volatility<T>, grid: &[T], rule: &SingularQuadRule<T>) -> Result<VarianceCurve<T>>
where
    T: Real,
    K: Kernel<T> + ?Sized,
{
    check_grid(kernel, grid)?;
    if grid[0] != T::zero() {
        return Err(Error::InvalidParameter(format!("variance grid must start at 0, got {}", grid[0])));
    }
    let raw: Vec<Result<T>> = grid.par_iter().map(|&t| variance_l2(kernel, sigma, t, rule)).collect();
    let mut var = Vec::with_capacity(grid.len());
    for (i, v) in raw.into_iter().enumerate() {
        let mut v = v?;
        if i > 0 {
            let prev = var[i - 1];
            if v < prev {
                let drop = prev - v;
                if drop > T::lit(MONOTONICITY_TOL) {
                    return Err(Error::Monotonicity {
                        t_prev: grid[i - 1].f64(),
                        t: grid[i].f64(),
                        drop: drop.f64(),
                    });
                }
                v = prev;
            }
        }
        var.push(v);
    }
    VarianceCurve::from_values(grid.to_vec(), var)
}

impl<T: Real> VarianceCurve<T> {
    /// Builds a curve from tabulated values (first value must be 0).
    pub fn from_values(grid: Vec<T>, var: Vec<T>) -> Result<Self> {
        if grid.len() < 3 || grid.len() != var.len() {
            return Err(Error::InvalidParameter("variance curve needs >= 3 matching points".into()));
        }
        if var[0] != T::zero() {
            return Err(Error::InvalidParameter(format!("Var(N_0) must be 0, got {}", var[0])));
        }
        let spline = MonotoneCubic::new(grid.clone(), var.clone());
        let rate = spline.knot_slopes().to_vec();
        let n = grid.len();
        for i in 1..n - 1 {
            if !(rate[i] > T::zero()) {
                return Err(Error::Positivity {
                    t: grid[i].f64(),
                    rate: rate[i].f64(),
                });
            }
        }
        Ok(Self { grid, var, rate, spline })
    }

    pub fn horizon(&self) -> T {
        self.grid[self.grid.len() - 1]
    }

    pub fn var_at(&self, t: T) -> T {
        self.spline.eval(t).max(T::zero())
    }

    pub fn rate_at(&self, t: T) -> T {
        self.spline.deriv(t)
    }

    pub fn sup_var(&self) -> T {
        self.var.iter().copied().fold(T::zero(), T::max)
    }

    /// `max_i |int_0^{t_i} rate - var_i| / var_n`.
    pub fn reconstruction_error(&self) -> T {
        let top = self.sup_var();
        self.spline
            .integrated_derivative()
            .iter()
            .zip(&self.var)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
            / top
    }

    pub fn to_csv(&self, meta: &[String]) -> String {
        let mut table = CsvTable::new(&["t", "var", "rate"]);
        for m in meta {
            table.meta(m);
        }
        for i in 0..self.grid.len() {
            table.row(vec![fmt_num(self.grid[i]), fmt_num(self.var[i]), fmt_num(self.rate[i])]);
        }
        table.render()
    }
}

#[derive(Debug, Clone)]
pub struct TransferReport<T> {
    pub r: T,
    /// `(t, (K*_T 1_{[0,r]})_t, K(r, t))`.
    pub points: Vec<(T, T, T)>,
    pub max_abs_dev: T,
    /// Largest deviation relative to its allowance `max(abs, rel |K(r, t)|)`.
    pub max_scaled_dev: T,
    pub pass: bool,
}

/// Compares `(K*_T 1_{[0,r]})_t` with `K(r, t)` on `grid`.
///
/// Points where both sides are infinite (`t = 0` when `beta > 0`) are
/// skipped. `pass` means every deviation is within the rule's tolerance.
pub fn transfer_identity_check<T, K>(kernel: &K, r: T, grid: &[T], rule: &SingularQuadRule<T>) -> Result<TransferReport<T>>
where
    T: Real,
    K: Kernel<T> + ?Sized,
{
    check_time(kernel, "r", r)?;
    if r <= T::zero() {
        return Err(Error::Domain(format!("transfer check needs r > 0, got {r}")));
    }
    let horizon = kernel.horizon();
    let ind = Indicator { r };
    let mut points = Vec::with_capacity(grid.len());
    let mut max_abs = T::zero();
    let mut max_scaled = T::zero();
    for &t in grid {
        check_time(kernel, "grid time", t)?;
        if t == T::zero() && kernel.beta() > T::zero() {
            continue;
        }
        let (lhs, rhs) = if t >= r || t >= horizon {
            (
                if t < horizon {
                    kstar_apply(kernel, &ind, horizon, t, rule)?
                } else {
                    T::zero()
                },
                T::zero(),
            )
        } else {
            (kstar_apply(kernel, &ind, horizon, t, rule)?, kernel.eval_gap(r, t, r - t))
        };
        let dev = (lhs - rhs).abs();
        max_abs = max_abs.max(dev);
        max_scaled = max_scaled.max(dev / rule.tol.bound(rhs));
        points.push((t, lhs, rhs));
    }
    Ok(TransferReport {
        r,
        points,
        max_abs_dev: max_abs,
        max_scaled_dev: max_scaled,
        pass: max_scaled <= T::one(),
    })
}
