//! The terminal value problem
//!
//! ```text
//! du/dt + 1/2 rho_t^2 d2u/dx2 + f(t, x, u, -sigma_t du/dx) = 0,   u(T, x) = g(x)
//! ```
//!
//! with `rho_t^2 = d/dt Var(N_t)`. Its mild form, with `V_t = Var(N_t)` and
//! `P_v` the heat semigroup `P_v h(x) = E[h(x + sqrt(v) Z)]`, is
//!
//! ```text
//! u(t) = P_{V_T - V_t} g + int_t^T P_{V_s - V_t} f(s, ., u(s), -sigma_s u_x(s)) ds
//! ```
//!
//! solved by Picard iteration ([`solve_semilinear_picard`]) and cross-checked
//! by a theta scheme ([`solve_semilinear_fd`]).

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::expr::{Expr, Var, Vars};
use crate::operators::{StepIntegrand, VarianceCurve, Volatility};
use crate::scalar::Real;
use crate::table::{fmt_num, CsvTable};

/// Uniform grid on `[-L, L]` with `n + 1` points.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceGrid<T> {
    pub half_width: T,
    pub n: usize,
}

impl<T: Real> SpaceGrid<T> {
    pub fn new(half_width: T, n: usize) -> Result<Self> {
        if !(half_width > T::zero() && half_width.is_finite()) || n < 4 {
            return Err(Error::InvalidParameter(format!(
                "space grid needs L > 0 and n >= 4, got L = {half_width}, n = {n}"
            )));
        }
        Ok(Self { half_width, n })
    }

    /// `L = 8 sqrt(sup Var) + radius`.
    pub fn for_curve(curve: &VarianceCurve<T>, radius: T, n: usize) -> Result<Self> {
        Self::new(T::lit(8.0) * curve.sup_var().sqrt() + radius, n)
    }

    pub fn dx(&self) -> T {
        T::lit(2.0) * self.half_width / T::idx(self.n)
    }

    pub fn len(&self) -> usize {
        self.n + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn point(&self, j: usize) -> T {
        -self.half_width + self.dx() * T::idx(j)
    }

    pub fn points(&self) -> Vec<T> {
        (0..=self.n).map(|j| self.point(j)).collect()
    }
}

type DriverFn<T> = dyn Fn(T, T, T, T) -> T + Send + Sync;
type TerminalFn<T> = dyn Fn(T) -> T + Send + Sync;

/// Driver `f(t, x, y, z)` with its declared Lipschitz constant in `(y, z)`.
#[derive(Clone)]
pub struct Driver<T> {
    f: Arc<DriverFn<T>>,
    pub lipschitz_yz: T,
    pub growth_degree: u32,
    pub id: String,
}

impl<T> fmt::Debug for Driver<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Driver").field("id", &self.id).finish()
    }
}

impl<T: Real> Driver<T> {
    pub fn new<F>(f: F, lipschitz_yz: T, growth_degree: u32, id: impl Into<String>) -> Self
    where
        F: Fn(T, T, T, T) -> T + Send + Sync + 'static,
    {
        Self {
            f: Arc::new(f),
            lipschitz_yz,
            growth_degree,
            id: id.into(),
        }
    }

    pub fn zero() -> Self {
        Self::new(|_, _, _, _| T::zero(), T::zero(), 0, "0")
    }

    pub fn constant(c: T) -> Self {
        Self::new(move |_, _, _, _| c, T::zero(), 0, format!("{}", c.f64()))
    }

    /// `f = k y`.
    pub fn linear_y(k: T) -> Self {
        Self::new(move |_, _, y, _| k * y, k.abs(), 1, format!("{}*y", k.f64()))
    }

    pub fn from_expr(expr: Expr, lipschitz_yz: T) -> Self {
        let id = expr.canonical();
        let degree = if expr.uses(Var::X) || expr.uses(Var::Y) || expr.uses(Var::Z) { 1 } else { 0 };
        Self::new(move |t, x, y, z| expr.eval(&Vars::new(t, x, y, z)), lipschitz_yz, degree, id)
    }

    #[inline]
    pub fn eval(&self, t: T, x: T, y: T, z: T) -> T {
        (self.f)(t, x, y, z)
    }

    /// Largest difference quotient in `y` and `z` over a lattice of the box
    /// `[t0, T] x [-L, L] x [-b, b]^2`; errors if it exceeds the declared
    /// constant by more than 1e-6 relative.
    pub fn check_lipschitz(&self, t0: T, horizon: T, half_width: T, b: T) -> Result<T> {
        let m = 9;
        let h = T::lit(1e-4) * b.max(T::one());
        let lin = |lo: T, hi: T, k: usize| lo + (hi - lo) * T::idx(k) / T::idx(m - 1);
        let mut est = T::zero();
        for it in 0..m {
            let t = lin(t0, horizon, it);
            for ix in 0..m {
                let x = lin(-half_width, half_width, ix);
                for iy in 0..m {
                    let y = lin(-b, b, iy);
                    for iz in 0..m {
                        let z = lin(-b, b, iz);
                        let dy = (self.eval(t, x, y + h, z) - self.eval(t, x, y - h, z)).abs();
                        let dz = (self.eval(t, x, y, z + h) - self.eval(t, x, y, z - h)).abs();
                        est = est.max((dy + dz) / (h + h));
                    }
                }
            }
        }
        if !(est <= self.lipschitz_yz * (T::one() + T::lit(1e-6)) + T::lit(1e-9)) {
            return Err(Error::Precondition(format!(
                "driver `{}` has numeric Lipschitz estimate {} above the declared {}",
                self.id, est, self.lipschitz_yz
            )));
        }
        Ok(est)
    }
}

/// `|g(x)| <= c exp(lambda x^2)`; `lambda` must stay below `1 / (4 sup Var)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthBudget<T> {
    pub c: T,
    pub lambda: T,
}

impl<T: Real> GrowthBudget<T> {
    pub fn check(&self, curve: &VarianceCurve<T>) -> Result<()> {
        let bound = T::lit(0.25) / curve.sup_var();
        if !(self.c > T::zero()) || !(self.lambda < bound) || self.lambda < T::zero() {
            return Err(Error::Growth {
                context: format!("growth budget c = {}, lambda = {}", self.c, self.lambda),
                estimate: self.lambda.f64(),
                bound: bound.f64(),
            });
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct TerminalCondition<T> {
    g: Arc<TerminalFn<T>>,
    pub growth: GrowthBudget<T>,
    pub id: String,
}

impl<T> fmt::Debug for TerminalCondition<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TerminalCondition").field("id", &self.id).finish()
    }
}

impl<T: Real> TerminalCondition<T> {
    pub fn new<G>(g: G, growth: GrowthBudget<T>, id: impl Into<String>) -> Self
    where
        G: Fn(T) -> T + Send + Sync + 'static,
    {
        Self {
            g: Arc::new(g),
            growth,
            id: id.into(),
        }
    }

    pub fn from_expr(expr: Expr, growth: GrowthBudget<T>) -> Self {
        let id = expr.canonical();
        Self::new(move |x| expr.eval(&Vars::new(T::zero(), x, T::zero(), T::zero())), growth, id)
    }

    #[inline]
    pub fn eval(&self, x: T) -> T {
        (self.g)(x)
    }

    /// Checks the growth budget at every grid point and against the curve.
    pub fn check_growth(&self, xgrid: &SpaceGrid<T>, curve: &VarianceCurve<T>) -> Result<()> {
        self.growth.check(curve)?;
        for x in xgrid.points() {
            let v = self.eval(x).abs();
            let cap = self.growth.c * (self.growth.lambda * x * x).exp();
            if !(v <= cap) {
                return Err(Error::Growth {
                    context: format!("terminal condition `{}` at x = {x}: |g| = {v} > c exp(lambda x^2) = {cap}", self.id),
                    estimate: v.f64(),
                    bound: cap.f64(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    PicardMild,
    ThetaFd,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::PicardMild => "picard_mild",
            Method::ThetaFd => "theta_fd",
        })
    }
}

/// `u(t_i, x_j)` and `u_x(t_i, x_j)`, row major in time.
#[derive(Debug, Clone)]
pub struct PdeSolution<T> {
    pub tgrid: Vec<T>,
    pub xgrid: SpaceGrid<T>,
    pub u: Vec<T>,
    pub ux: Vec<T>,
    pub method: Method,
    pub iterations: usize,
    /// Last sup-norm Picard change (0 for direct methods).
    pub residual: T,
    pub history: Vec<T>,
    terminal: TerminalCondition<T>,
}

impl<T: Real> PdeSolution<T> {
    pub fn nx(&self) -> usize {
        self.xgrid.len()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let w = self.nx();
        &self.u[i * w..(i + 1) * w]
    }

    pub fn ux_row(&self, i: usize) -> &[T] {
        let w = self.nx();
        &self.ux[i * w..(i + 1) * w]
    }

    pub fn u_at(&self, i: usize, j: usize) -> T {
        self.u[i * self.nx() + j]
    }

    pub fn terminal(&self) -> &TerminalCondition<T> {
        &self.terminal
    }

    /// Whether `x` lies in the spatial box.
    pub fn inside(&self, x: T) -> bool {
        x.abs() <= self.xgrid.half_width
    }

    fn lerp_row(&self, data: &[T], i: usize, x: T) -> T {
        let w = self.nx();
        let row = &data[i * w..(i + 1) * w];
        let pos = ((x + self.xgrid.half_width) / self.xgrid.dx()).max(T::zero()).min(T::idx(self.xgrid.n));
        let j = pos.floor().to_usize().unwrap_or(0).min(self.xgrid.n - 1);
        let s = pos - T::idx(j);
        row[j] * (T::one() - s) + row[j + 1] * s
    }

    /// Bilinear interpolation of `u` (clamped to the box). At `t = T` this is
    /// `g(x)` exactly.
    pub fn u_interp(&self, t: T, x: T) -> T {
        self.interp(&self.u, t, x, true)
    }

    pub fn ux_interp(&self, t: T, x: T) -> T {
        self.interp(&self.ux, t, x, false)
    }

    fn interp(&self, data: &[T], t: T, x: T, terminal_exact: bool) -> T {
        let nt = self.tgrid.len();
        let last = self.tgrid[nt - 1];
        if terminal_exact && t >= last {
            return self.terminal.eval(x);
        }
        let i = self.tgrid.partition_point(|&v| v <= t).clamp(1, nt - 1) - 1;
        let (a, b) = (self.tgrid[i], self.tgrid[i + 1]);
        let s = ((t - a) / (b - a)).max(T::zero()).min(T::one());
        let lo = self.lerp_row(data, i, x);
        if s == T::zero() {
            return lo;
        }
        if terminal_exact && i + 1 == nt - 1 && s == T::one() {
            return self.terminal.eval(x);
        }
        lo * (T::one() - s) + self.lerp_row(data, i + 1, x) * s
    }

    /// Sup-norm distance to another solution on the same grids.
    pub fn sup_gap(&self, other: &Self) -> T {
        self.u.iter().zip(&other.u).map(|(a, b)| (*a - *b).abs()).fold(T::zero(), T::max)
    }

    /// Sup-norm distance restricted to `|x| <= radius`.
    pub fn sup_gap_within(&self, other: &Self, radius: T) -> T {
        let xs = self.xgrid.points();
        let w = self.nx();
        let mut gap = T::zero();
        for (k, (a, b)) in self.u.iter().zip(&other.u).enumerate() {
            if xs[k % w].abs() <= radius {
                gap = gap.max((*a - *b).abs());
            }
        }
        gap
    }

    /// `L - 5 sqrt(V_T - V_{t_0})`: points further in are insensitive (to
    /// about 1e-6 relative) to the far-field boundary data.
    pub fn interior_radius(&self, curve: &VarianceCurve<T>) -> T {
        let spread = curve.var_at(self.tgrid[self.tgrid.len() - 1]) - curve.var_at(self.tgrid[0]);
        (self.xgrid.half_width - T::lit(5.0) * spread.max(T::zero()).sqrt()).max(T::zero())
    }

    /// CSV with columns `t, x, u, ux`.
    pub fn to_csv(&self, meta: &[String]) -> String {
        let mut table = CsvTable::new(&["t", "x", "u", "ux"]);
        for m in meta {
            table.meta(m);
        }
        table.meta(&format!("method={}", self.method));
        table.meta(&format!("iterations={}", self.iterations));
        table.meta(&format!("residual={}", fmt_num(self.residual)));
        table.meta(&format!("n_time={} n_space={} L={}", self.tgrid.len(), self.nx(), fmt_num(self.xgrid.half_width)));
        let xs = self.xgrid.points();
        for (i, &t) in self.tgrid.iter().enumerate() {
            for (j, &x) in xs.iter().enumerate() {
                let k = i * self.nx() + j;
                table.row(vec![fmt_num(t), fmt_num(x), fmt_num(self.u[k]), fmt_num(self.ux[k])]);
            }
        }
        table.render()
    }
}

/// Width (in grid steps) of the Gaussian stencils.
const STENCIL_SIGMAS: f64 = 9.0;

/// Discrete Gaussian weights `w_m`, `|m| <= M`, for variance `v`.
///
/// For `sqrt(v) >= 1.5 dx` the density is sampled (spectrally accurate on
/// smooth data); below that, each weight integrates the density against the
/// hat function of node `m` (exact for piecewise linear data). Both sets are
/// positive, symmetric and normalised, so affine functions are reproduced.
fn gaussian_stencil<T: Real>(v: T, dx: T) -> Vec<T> {
    let sd = v.sqrt();
    let m_max = (T::lit(STENCIL_SIGMAS) * sd / dx).ceil().to_usize().unwrap_or(1).max(1) + 1;
    let mut w = Vec::with_capacity(2 * m_max + 1);
    if sd >= T::lit(1.5) * dx {
        for k in 0..=2 * m_max {
            let y = dx * (T::idx(k) - T::idx(m_max));
            w.push((-(y * y) / (T::lit(2.0) * v)).exp());
        }
    } else {
        // int over [a, b] of the density and of y * density
        let mass = |a: T, b: T| (b / sd).norm_cdf() - (a / sd).norm_cdf();
        let first = |a: T, b: T| sd * ((a / sd).norm_pdf() - (b / sd).norm_pdf());
        for k in 0..=2 * m_max {
            let m = T::idx(k) - T::idx(m_max);
            let (l, c, r) = ((m - T::one()) * dx, m * dx, (m + T::one()) * dx);
            let rise = first(l, c) - l * mass(l, c);
            let fall = r * mass(c, r) - first(c, r);
            w.push(((rise + fall) / dx).max(T::zero()));
        }
    }
    // symmetrise against rounding, then normalise
    let n = w.len();
    for k in 0..n / 2 {
        let s = (w[k] + w[n - 1 - k]) / T::lit(2.0);
        w[k] = s;
        w[n - 1 - k] = s;
    }
    let total: T = w.iter().copied().sum();
    w.iter().map(|&x| x / total).collect()
}

/// `P_v h` on the grid, with `h` extended linearly beyond the box.
pub fn heat_convolve<T: Real>(h: &[T], v: T, xgrid: &SpaceGrid<T>) -> Vec<T> {
    assert_eq!(h.len(), xgrid.len(), "grid function length");
    if v <= T::zero() {
        return h.to_vec();
    }
    let w = gaussian_stencil(v, xgrid.dx());
    let m = w.len() / 2;
    let n = h.len();
    let mut padded = Vec::with_capacity(n + 2 * m);
    let sl = h[1] - h[0];
    let sr = h[n - 1] - h[n - 2];
    for k in (1..=m).rev() {
        padded.push(h[0] - sl * T::idx(k));
    }
    padded.extend_from_slice(h);
    for k in 1..=m {
        padded.push(h[n - 1] + sr * T::idx(k));
    }
    (0..n)
        .map(|j| {
            let window = &padded[j..j + w.len()];
            window.iter().zip(&w).map(|(a, b)| *a * *b).sum()
        })
        .collect()
}

/// `d/dx` on a row: central differences inside, second order one sided at
/// the two ends.
pub fn gradient_row<T: Real>(u: &[T], dx: T) -> Vec<T> {
    let n = u.len();
    let two = T::lit(2.0);
    let mut g = vec![T::zero(); n];
    for j in 1..n - 1 {
        g[j] = (u[j + 1] - u[j - 1]) / (two * dx);
    }
    g[0] = (-T::lit(3.0) * u[0] + T::lit(4.0) * u[1] - u[2]) / (two * dx);
    g[n - 1] = (T::lit(3.0) * u[n - 1] - T::lit(4.0) * u[n - 2] + u[n - 3]) / (two * dx);
    g
}

/// `u_x` of a solution, row by row.
pub fn gradient_x<T: Real>(sol: &PdeSolution<T>) -> Vec<T> {
    gradient_all(&sol.u, sol.nx(), sol.xgrid.dx())
}

fn gradient_all<T: Real>(u: &[T], width: usize, dx: T) -> Vec<T> {
    u.chunks(width).flat_map(|row| gradient_row(row, dx)).collect()
}

fn check_tgrid<T: Real>(tgrid: &[T], curve: &VarianceCurve<T>) -> Result<()> {
    if tgrid.len() < 3 || tgrid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter("PDE time grid needs >= 3 strictly increasing points".into()));
    }
    let top = curve.horizon() * (T::one() + T::lit(1e-12));
    if tgrid[0] < T::zero() || tgrid[tgrid.len() - 1] > top {
        return Err(Error::Domain(format!(
            "PDE time grid [{}, {}] outside the variance curve's [0, {}]",
            tgrid[0],
            tgrid[tgrid.len() - 1],
            curve.horizon()
        )));
    }
    Ok(())
}

fn variances<T: Real>(tgrid: &[T], curve: &VarianceCurve<T>) -> Vec<T> {
    tgrid.iter().map(|&t| curve.var_at(t)).collect()
}

/// `u(t_i) = P_{V_T - V_{t_i}} g`; the terminal row is `g` itself.
pub fn solve_linear<T: Real>(g: &TerminalCondition<T>, curve: &VarianceCurve<T>, tgrid: &[T], xgrid: &SpaceGrid<T>) -> Result<PdeSolution<T>> {
    check_tgrid(tgrid, curve)?;
    let gx: Vec<T> = xgrid.points().iter().map(|&x| g.eval(x)).collect();
    let vs = variances(tgrid, curve);
    let v_end = vs[vs.len() - 1];
    let mut u = Vec::with_capacity(tgrid.len() * gx.len());
    for &v in &vs {
        u.extend(heat_convolve(&gx, (v_end - v).max(T::zero()), xgrid));
    }
    let ux = gradient_all(&u, gx.len(), xgrid.dx());
    Ok(PdeSolution {
        tgrid: tgrid.to_vec(),
        xgrid: xgrid.clone(),
        u,
        ux,
        method: Method::PicardMild,
        iterations: 0,
        residual: T::zero(),
        history: Vec::new(),
        terminal: g.clone(),
    })
}

/// Settings for the Picard iteration.
#[derive(Debug, Clone, Copy)]
pub struct PicardOptions<T> {
    pub tol: T,
    pub max_iter: usize,
}

impl<T: Real> Default for PicardOptions<T> {
    fn default() -> Self {
        Self {
            tol: T::lit(1e-10).max(T::tol_floor()),
            max_iter: 50,
        }
    }
}

fn driver_rows<T: Real>(f: &Driver<T>, sigma: &Volatility<T>, tgrid: &[T], xs: &[T], u: &[T], ux: &[T]) -> Vec<T> {
    let w = xs.len();
    let mut out = Vec::with_capacity(u.len());
    for (i, &t) in tgrid.iter().enumerate() {
        let s = sigma.value(t);
        for (j, &x) in xs.iter().enumerate() {
            let k = i * w + j;
            out.push(f.eval(t, x, u[k], -s * ux[k]));
        }
    }
    out
}

/// `J_i = int_{t_i}^T P_{V_s - V_{t_i}} F_s ds` for all rows.
///
/// Uses `J_i = P_{V_j - V_i} J_j + int_{t_i}^{t_j} P_{V_s - V_i} F_s ds` with
/// `j` the first later row whose variance gap reaches `(1.5 dx)^2`, so every
/// long range transport is a single well resolved Gaussian step; the short
/// integral is a trapezoid on the grid.
fn source_integral<T: Real>(fs: &[T], tgrid: &[T], vs: &[T], xgrid: &SpaceGrid<T>) -> Vec<T> {
    let w = xgrid.len();
    let nt = tgrid.len();
    let dx = xgrid.dx();
    let threshold = (T::lit(1.5) * dx).powi(2);
    let row = |data: &[T], i: usize| data[i * w..(i + 1) * w].to_vec();
    let mut j_rows: Vec<Vec<T>> = vec![Vec::new(); nt];
    j_rows[nt - 1] = vec![T::zero(); w];
    let half = T::lit(0.5);
    for i in (0..nt - 1).rev() {
        let mut jj = i + 1;
        while jj < nt - 1 && vs[jj] - vs[i] < threshold {
            jj += 1;
        }
        let mut acc = heat_convolve(&j_rows[jj], (vs[jj] - vs[i]).max(T::zero()), xgrid);
        let mut prev = row(fs, i);
        for k in i..jj {
            let next = heat_convolve(&row(fs, k + 1), (vs[k + 1] - vs[i]).max(T::zero()), xgrid);
            let dt = tgrid[k + 1] - tgrid[k];
            for q in 0..w {
                acc[q] += half * dt * (prev[q] + next[q]);
            }
            prev = next;
        }
        j_rows[i] = acc;
    }
    j_rows.concat()
}

/// Picard iteration on the mild form, started from the linear solution.
///
/// Stops when the sup-norm change between sweeps is at most `opts.tol`;
/// otherwise returns [`Error::NonConvergence`] with the change history.
pub fn solve_semilinear_picard<T: Real>(
    f: &Driver<T>,
    g: &TerminalCondition<T>,
    curve: &VarianceCurve<T>,
    sigma: &Volatility<T>,
    tgrid: &[T],
    xgrid: &SpaceGrid<T>,
    opts: PicardOptions<T>,
) -> Result<PdeSolution<T>> {
    if !(opts.tol > T::zero()) || opts.max_iter == 0 {
        return Err(Error::InvalidParameter("Picard needs tol > 0 and max_iter >= 1".into()));
    }
    let lin = solve_linear(g, curve, tgrid, xgrid)?;
    let xs = xgrid.points();
    let vs = variances(tgrid, curve);
    let w = xs.len();
    let mut u = lin.u.clone();
    let mut ux = lin.ux.clone();
    let mut history = Vec::new();
    for iter in 1..=opts.max_iter {
        let fs = driver_rows(f, sigma, tgrid, &xs, &u, &ux);
        let j = source_integral(&fs, tgrid, &vs, xgrid);
        let next: Vec<T> = lin.u.iter().zip(&j).map(|(a, b)| *a + *b).collect();
        let change = next.iter().zip(&u).map(|(a, b)| (*a - *b).abs()).fold(T::zero(), T::max);
        u = next;
        ux = gradient_all(&u, w, xgrid.dx());
        history.push(change);
        if !change.is_finite() {
            break;
        }
        if change <= opts.tol {
            return Ok(PdeSolution {
                tgrid: tgrid.to_vec(),
                xgrid: xgrid.clone(),
                u,
                ux,
                method: Method::PicardMild,
                iterations: iter,
                residual: change,
                history,
                terminal: g.clone(),
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: history.len(),
        last: history.last().map_or(f64::NAN, |v| v.f64()),
        history: history.iter().map(|v| v.f64()).collect(),
    })
}

/// Amplification factor treated as instability in the theta scheme.
pub const INSTABILITY_FACTOR: f64 = 10.0;

/// Steps next to the terminal time replaced by two implicit half steps
/// when `theta < 1`.
pub const RANNACHER_STEPS: usize = 2;

/// Backward theta scheme with exact variance increments:
///
/// ```text
/// (I - theta dV_i/2 D2) u_i = (I + (1 - theta) dV_i/2 D2) u_{i+1} + dt_i F(t_{i+1}, u_{i+1})
/// ```
///
/// `dV_i = V_{t_{i+1}} - V_{t_i}`, `D2` the three point Laplacian. The driver
/// is lagged; the first [`RANNACHER_STEPS`] steps are implicit half steps;
/// boundary values come from the linear solution, which is exact
/// only where the driver is negligible, so comparisons with other solvers
/// belong inside [`PdeSolution::interior_radius`].
pub fn solve_semilinear_fd<T: Real>(
    f: &Driver<T>,
    g: &TerminalCondition<T>,
    curve: &VarianceCurve<T>,
    sigma: &Volatility<T>,
    tgrid: &[T],
    xgrid: &SpaceGrid<T>,
    theta: T,
) -> Result<PdeSolution<T>> {
    if !(theta >= T::zero() && theta <= T::one()) {
        return Err(Error::InvalidParameter(format!("theta = {theta} outside [0, 1]")));
    }
    let lin = solve_linear(g, curve, tgrid, xgrid)?;
    let xs = xgrid.points();
    let vs = variances(tgrid, curve);
    let w = xs.len();
    let nt = tgrid.len();
    let dx = xgrid.dx();
    let dx2 = dx * dx;
    let half = T::lit(0.5);
    let mut rows: Vec<Vec<T>> = vec![Vec::new(); nt];
    rows[nt - 1] = lin.row(nt - 1).to_vec();
    let mut bufs = (vec![T::zero(); w], vec![T::zero(); w], vec![T::zero(); w], vec![T::zero(); w]);
    // one theta step from `up` (known at `t_up`) across a step of length `dt`
    // with variance increment `dv` and Dirichlet values `bnd`
    let mut step = |up: &[T], t_up: T, dt: T, dv: T, th: T, bnd: (T, T)| -> (Vec<T>, T) {
        let (a, b, c, d) = (&mut bufs.0, &mut bufs.1, &mut bufs.2, &mut bufs.3);
        let r = half * dv / dx2;
        let s_up = sigma.value(t_up);
        let grad = gradient_row(up, dx);
        let mut f_sup = T::zero();
        for j in 1..w - 1 {
            let lap = up[j + 1] - T::lit(2.0) * up[j] + up[j - 1];
            let fv = f.eval(t_up, xs[j], up[j], -s_up * grad[j]);
            f_sup = f_sup.max(fv.abs());
            a[j] = -th * r;
            b[j] = T::one() + T::lit(2.0) * th * r;
            c[j] = -th * r;
            d[j] = up[j] + (T::one() - th) * r * lap + dt * fv;
        }
        a[0] = T::zero();
        b[0] = T::one();
        c[0] = T::zero();
        d[0] = bnd.0;
        a[w - 1] = T::zero();
        b[w - 1] = T::one();
        c[w - 1] = T::zero();
        d[w - 1] = bnd.1;
        (thomas(a, b, c, d), dt * f_sup)
    };
    for i in (0..nt - 1).rev() {
        let up = &rows[i + 1];
        let dt = tgrid[i + 1] - tgrid[i];
        let dv = (vs[i + 1] - vs[i]).max(T::zero());
        let lin_row = lin.row(i);
        let bnd = (lin_row[0], lin_row[w - 1]);
        let (next, f_part) = if theta < T::one() && i + 1 + RANNACHER_STEPS >= nt {
            // Rannacher start: two implicit half steps damp the
            // non-smooth terminal data Crank-Nicolson would ring on
            let t_mid = half * (tgrid[i] + tgrid[i + 1]);
            let v_mid = curve.var_at(t_mid).clamp(vs[i], vs[i + 1]);
            let lin_up = lin.row(i + 1);
            let mid_bnd = (half * (bnd.0 + lin_up[0]), half * (bnd.1 + lin_up[w - 1]));
            let (mid, f1) = step(up, tgrid[i + 1], tgrid[i + 1] - t_mid, vs[i + 1] - v_mid, T::one(), mid_bnd);
            let (out, f2) = step(&mid, t_mid, t_mid - tgrid[i], v_mid - vs[i], T::one(), bnd);
            (out, f1.max(f2))
        } else {
            step(up, tgrid[i + 1], dt, dv, theta, bnd)
        };
        let sup_prev = up.iter().map(|v| v.abs()).fold(T::zero(), T::max);
        let sup_next = next.iter().map(|v| v.abs()).fold(T::zero(), T::max);
        let base = sup_prev.max(f_part).max(T::min_positive_value());
        let amp = sup_next / base;
        if !(amp <= T::lit(INSTABILITY_FACTOR)) {
            return Err(Error::Instability {
                step: i,
                amplification: amp.f64(),
            });
        }
        rows[i] = next;
    }
    let u = rows.concat();
    let ux = gradient_all(&u, w, dx);
    Ok(PdeSolution {
        tgrid: tgrid.to_vec(),
        xgrid: xgrid.clone(),
        u,
        ux,
        method: Method::ThetaFd,
        iterations: 0,
        residual: T::zero(),
        history: Vec::new(),
        terminal: g.clone(),
    })
}

/// Tridiagonal solve; `a` sub, `b` main, `c` super diagonal.
fn thomas<T: Real>(a: &[T], b: &[T], c: &[T], d: &[T]) -> Vec<T> {
    let n = d.len();
    let mut cp = vec![T::zero(); n];
    let mut dp = vec![T::zero(); n];
    cp[0] = c[0] / b[0];
    dp[0] = d[0] / b[0];
    for i in 1..n {
        let m = b[i] - a[i] * cp[i - 1];
        cp[i] = c[i] / m;
        dp[i] = (d[i] - a[i] * dp[i - 1]) / m;
    }
    let mut x = vec![T::zero(); n];
    x[n - 1] = dp[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = dp[i] - cp[i] * x[i + 1];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stencils_are_normalised_and_reproduce_affine_data() {
        let grid = SpaceGrid::new(5.0f64, 200).unwrap();
        let xs = grid.points();
        for &v in &[1e-6, 1e-3, 0.01, 0.5, 2.0] {
            let w = gaussian_stencil(v, grid.dx());
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            assert!(w.iter().all(|&x| x >= 0.0));
            let h: Vec<f64> = xs.iter().map(|x| 3.0 * x - 1.0).collect();
            let p = heat_convolve(&h, v, &grid);
            for (a, b) in p.iter().zip(&h) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn thomas_solves_small_system() {
        let x = thomas::<f64>(&[0.0, 1.0, 1.0], &[4.0, 4.0, 4.0], &[1.0, 1.0, 0.0], &[5.0, 6.0, 5.0]);
        for v in x {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn gradient_is_exact_for_quadratics() {
        let dx = 0.1;
        let u: Vec<f64> = (0..11).map(|j| (j as f64 * dx).powi(2)).collect();
        let g = gradient_row(&u, dx);
        for (j, v) in g.iter().enumerate() {
            assert!((v - 2.0 * j as f64 * dx).abs() < 1e-12);
        }
    }
}
