//! Monte Carlo paths of `W`, `X_t = int_0^t K(t, s) dW_s` and
//! `N_t = int_0^t (K*_t sigma)_s dW_s`, and statistical checks on them.
//!
//! Wiener integrals are discretised with left point increments and the
//! integrand evaluated at the cell midpoint `s_j* = (t_j + t_{j+1}) / 2`,
//! which never touches the kernel's diagonal:
//!
//! ```text
//! X_{t_i} = sum_{j < i} K(t_i, s_j*) dW_j,   N_{t_i} = sum_{j < i} (K*_{t_i} sigma)(s_j*) dW_j
//! ```
//!
//! Path `p` draws its normals from ChaCha8 seeded with `seed` on stream `p`,
//! so results do not depend on how paths are scheduled across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::Kernel;
use crate::operators::{covariance_r, kstar_apply, SingularQuadRule, VarianceCurve, Volatility};
use crate::quad::gauss_hermite_normal;
use crate::scalar::Real;
use crate::stats;
use crate::table::{fmt_num, CsvTable};

/// Default cap on `n_paths * (n_steps + 1)` stored cells per path array.
pub const DEFAULT_CELL_BUDGET: usize = 1 << 27;

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid<T> {
    pub points: Vec<T>,
}

impl<T: Real> TimeGrid<T> {
    pub fn uniform(t0: T, horizon: T, n_steps: usize) -> Result<Self> {
        if n_steps < 2 {
            return Err(Error::InvalidParameter(format!("n_steps = {n_steps} < 2")));
        }
        if !(t0 >= T::zero() && horizon > t0) {
            return Err(Error::InvalidParameter(format!("need 0 <= t0 < T, got t0 = {t0}, T = {horizon}")));
        }
        let h = (horizon - t0) / T::idx(n_steps);
        let mut points: Vec<T> = (0..n_steps).map(|i| t0 + h * T::idx(i)).collect();
        points.push(horizon);
        Ok(Self { points })
    }

    pub fn from_points(points: Vec<T>) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::InvalidParameter("time grid needs n_steps >= 2".into()));
        }
        if points[0] < T::zero() || points.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("time grid must be nonnegative and strictly increasing".into()));
        }
        Ok(Self { points })
    }

    pub fn t0(&self) -> T {
        self.points[0]
    }

    pub fn horizon(&self) -> T {
        self.points[self.points.len() - 1]
    }

    pub fn n_steps(&self) -> usize {
        self.points.len() - 1
    }

    pub fn dt(&self, j: usize) -> T {
        self.points[j + 1] - self.points[j]
    }

    pub fn max_dt(&self) -> T {
        (0..self.n_steps()).map(|j| self.dt(j)).fold(T::zero(), T::max)
    }

    /// Index of the grid point equal to `t` up to a relative `1e-9`.
    pub fn index_of(&self, t: T) -> Result<usize> {
        let tol = T::lit(1e-9) * self.horizon().max(T::one());
        self.points
            .iter()
            .position(|&p| (p - t).abs() <= tol)
            .ok_or_else(|| Error::Domain(format!("t = {t} is not a grid time")))
    }
}

/// Row-major lower triangular table `a[i][j]`, `j < i`.
#[derive(Debug, Clone)]
struct Tri<T> {
    data: Vec<T>,
}

impl<T: Real> Tri<T> {
    fn row(&self, i: usize) -> &[T] {
        let start = i * (i.saturating_sub(1)) / 2;
        &self.data[start..start + i]
    }
}

fn build_tri<T, F>(n: usize, f: F) -> Result<Tri<T>>
where
    T: Real,
    F: Fn(usize, usize) -> Result<T> + Sync,
{
    let rows: Vec<Result<Vec<T>>> = (0..=n).into_par_iter().map(|i| (0..i).map(|j| f(i, j)).collect()).collect();
    let mut data = Vec::with_capacity(n * (n + 1) / 2);
    for r in rows {
        data.extend(r?);
    }
    Ok(Tri { data })
}

#[derive(Debug, Clone)]
pub struct PathEnsemble<T> {
    pub grid: TimeGrid<T>,
    pub n_paths: usize,
    /// `n_paths x n_steps`, row major.
    pub dw: Vec<T>,
    /// `n_paths x (n_steps + 1)`, row major.
    pub x: Vec<T>,
    pub n: Vec<T>,
    pub seed: u64,
    pub kernel_id: String,
    pub sigma_id: String,
}

impl<T: Real> PathEnsemble<T> {
    fn width(&self) -> usize {
        self.grid.points.len()
    }

    pub fn x_at(&self, path: usize, i: usize) -> T {
        self.x[path * self.width() + i]
    }

    pub fn n_at(&self, path: usize, i: usize) -> T {
        self.n[path * self.width() + i]
    }

    pub fn dw_at(&self, path: usize, j: usize) -> T {
        self.dw[path * self.grid.n_steps() + j]
    }

    pub fn x_column(&self, i: usize) -> Vec<T> {
        (0..self.n_paths).map(|p| self.x_at(p, i)).collect()
    }

    pub fn n_column(&self, i: usize) -> Vec<T> {
        (0..self.n_paths).map(|p| self.n_at(p, i)).collect()
    }

    pub fn dw_column(&self, j: usize) -> Vec<T> {
        (0..self.n_paths).map(|p| self.dw_at(p, j)).collect()
    }

    /// Largest `|z|` of the increment test `(mean(dW_j^2) - dt_j) / stderr`.
    pub fn increment_variance_zscore(&self) -> T {
        let mut worst = T::zero();
        for j in 0..self.grid.n_steps() {
            let sq: Vec<T> = self.dw_column(j).iter().map(|v| *v * *v).collect();
            let (m, se) = stats::mean_se(&sq);
            worst = worst.max((m - self.grid.dt(j)).abs() / se);
        }
        worst
    }

    /// CSV with columns `path_id, t, X, N` for the first `max_paths` paths.
    pub fn to_csv(&self, max_paths: usize, meta: &[String]) -> String {
        let mut table = CsvTable::new(&["path_id", "t", "X", "N"]);
        for m in meta {
            table.meta(m);
        }
        table.meta(&format!("seed={}", self.seed));
        table.meta(&format!("kernel={}", self.kernel_id));
        table.meta(&format!("sigma={}", self.sigma_id));
        for p in 0..self.n_paths.min(max_paths) {
            for (i, &t) in self.grid.points.iter().enumerate() {
                table.row(vec![p.to_string(), fmt_num(t), fmt_num(self.x_at(p, i)), fmt_num(self.n_at(p, i))]);
            }
        }
        table.render()
    }
}

/// Standard normal increments for path `p`: `dW_j = sqrt(dt_j) Z_j`.
pub fn brownian_increments<T: Real>(seed: u64, path: usize, grid: &TimeGrid<T>) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    (0..grid.n_steps())
        .map(|j| {
            let z: f64 = rng.sample(StandardNormal);
            T::lit(z) * grid.dt(j).sqrt()
        })
        .collect()
}

/// Simulates `n_paths` paths on `grid` (which must start at 0).
pub fn sample_paths<T, K>(
    kernel: &K,
    sigma: &Volatility<T>,
    grid: &TimeGrid<T>,
    n_paths: usize,
    seed: u64,
    rule: &SingularQuadRule<T>,
    cell_budget: usize,
) -> Result<PathEnsemble<T>>
where
    T: Real,
    K: Kernel<T> + ?Sized,
{
    if n_paths == 0 {
        return Err(Error::InvalidParameter("n_paths must be >= 1".into()));
    }
    if grid.t0() != T::zero() {
        return Err(Error::InvalidParameter(format!(
            "path grids must start at 0 (Wiener integrals run from 0), got {}",
            grid.t0()
        )));
    }
    let top = kernel.horizon() * (T::one() + T::lit(16.0) * T::epsilon());
    if grid.horizon() > top {
        return Err(Error::Domain(format!("grid end {} beyond kernel horizon {}", grid.horizon(), kernel.horizon())));
    }
    let width = grid.points.len();
    let requested = n_paths.saturating_mul(width);
    if requested > cell_budget {
        return Err(Error::Resource {
            requested,
            budget: cell_budget,
        });
    }
    let n = grid.n_steps();
    let pts = &grid.points;
    let mid = |j: usize| (pts[j] + pts[j + 1]) / T::lit(2.0);
    let kx = build_tri(n, |i, j| {
        let s = mid(j);
        Ok(kernel.eval_gap(pts[i], s, pts[i] - s))
    })?;
    let kn = build_tri(n, |i, j| kstar_apply(kernel, sigma, pts[i], mid(j), rule))?;

    let per_path: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let dw = brownian_increments(seed, p, grid);
            let mut x = vec![T::zero(); width];
            let mut nn = vec![T::zero(); width];
            for i in 1..width {
                let (rx, rn) = (kx.row(i), kn.row(i));
                let (mut ax, mut an) = (T::zero(), T::zero());
                for j in 0..i {
                    ax += rx[j] * dw[j];
                    an += rn[j] * dw[j];
                }
                x[i] = ax;
                nn[i] = an;
            }
            (dw, x, nn)
        })
        .collect();
    let mut dw = Vec::with_capacity(n_paths * n);
    let mut x = Vec::with_capacity(requested);
    let mut nn = Vec::with_capacity(requested);
    for (a, b, c) in per_path {
        dw.extend(a);
        x.extend(b);
        nn.extend(c);
    }
    Ok(PathEnsemble {
        grid: grid.clone(),
        n_paths,
        dw,
        x,
        n: nn,
        seed,
        kernel_id: kernel.id(),
        sigma_id: sigma.id(),
    })
}

/// One line of a Monte Carlo report.
#[derive(Debug, Clone)]
pub struct CheckRow<T> {
    pub name: String,
    pub lhs: T,
    pub rhs: T,
    pub stderr: T,
    /// Deterministic allowance added to `3 stderr`.
    pub allowance: T,
    pub pass: bool,
}

impl<T: Real> CheckRow<T> {
    pub fn new(name: impl Into<String>, lhs: T, rhs: T, stderr: T, allowance: T) -> Self {
        let pass = (lhs - rhs).abs() <= T::lit(3.0) * stderr + allowance;
        Self {
            name: name.into(),
            lhs,
            rhs,
            stderr,
            allowance,
            pass,
        }
    }
}

/// CSV with columns `check_name, lhs, rhs, stderr, pass`.
pub fn report_csv<T: Real>(rows: &[CheckRow<T>], meta: &[String]) -> String {
    let mut table = CsvTable::new(&["check_name", "lhs", "rhs", "stderr", "pass"]);
    for m in meta {
        table.meta(m);
    }
    for r in rows {
        table.row(vec![r.name.clone(), fmt_num(r.lhs), fmt_num(r.rhs), fmt_num(r.stderr), r.pass.to_string()]);
    }
    table.render()
}

#[derive(Debug, Clone)]
pub struct CovarianceReport<T> {
    pub rows: Vec<CheckRow<T>>,
    /// Human readable allowance rule with its constants.
    pub allowance_rule: String,
    pub pass: bool,
}

/// Empirical `Cov(X_t, X_s)` against `R(t, s)` on the 8 x 8 lattice of grid
/// indices `round(k n / 8)`, `k = 1..8` (36 distinct pairs).
///
/// Each pair passes iff `|emp - R| <= 3 stderr + A` with the discretisation
/// allowance `A = 0.25 max R dt^min(1, 2 H_min - 1)`.
pub fn validate_covariance<T, K>(ensemble: &PathEnsemble<T>, kernel: &K, hurst_min: T, rule: &SingularQuadRule<T>) -> Result<CovarianceReport<T>>
where
    T: Real,
    K: Kernel<T> + ?Sized,
{
    if ensemble.n_paths < 1000 {
        return Err(Error::InvalidParameter(format!("covariance validation needs >= 1000 paths, got {}", ensemble.n_paths)));
    }
    let n = ensemble.grid.n_steps();
    let mut idx: Vec<usize> = (1..=8).map(|k| ((k * n) as f64 / 8.0).round() as usize).filter(|&i| i >= 1).collect();
    idx.dedup();
    let pts = &ensemble.grid.points;
    let mut exact = Vec::new();
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a..] {
            exact.push((i, j, covariance_r(kernel, pts[i], pts[j], rule)?));
        }
    }
    let r_max = exact.iter().map(|e| e.2.abs()).fold(T::zero(), T::max);
    let expo = (T::lit(2.0) * hurst_min - T::one()).min(T::one());
    let allowance = T::lit(0.25) * r_max * ensemble.grid.max_dt().powf(expo);
    let cols: Vec<(usize, Vec<T>)> = idx.iter().map(|&i| (i, ensemble.x_column(i))).collect();
    let col = |i: usize| &cols.iter().find(|c| c.0 == i).unwrap().1;
    let rows: Vec<CheckRow<T>> = exact
        .into_iter()
        .map(|(i, j, r)| {
            let (c, se) = stats::covariance_se(col(i), col(j));
            CheckRow::new(format!("cov(t={},s={})", pts[i].f64(), pts[j].f64()), c, r, se, allowance)
        })
        .collect();
    let pass = rows.iter().all(|r| r.pass);
    Ok(CovarianceReport {
        rows,
        allowance_rule: format!(
            "3*stderr + 0.25*maxR*dt^{} = 3*stderr + {:e} (maxR = {:e}, dt = {:e})",
            expo.f64(),
            allowance.f64(),
            r_max.f64(),
            ensemble.grid.max_dt().f64()
        ),
        pass,
    })
}

/// Exponential growth rate of `h` on the sample box `[-b, b]`: the slope of
/// `ln max_{|x| <= r} |h(x)|` against `r^2` between `r = b/2` and `r = b`.
///
/// Bounded functions give 0 and `c exp(l x^2)` gives `l`.
pub fn growth_exponent<T: Real, H: Fn(T) -> T>(h: H, b: T) -> T {
    if !(b > T::zero()) {
        return T::zero();
    }
    let m = 400;
    let floor = T::min_positive_value();
    let env = |r: T| -> T {
        let mut best = floor;
        for k in 0..=m {
            let x = r * T::idx(k) / T::idx(m);
            best = best.max(h(x).abs()).max(h(-x).abs());
        }
        best
    };
    let half = b / T::lit(2.0);
    let (lo, hi) = (env(half), env(b));
    if !hi.is_finite() {
        return T::infinity();
    }
    ((hi.ln() - lo.ln()) / (b * b - half * half)).max(T::zero())
}

/// The box is `[-b, b]` with `b` the larger of the sample extreme and
/// `8 sqrt(sup Var)`; on smaller boxes polynomial growth reads as Gaussian.
fn growth_guard<T: Real, H: Fn(T) -> T>(h: H, sample_b: T, var_sup: T, context: &str) -> Result<T> {
    let est = growth_exponent(h, sample_b.max(T::lit(8.0) * var_sup.sqrt()));
    let bound = T::one() / (T::lit(8.0) * var_sup);
    if !(est < bound) {
        return Err(Error::Growth {
            context: context.to_string(),
            estimate: est.f64(),
            bound: bound.f64(),
        });
    }
    Ok(est)
}

fn max_abs<T: Real>(xs: &[T]) -> T {
    xs.iter().map(|v| v.abs()).fold(T::zero(), T::max)
}

/// `P_v h(0) = E[h(sqrt(v) Z)]` by 64 point Gauss-Hermite quadrature.
pub fn gaussian_expectation<T: Real, H: Fn(T) -> T>(h: H, v: T) -> T {
    let (z, w) = gauss_hermite_normal(64);
    let sd = v.max(T::zero()).sqrt();
    z.iter().zip(&w).map(|(&z, &w)| T::lit(w) * h(sd * T::lit(z))).sum()
}

/// `E[h(N_s)]` (Monte Carlo) against `P_{Var(N_s)} h(0)` (quadrature).
///
/// Fails with a growth error when `h` grows like `exp(l x^2)` with
/// `l >= 1 / (8 sup Var)` on the sampled box.
pub fn expectation_heat_identity<T, H>(ensemble: &PathEnsemble<T>, curve: &VarianceCurve<T>, h: H, s: T) -> Result<CheckRow<T>>
where
    T: Real,
    H: Fn(T) -> T,
{
    let i = ensemble.grid.index_of(s)?;
    let col = ensemble.n_column(i);
    growth_guard(&h, max_abs(&col), curve.sup_var(), "heat identity test function")?;
    let vals: Vec<T> = col.iter().map(|&x| h(x)).collect();
    let (lhs, se) = stats::mean_se(&vals);
    let rhs = gaussian_expectation(&h, curve.var_at(s));
    let rounding = T::lit(1e-12) * rhs.abs().max(T::one());
    Ok(CheckRow::new(format!("heat_identity(s={})", s.f64()), lhs, rhs, se, rounding))
}

/// `F(t, x)` with the derivatives the expectation form of Ito's formula needs.
pub struct ItoFunction<'a, T> {
    pub f: &'a (dyn Fn(T, T) -> T + Sync),
    pub f_t: &'a (dyn Fn(T, T) -> T + Sync),
    pub f_xx: &'a (dyn Fn(T, T) -> T + Sync),
}

/// `E[F(t, N_t)]` against
/// `F(0, 0) + int_0^t E[F_s(s, N_s)] ds + 1/2 int_0^t E[F_xx(s, N_s)] dVar(N_s)`,
/// time integrals by the trapezoid rule on the ensemble grid.
///
/// Both sides are per-path averages; their standard errors are combined in
/// quadrature and the allowance is `max dt * max(1, |lhs|)`.
pub fn ito_expectation_check<T: Real>(ensemble: &PathEnsemble<T>, curve: &VarianceCurve<T>, func: &ItoFunction<'_, T>, t: T) -> Result<CheckRow<T>> {
    let it = ensemble.grid.index_of(t)?;
    let col = ensemble.n_column(it);
    let sup = curve.sup_var();
    growth_guard(|x| (func.f)(t, x), max_abs(&col), sup, "Ito test function")?;
    let pts = &ensemble.grid.points;
    let vars: Vec<T> = pts[..=it].iter().map(|&s| curve.var_at(s)).collect();
    let half = T::lit(0.5);
    let f00 = (func.f)(T::zero(), T::zero());
    let (lhs_vals, rhs_vals): (Vec<T>, Vec<T>) = (0..ensemble.n_paths)
        .map(|p| {
            let mut acc = f00;
            for j in 0..it {
                let (a, b) = (ensemble.n_at(p, j), ensemble.n_at(p, j + 1));
                let dt = pts[j + 1] - pts[j];
                acc += half * ((func.f_t)(pts[j], a) + (func.f_t)(pts[j + 1], b)) * dt;
                acc += half * half * ((func.f_xx)(pts[j], a) + (func.f_xx)(pts[j + 1], b)) * (vars[j + 1] - vars[j]);
            }
            ((func.f)(t, ensemble.n_at(p, it)), acc)
        })
        .unzip();
    let (lhs, se_l) = stats::mean_se(&lhs_vals);
    let (rhs, se_r) = stats::mean_se(&rhs_vals);
    let se = (se_l * se_l + se_r * se_r).sqrt();
    let allowance = ensemble.grid.max_dt() * lhs.abs().max(T::one());
    Ok(CheckRow::new(format!("ito_expectation(t={})", t.f64()), lhs, rhs, se, allowance))
}

/// Skewness and excess kurtosis of `N_{t_i}` with their standard errors.
pub fn marginal_moments<T: Real>(ensemble: &PathEnsemble<T>, i: usize) -> (T, T, T, T) {
    stats::shape_moments(&ensemble.n_column(i))
}
