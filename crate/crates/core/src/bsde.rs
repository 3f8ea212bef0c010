//! `(Y, Z) = (u(t, N_t), -sigma_t u_x(t, N_t))` from a PDE solution, the
//! Brownian-side check of the BSDE, the comparison harness and the density
//! diagnostic.
//!
//! The Brownian side replaces `N` by `zeta_t = zeta_{t0} + int_{t0}^t rho dW`,
//! a Gaussian martingale with the same one-dimensional laws, so the BSDE
//! becomes a classical Brownian one with `Ztilde = rho u_x(t, zeta_t)`:
//!
//! ```text
//! Ytilde_{t0} = g(zeta_T) + int f(t, zeta, Ytilde, -sigma rho^-1 Ztilde) dt - int Ztilde dW
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::operators::{StepIntegrand, VarianceCurve, Volatility};
use crate::pde::{solve_semilinear_picard, Driver, PdeSolution, PicardOptions, SpaceGrid, TerminalCondition};
use crate::scalar::Real;
use crate::simulate::{PathEnsemble, TimeGrid};
use crate::stats;
use crate::table::{fmt_num, CsvTable};

/// Largest fraction of `(t, N_t)` points allowed outside the PDE box.
pub const MAX_ESCAPE_FRACTION: f64 = 1e-3;

/// Floor applied to `rho` before dividing by it.
pub const RHO_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct BsdeSolution<T> {
    pub n_paths: usize,
    /// Ensemble times covered (those at or after the PDE's first time).
    pub times: Vec<T>,
    /// Index in the ensemble grid of `times[0]`.
    pub first_index: usize,
    /// `n_paths x times.len()`, row major.
    pub y: Vec<T>,
    pub z: Vec<T>,
    pub clipped: usize,
    pub clip_fraction: T,
}

impl<T: Real> BsdeSolution<T> {
    pub fn y_at(&self, p: usize, k: usize) -> T {
        self.y[p * self.times.len() + k]
    }

    pub fn z_at(&self, p: usize, k: usize) -> T {
        self.z[p * self.times.len() + k]
    }

    /// Monte Carlo estimates of `E[int Y^2 dt]` and `E[int Z^2 dt]`
    /// (trapezoid in time).
    pub fn square_integrals(&self) -> (T, T) {
        let m = self.times.len();
        let half = T::lit(0.5);
        let (mut sy, mut sz) = (T::zero(), T::zero());
        for p in 0..self.n_paths {
            for k in 0..m - 1 {
                let dt = self.times[k + 1] - self.times[k];
                let (a, b) = (self.y_at(p, k), self.y_at(p, k + 1));
                let (c, d) = (self.z_at(p, k), self.z_at(p, k + 1));
                sy += half * dt * (a * a + b * b);
                sz += half * dt * (c * c + d * d);
            }
        }
        let n = T::idx(self.n_paths);
        (sy / n, sz / n)
    }
}

/// `Y` and `Z` on every path at the ensemble times inside the PDE's time range.
pub fn build_yz<T: Real>(sol: &PdeSolution<T>, ensemble: &PathEnsemble<T>, sigma: &Volatility<T>) -> Result<BsdeSolution<T>> {
    let t0 = sol.tgrid[0];
    let t_end = sol.tgrid[sol.tgrid.len() - 1];
    let tol = T::lit(1e-9) * t_end.max(T::one());
    if (ensemble.grid.horizon() - t_end).abs() > tol {
        return Err(Error::Domain(format!(
            "ensemble horizon {} differs from the PDE horizon {}",
            ensemble.grid.horizon(),
            t_end
        )));
    }
    let first_index = ensemble
        .grid
        .points
        .iter()
        .position(|&t| t >= t0 - tol)
        .ok_or_else(|| Error::Domain("no ensemble time inside the PDE range".into()))?;
    let times: Vec<T> = ensemble.grid.points[first_index..].to_vec();
    let m = times.len();
    let mut y = Vec::with_capacity(ensemble.n_paths * m);
    let mut z = Vec::with_capacity(ensemble.n_paths * m);
    let mut clipped = 0usize;
    for p in 0..ensemble.n_paths {
        for (k, &t) in times.iter().enumerate() {
            let x = ensemble.n_at(p, first_index + k);
            if !sol.inside(x) {
                clipped += 1;
            }
            y.push(sol.u_interp(t, x));
            z.push(-sigma.value(t) * sol.ux_interp(t, x));
        }
    }
    let total = ensemble.n_paths * m;
    let clip_fraction = T::idx(clipped) / T::idx(total);
    if clip_fraction > T::lit(MAX_ESCAPE_FRACTION) {
        return Err(Error::DomainEscape {
            fraction: clip_fraction.f64(),
            escaped: clipped,
        });
    }
    Ok(BsdeSolution {
        n_paths: ensemble.n_paths,
        times,
        first_index,
        y,
        z,
        clipped,
        clip_fraction,
    })
}

#[derive(Debug, Clone)]
pub struct BrownianSideRun<T> {
    pub times: Vec<T>,
    /// `sqrt(rate(t_i))`, floored at [`RHO_FLOOR`].
    pub rho: Vec<T>,
    /// Step averaged `sqrt((V_{i+1} - V_i) / dt_i)` used for the increments.
    pub rho_step: Vec<T>,
    pub rho_clamped: usize,
    /// The first `stored_paths` paths of `zeta`, `Ytilde`, `Ztilde`
    /// (`stored_paths x times.len()`, row major).
    pub stored_paths: usize,
    pub zeta: Vec<T>,
    pub ytilde: Vec<T>,
    pub ztilde: Vec<T>,
    pub residuals: Vec<T>,
    pub residual_l2: T,
    /// Largest `|Var(zeta_t) - Var(N_t)| / stderr` over the grid.
    pub variance_zscore: T,
    pub variance_match: bool,
    /// Largest `|Ytilde_T - g(zeta_T)|` (zero by construction).
    pub terminal_defect: T,
}

/// Simulates `zeta` on `grid` (starting at `t0 > 0` is allowed) and returns
/// the Euler residual
/// `R = Ytilde_{t0} - [g(zeta_T) + sum f dt - sum Ztilde dW]`.
///
/// `zeta_{t0} ~ N(0, V(t0))` and `zeta_{i+1} = zeta_i + rho_i dW_i` with
/// `rho_i^2 = (V_{i+1} - V_i) / dt_i`, so `Var(zeta_t) = V(t)` on the grid
/// exactly. Path `p` uses ChaCha8 stream `p` of `seed`.
#[allow(clippy::too_many_arguments)]
pub fn brownian_side_verify<T: Real>(
    sol: &PdeSolution<T>,
    curve: &VarianceCurve<T>,
    sigma: &Volatility<T>,
    f: &Driver<T>,
    g: &TerminalCondition<T>,
    grid: &TimeGrid<T>,
    n_paths: usize,
    seed: u64,
    stored_paths: usize,
) -> Result<BrownianSideRun<T>> {
    if n_paths == 0 {
        return Err(Error::InvalidParameter("n_paths must be >= 1".into()));
    }
    let times = grid.points.clone();
    let m = times.len();
    let mut rho = Vec::with_capacity(m);
    let mut clamped = 0usize;
    let floor = T::lit(RHO_FLOOR);
    for &t in &times {
        let r = curve.rate_at(t);
        if !(r > T::zero()) {
            return Err(Error::Positivity { t: t.f64(), rate: r.f64() });
        }
        let s = r.sqrt();
        if s < floor {
            clamped += 1;
        }
        rho.push(s.max(floor));
    }
    let vs: Vec<T> = times.iter().map(|&t| curve.var_at(t)).collect();
    let rho_step: Vec<T> = (0..m - 1)
        .map(|i| ((vs[i + 1] - vs[i]).max(T::zero()) / (times[i + 1] - times[i])).sqrt())
        .collect();
    clamped += rho_step.iter().filter(|&&r| r < floor).count();
    let rho_div: Vec<T> = rho_step.iter().map(|&r| r.max(floor)).collect();
    let sig: Vec<T> = times.iter().map(|&t| sigma.value(t)).collect();

    struct PathOut<T> {
        zeta: Vec<T>,
        yt: Vec<T>,
        zt: Vec<T>,
        residual: T,
        terminal: T,
    }
    let runs: Vec<PathOut<T>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            let z0: f64 = rng.sample(StandardNormal);
            let mut zeta = Vec::with_capacity(m);
            let mut yt = Vec::with_capacity(m);
            let mut zt = Vec::with_capacity(m);
            let mut x = T::lit(z0) * vs[0].sqrt();
            let mut drift = T::zero();
            let mut mart = T::zero();
            for i in 0..m {
                let t = times[i];
                let y = sol.u_interp(t, x);
                zeta.push(x);
                yt.push(y);
                if i + 1 == m {
                    zt.push(rho[i] * sol.ux_interp(t, x));
                    break;
                }
                let ztl = rho_step[i] * sol.ux_interp(t, x);
                zt.push(ztl);
                let dt = times[i + 1] - t;
                let zn: f64 = rng.sample(StandardNormal);
                let dw = T::lit(zn) * dt.sqrt();
                drift += f.eval(t, x, y, -sig[i] * ztl / rho_div[i]) * dt;
                mart += ztl * dw;
                x += rho_step[i] * dw;
            }
            let gz = g.eval(x);
            let residual = yt[0] - (gz + drift - mart);
            PathOut {
                zeta,
                yt: yt.clone(),
                zt,
                residual,
                terminal: (yt[m - 1] - gz).abs(),
            }
        })
        .collect();

    let residuals: Vec<T> = runs.iter().map(|r| r.residual).collect();
    let residual_l2 = (residuals.iter().map(|r| *r * *r).sum::<T>() / T::idx(n_paths)).sqrt();
    let terminal_defect = runs.iter().map(|r| r.terminal).fold(T::zero(), T::max);
    let mut zscore = T::zero();
    if n_paths >= 2 {
        for (i, &vi) in vs.iter().enumerate().take(m) {
            let col: Vec<T> = runs.iter().map(|r| r.zeta[i]).collect();
            let (v, se) = stats::variance_se(&col);
            if se > T::zero() {
                zscore = zscore.max((v - vi).abs() / se);
            }
        }
    }
    let keep = stored_paths.min(n_paths);
    let mut zeta = Vec::with_capacity(keep * m);
    let mut ytilde = Vec::with_capacity(keep * m);
    let mut ztilde = Vec::with_capacity(keep * m);
    for r in runs.iter().take(keep) {
        zeta.extend_from_slice(&r.zeta);
        ytilde.extend_from_slice(&r.yt);
        ztilde.extend_from_slice(&r.zt);
    }
    Ok(BrownianSideRun {
        times,
        rho,
        rho_step,
        rho_clamped: clamped,
        stored_paths: keep,
        zeta,
        ytilde,
        ztilde,
        residuals,
        residual_l2,
        variance_zscore: zscore,
        variance_match: zscore <= T::lit(3.0),
        terminal_defect,
    })
}

/// Least squares slope of `ln residual` against `ln dt`.
pub fn refinement_slope<T: Real>(dts: &[T], residuals: &[T]) -> T {
    let xs: Vec<T> = dts.iter().map(|d| d.ln()).collect();
    let ys: Vec<T> = residuals.iter().map(|r| r.ln()).collect();
    let (mx, my) = (stats::mean(&xs), stats::mean(&ys));
    let num: T = xs.iter().zip(&ys).map(|(x, y)| (*x - mx) * (*y - my)).sum();
    let den: T = xs.iter().map(|x| (*x - mx) * (*x - mx)).sum();
    num / den
}

/// One line of a bsde report.
#[derive(Debug, Clone)]
pub struct ReportRow<T> {
    pub check: String,
    pub value: T,
    pub tolerance: T,
    pub pass: bool,
}

impl<T: Real> ReportRow<T> {
    pub fn new(check: impl Into<String>, value: T, tolerance: T, pass: bool) -> Self {
        Self {
            check: check.into(),
            value,
            tolerance,
            pass,
        }
    }
}

/// CSV with columns `check, value, tolerance, pass`.
pub fn report_csv<T: Real>(rows: &[ReportRow<T>], meta: &[String]) -> String {
    let mut table = CsvTable::new(&["check", "value", "tolerance", "pass"]);
    for m in meta {
        table.meta(m);
    }
    for r in rows {
        table.row(vec![r.check.clone(), fmt_num(r.value), fmt_num(r.tolerance), r.pass.to_string()]);
    }
    table.render()
}

/// A `(driver, terminal condition)` pair.
#[derive(Debug, Clone)]
pub struct Problem<T> {
    pub f: Driver<T>,
    pub g: TerminalCondition<T>,
}

/// Data shared by both problems in a comparison.
pub struct Shared<'a, T> {
    pub curve: &'a VarianceCurve<T>,
    pub sigma: &'a Volatility<T>,
    pub tgrid: &'a [T],
    pub xgrid: &'a SpaceGrid<T>,
    pub picard: PicardOptions<T>,
    /// Paths on which `Y1 >= Y2` is checked, if any.
    pub ensemble: Option<&'a PathEnsemble<T>>,
    /// Half width of the `(y, z)` box used to check `f1 >= f2`.
    pub yz_box: T,
}

#[derive(Debug, Clone)]
pub struct CompareReport<T> {
    pub u1: PdeSolution<T>,
    pub u2: PdeSolution<T>,
    pub min_gap: T,
    pub max_gap: T,
    /// Grid points with `u1 < u2 - 1e-8`.
    pub violations: usize,
    pub path_violations: Option<usize>,
    pub rows: Vec<ReportRow<T>>,
    pub pass: bool,
}

/// Slack allowed in `u1 >= u2`.
pub const COMPARISON_SLACK: f64 = 1e-8;

/// Checks `g1 >= g2` on the space grid and `f1 >= f2` on a sampled box,
/// solves both problems and verifies `u1 >= u2 - 1e-8` everywhere (and
/// `Y1 >= Y2 - 1e-8` on the paths when an ensemble is supplied).
pub fn compare<T: Real>(p1: &Problem<T>, p2: &Problem<T>, shared: &Shared<'_, T>) -> Result<CompareReport<T>> {
    let xs = shared.xgrid.points();
    for &x in &xs {
        let (a, b) = (p1.g.eval(x), p2.g.eval(x));
        if !(a >= b) {
            return Err(Error::Precondition(format!("g1 < g2 at x = {x}: g1 = {a}, g2 = {b}")));
        }
    }
    let m = 7;
    let b = shared.yz_box;
    let tg = shared.tgrid;
    for it in 0..m {
        let t = tg[it * (tg.len() - 1) / (m - 1)];
        for ix in 0..m {
            let x = xs[ix * (xs.len() - 1) / (m - 1)];
            for iy in 0..m {
                let y = -b + b * T::lit(2.0) * T::idx(iy) / T::idx(m - 1);
                for iz in 0..m {
                    let z = -b + b * T::lit(2.0) * T::idx(iz) / T::idx(m - 1);
                    let (a, c) = (p1.f.eval(t, x, y, z), p2.f.eval(t, x, y, z));
                    if !(a >= c) {
                        return Err(Error::Precondition(format!(
                            "f1 < f2 at (t, x, y, z) = ({t}, {x}, {y}, {z}): f1 = {a}, f2 = {c}"
                        )));
                    }
                }
            }
        }
    }
    let solve = |p: &Problem<T>| solve_semilinear_picard(&p.f, &p.g, shared.curve, shared.sigma, shared.tgrid, shared.xgrid, shared.picard);
    let u1 = solve(p1)?;
    let u2 = solve(p2)?;
    let slack = T::lit(COMPARISON_SLACK);
    let mut min_gap = T::infinity();
    let mut max_gap = T::neg_infinity();
    let mut violations = 0usize;
    for (a, c) in u1.u.iter().zip(&u2.u) {
        let d = *a - *c;
        min_gap = min_gap.min(d);
        max_gap = max_gap.max(d);
        if d < -slack {
            violations += 1;
        }
    }
    let mut rows = vec![
        ReportRow::new("min_u1_minus_u2", min_gap, -slack, violations == 0),
        ReportRow::new("max_u1_minus_u2", max_gap, T::zero(), true),
    ];
    let mut path_violations = None;
    if let Some(ens) = shared.ensemble {
        let y1 = build_yz(&u1, ens, shared.sigma)?;
        let y2 = build_yz(&u2, ens, shared.sigma)?;
        let mut bad = 0usize;
        let mut min_path = T::infinity();
        for (a, c) in y1.y.iter().zip(&y2.y) {
            min_path = min_path.min(*a - *c);
            if *a - *c < -slack {
                bad += 1;
            }
        }
        rows.push(ReportRow::new("min_path_y1_minus_y2", min_path, -slack, bad == 0));
        path_violations = Some(bad);
    }
    let pass = rows.iter().all(|r| r.pass);
    Ok(CompareReport {
        u1,
        u2,
        min_gap,
        max_gap,
        violations,
        path_violations,
        rows,
        pass,
    })
}

#[derive(Debug, Clone)]
pub struct DensityDiagnostic<T> {
    pub t: T,
    /// `u_x(t, N_t)^2 Var(N_t)` per path.
    pub malliavin_sq: Vec<T>,
    pub min_over_paths: T,
    /// `min > 1e-6 mean`: the non-degeneracy hypothesis looks satisfied.
    pub nondegenerate: bool,
    /// Silverman's rule of thumb for `Y_t`.
    pub kde_bandwidth: T,
    /// Largest atom of the empirical CDF of `Y_t`: largest tie count / n.
    pub max_cdf_jump: T,
    /// `max_cdf_jump <= 5 / n`.
    pub continuity_not_rejected: bool,
}

/// Non-degeneracy and atom diagnostics for the law of `Y_t`.
pub fn density_diagnostic<T: Real>(sol: &PdeSolution<T>, ensemble: &PathEnsemble<T>, curve: &VarianceCurve<T>, t: T) -> Result<DensityDiagnostic<T>> {
    let t0 = sol.tgrid[0];
    let horizon = sol.tgrid[sol.tgrid.len() - 1];
    if !(t > t0 && t < horizon) {
        return Err(Error::Domain(format!("density diagnostic needs t in ({t0}, {horizon}), got {t}")));
    }
    let i = ensemble.grid.index_of(t)?;
    let v = curve.var_at(t);
    if !(v > T::zero()) {
        return Err(Error::Domain(format!("Var(N_t) = {v} must be positive")));
    }
    let n = ensemble.n_paths;
    let col = ensemble.n_column(i);
    let malliavin_sq: Vec<T> = col
        .iter()
        .map(|&x| {
            let d = sol.ux_interp(t, x);
            d * d * v
        })
        .collect();
    let min_over_paths = malliavin_sq.iter().copied().fold(T::infinity(), T::min);
    let mean = stats::mean(&malliavin_sq);
    let mut ys: Vec<T> = col.iter().map(|&x| sol.u_interp(t, x)).collect();
    ys.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mut best = 1usize;
    let mut run = 1usize;
    for w in ys.windows(2) {
        if w[1] == w[0] {
            run += 1;
            best = best.max(run);
        } else {
            run = 1;
        }
    }
    let max_cdf_jump = T::idx(best) / T::idx(n);
    let sd = stats::variance(&ys).sqrt();
    let q = |p: f64| ys[((p * (n - 1) as f64).round() as usize).min(n - 1)];
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > T::zero() { sd.min(iqr / T::lit(1.34)) } else { sd };
    let kde_bandwidth = T::lit(1.06) * spread * T::idx(n).powf(T::lit(-0.2));
    Ok(DensityDiagnostic {
        t,
        malliavin_sq,
        min_over_paths,
        nondegenerate: min_over_paths > T::lit(1e-6) * mean,
        kde_bandwidth,
        max_cdf_jump,
        continuity_not_rejected: max_cdf_jump <= T::lit(5.0) / T::idx(n),
    })
}
