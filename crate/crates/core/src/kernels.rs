//! Volterra kernels `K(t, s)` (zero for `t <= s`) and their regularity
//! certificates.
//!
//! Shipped families, with `a = H - 1/2`:
//!
//! | id              | `K(t, s)`                                          | `(alpha, beta, c)`            |
//! |-----------------|----------------------------------------------------|-------------------------------|
//! | `liouville_fbm` | `(t - s)^a`                                        | `(a, 0, a)`                   |
//! | `fbm`           | `c_H s^-a int_s^t (u - s)^(a-1) u^a du`            | `(a, a, c_H)`                 |
//! | `mbm`           | `(t - s)^(H(t) - 1/2)`                             | see [`KernelSpec::documented_regularity`] |
//!
//! with `c_H = sqrt(H (2H - 1) / B(2 - 2H, H - 1/2))`, which normalises the
//! `fbm` kernel so that `int_0^t K(t, u)^2 du = t^(2H)`.
//!
//! The bound certified by [`certify_h2`] is
//! `|dK/dt(t, s)| <= c (t - s)^(alpha - 1) (t / s)^beta` on `0 < s < t <= T`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::expr::{Expr, Var, Vars};
use crate::quad::{self, Ends, GaussLegendre, Tolerance};
use crate::scalar::{beta_fn, Real};

/// Admissible range for a (possibly time dependent) Hurst exponent.
pub const HURST_MIN: f64 = 0.51;
pub const HURST_MAX: f64 = 0.99;

/// Relative width of the diagonal band excluded from [`kernel_dt`].
pub const DIAGONAL_BAND: f64 = 1e-10;

/// Interface every kernel used by the operators implements.
///
/// `eval_gap` and `dt_gap` receive the gap `t - s > 0` separately so that
/// quadrature rules can pass it without cancellation.
pub trait Kernel<T: Real>: Send + Sync {
    fn horizon(&self) -> T;

    /// `K(t, s)` for `t > s`; `gap = t - s`.
    fn eval_gap(&self, t: T, s: T, gap: T) -> T;

    /// `dK/dt(t, s)` for `t > s`; `gap = t - s`.
    fn dt_gap(&self, t: T, s: T, gap: T) -> T;

    /// Exponent `alpha` in `K(t, s) ~ (t - s)^alpha` near the diagonal at `t`.
    fn local_alpha(&self, t: T) -> T;

    /// Exponent `beta` of the `(t / s)^beta` factor.
    fn beta(&self) -> T {
        T::zero()
    }

    fn id(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    LiouvilleFBm,
    FBm,
    Multifractional,
}

impl Family {
    pub fn id(self) -> &'static str {
        match self {
            Family::LiouvilleFBm => "liouville_fbm",
            Family::FBm => "fbm",
            Family::Multifractional => "mbm",
        }
    }

    pub fn from_id(s: &str) -> Option<Self> {
        match s {
            "liouville_fbm" => Some(Family::LiouvilleFBm),
            "fbm" => Some(Family::FBm),
            "mbm" => Some(Family::Multifractional),
            _ => None,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone)]
enum Shape<T> {
    Liouville { a: T },
    FBm { a: T, c_h: T, gl: Arc<GaussLegendre<T>> },
    Mbm { hurst: Arc<Expr>, stats: MbmStats<T> },
}

#[derive(Debug, Clone, Copy)]
struct MbmStats<T> {
    h_min: T,
    h_max: T,
    dh_max: T,
}

/// A kernel from the shipped catalog. Immutable after construction.
#[derive(Debug, Clone)]
pub struct KernelSpec<T> {
    family: Family,
    horizon: T,
    shape: Shape<T>,
}

impl<T: Real> KernelSpec<T> {
    pub fn liouville_fbm(hurst: T, horizon: T) -> Result<Self> {
        check_hurst(hurst)?;
        check_horizon(horizon)?;
        Ok(Self {
            family: Family::LiouvilleFBm,
            horizon,
            shape: Shape::Liouville {
                a: hurst - T::lit(0.5),
            },
        })
    }

    pub fn fbm(hurst: T, horizon: T) -> Result<Self> {
        check_hurst(hurst)?;
        check_horizon(horizon)?;
        let a = hurst - T::lit(0.5);
        let c_h = (hurst * (T::lit(2.0) * hurst - T::one()) / beta_fn(T::lit(2.0) - T::lit(2.0) * hurst, a)).sqrt();
        Ok(Self {
            family: Family::FBm,
            horizon,
            shape: Shape::FBm {
                a,
                c_h,
                gl: Arc::new(GaussLegendre::new(quad::PANEL_ORDER)),
            },
        })
    }

    /// Multifractional kernel with Hurst function `H(t)` given as an
    /// expression in `t`. `H` must stay in `[0.51, 0.99]` on `[0, T]`.
    pub fn mbm(hurst_fn: Expr, horizon: T) -> Result<Self> {
        check_horizon(horizon)?;
        if hurst_fn.uses(Var::X) || hurst_fn.uses(Var::Y) || hurst_fn.uses(Var::Z) {
            return Err(Error::InvalidParameter(format!(
                "hurst_fn `{}` may only depend on t",
                hurst_fn.source()
            )));
        }
        let n = 1000;
        let mut h_min = T::infinity();
        let mut h_max = T::neg_infinity();
        let mut dh_max = T::zero();
        for i in 0..=n {
            let t = horizon * T::idx(i) / T::idx(n);
            let (h, dh) = hurst_fn.eval_diff(&Vars::new(t, T::zero(), T::zero(), T::zero()), Var::T);
            if !(h.is_finite() && dh.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "hurst_fn `{}` is not finite at t = {t}",
                    hurst_fn.source()
                )));
            }
            if h < T::lit(HURST_MIN) || h > T::lit(HURST_MAX) {
                return Err(Error::InvalidParameter(format!(
                    "hurst_fn `{}` = {h} at t = {t} leaves [{HURST_MIN}, {HURST_MAX}]",
                    hurst_fn.source()
                )));
            }
            h_min = h_min.min(h);
            h_max = h_max.max(h);
            dh_max = dh_max.max(dh.abs());
        }
        Ok(Self {
            family: Family::Multifractional,
            horizon,
            shape: Shape::Mbm {
                hurst: Arc::new(hurst_fn),
                stats: MbmStats { h_min, h_max, dh_max },
            },
        })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    /// Constant Hurst exponent, or the minimum of `H(t)` for `mbm`.
    pub fn hurst_min(&self) -> T {
        match &self.shape {
            Shape::Liouville { a } | Shape::FBm { a, .. } => *a + T::lit(0.5),
            Shape::Mbm { stats, .. } => stats.h_min,
        }
    }

    pub fn hurst_at(&self, t: T) -> T {
        match &self.shape {
            Shape::Liouville { a } | Shape::FBm { a, .. } => *a + T::lit(0.5),
            Shape::Mbm { hurst, .. } => hurst.eval(&Vars::new(t, T::zero(), T::zero(), T::zero())),
        }
    }

    /// Normalisation `c_H` of the `fbm` family.
    pub fn fbm_constant(&self) -> Option<T> {
        match &self.shape {
            Shape::FBm { c_h, .. } => Some(*c_h),
            _ => None,
        }
    }

    /// The `(alpha, beta, c)` triple each family is certified with.
    ///
    /// For `mbm`, with `h = H - 1/2`:
    /// `|dK/dt| <= gap^(h-1) (h + |H'| gap |ln gap|)`, so
    /// `alpha = H_min - 1/2 - 1e-3`, `beta = 0` and
    /// `c = 1.05 max(1, T)^(H_max - H_min + 1e-3) (H_max - 1/2 + max|H'| m(T))`
    /// with `m(T) = sup_{0 < d <= T} d |ln d|`. Extrema come from 1000 samples;
    /// the 5% slack covers the sampling.
    pub fn documented_regularity(&self) -> (T, T, T) {
        match &self.shape {
            Shape::Liouville { a } => (*a, T::zero(), *a),
            Shape::FBm { a, c_h, .. } => (*a, *a, *c_h),
            Shape::Mbm { stats, .. } => {
                let margin = T::lit(1e-3);
                let half = T::lit(0.5);
                let alpha = stats.h_min - half - margin;
                let t = self.horizon;
                let e_inv = T::one() / T::E();
                let m = if t >= e_inv {
                    e_inv.max(t * t.ln())
                } else {
                    t * t.ln().abs()
                };
                let growth = t.max(T::one()).powf(stats.h_max - stats.h_min + margin);
                let c = T::lit(1.05) * growth * (stats.h_max - half + stats.dh_max * m);
                (alpha, T::zero(), c)
            }
        }
    }
}

fn check_hurst<T: Real>(h: T) -> Result<()> {
    if !(h > T::lit(0.5) && h < T::one()) {
        return Err(Error::InvalidParameter(format!("hurst = {h} must lie strictly inside (1/2, 1)")));
    }
    Ok(())
}

fn check_horizon<T: Real>(t: T) -> Result<()> {
    if !(t > T::zero() && t.is_finite()) {
        return Err(Error::InvalidParameter(format!("horizon T = {t} must be positive and finite")));
    }
    Ok(())
}

impl<T: Real> Kernel<T> for KernelSpec<T> {
    fn horizon(&self) -> T {
        self.horizon
    }

    fn eval_gap(&self, t: T, s: T, gap: T) -> T {
        match &self.shape {
            Shape::Liouville { a } => gap.powf(*a),
            Shape::FBm { a, c_h, gl } => *c_h * fbm_integral(*a, s, gap, gl),
            Shape::Mbm { hurst, .. } => {
                let h = hurst.eval(&Vars::new(t, T::zero(), T::zero(), T::zero()));
                gap.powf(h - T::lit(0.5))
            }
        }
    }

    fn dt_gap(&self, t: T, s: T, gap: T) -> T {
        match &self.shape {
            Shape::Liouville { a } => *a * gap.powf(*a - T::one()),
            Shape::FBm { a, c_h, .. } => *c_h * (t / s).powf(*a) * gap.powf(*a - T::one()),
            Shape::Mbm { hurst, .. } => {
                let (h, dh) = hurst.eval_diff(&Vars::new(t, T::zero(), T::zero(), T::zero()), Var::T);
                let e = h - T::lit(0.5);
                gap.powf(e) * (e / gap + dh * gap.ln())
            }
        }
    }

    fn local_alpha(&self, t: T) -> T {
        match &self.shape {
            Shape::Liouville { a } | Shape::FBm { a, .. } => *a,
            Shape::Mbm { hurst, .. } => hurst.eval(&Vars::new(t, T::zero(), T::zero(), T::zero())) - T::lit(0.5),
        }
    }

    fn beta(&self) -> T {
        match &self.shape {
            Shape::FBm { a, .. } => *a,
            _ => T::zero(),
        }
    }

    fn id(&self) -> String {
        match &self.shape {
            Shape::Liouville { a } | Shape::FBm { a, .. } => {
                format!("{}(H={},T={})", self.family, (*a + T::lit(0.5)).f64(), self.horizon.f64())
            }
            Shape::Mbm { hurst, .. } => format!("mbm(H={},T={})", hurst.canonical(), self.horizon.f64()),
        }
    }
}

/// `s^-a int_s^{s+gap} (u - s)^(a-1) u^a du`; infinite at `s = 0`.
fn fbm_integral<T: Real>(a: T, s: T, gap: T, gl: &GaussLegendre<T>) -> T {
    if s <= T::zero() {
        return T::infinity();
    }
    let f = |_u: T, dl: T, _dr: T| dl.powf(a - T::one()) * ((s + dl) / s).powf(a);
    let ends = Ends::left(a - T::one()).with_left_offset(s);
    quad::integrate(&f, s, gap, ends, 6, gl)
}

fn check_point<T: Real, K: Kernel<T> + ?Sized>(kernel: &K, t: T, s: T) -> Result<()> {
    let top = kernel.horizon() * (T::one() + T::lit(16.0) * T::epsilon());
    for (name, v) in [("t", t), ("s", s)] {
        if !v.is_finite() || v < T::zero() || v > top {
            return Err(Error::Domain(format!(
                "{name} = {v} outside [0, {}]",
                kernel.horizon()
            )));
        }
    }
    Ok(())
}

/// `K(t, s)`, exactly zero for `t <= s`.
///
/// For `fbm`, `K(t, 0) = +inf` (the `s^-a` factor); the singularity is
/// square integrable and every operator integrates around it.
pub fn kernel_eval<T: Real, K: Kernel<T> + ?Sized>(kernel: &K, t: T, s: T) -> Result<T> {
    check_point(kernel, t, s)?;
    if t <= s {
        return Ok(T::zero());
    }
    Ok(kernel.eval_gap(t, s, t - s))
}

/// `dK/dt(t, s)` for `0 < s < t <= T`, off a diagonal band of width `1e-10 T`.
pub fn kernel_dt<T: Real, K: Kernel<T> + ?Sized>(kernel: &K, t: T, s: T) -> Result<T> {
    check_point(kernel, t, s)?;
    if s <= T::zero() {
        return Err(Error::Domain(format!("dK/dt needs s > 0, got s = {s}")));
    }
    let gap = t - s;
    if gap < T::lit(DIAGONAL_BAND) * kernel.horizon() {
        return Err(Error::Domain(format!("dK/dt undefined for t = {t} <= s = {s} (or within the diagonal band)")));
    }
    Ok(kernel.dt_gap(t, s, gap))
}

/// Halton point `(radical inverse base 2, base 3)` with index `i >= 1`.
pub fn halton2(i: usize) -> (f64, f64) {
    (radical_inverse(i, 2), radical_inverse(i, 3))
}

fn radical_inverse(mut i: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

#[derive(Debug, Clone)]
pub struct RegularityCert<T> {
    pub alpha: T,
    pub beta: T,
    pub c: T,
    pub grid_checked: String,
    pub max_ratio: T,
    /// Sample `(t, s)` attaining `max_ratio`.
    pub worst: (T, T),
    pub valid: bool,
}

/// Checks the bound `|dK/dt| <= c (t - s)^(alpha - 1) (t / s)^beta` on
/// `n_samples` Halton points of `{0 < s < t <= T}`.
///
/// A failed bound is reported in the certificate (`valid = false`, `worst`),
/// not as an error.
pub fn certify_h2<T: Real, K: Kernel<T> + ?Sized>(
    kernel: &K,
    alpha: T,
    beta: T,
    c: T,
    n_samples: usize,
) -> Result<RegularityCert<T>> {
    if n_samples < 100 {
        return Err(Error::InvalidParameter(format!("n_samples = {n_samples} < 100")));
    }
    let half = T::lit(0.5);
    if !(alpha > T::zero() && alpha < half && beta >= T::zero() && beta < half && c > T::zero()) {
        return Err(Error::InvalidParameter(format!(
            "(alpha, beta, c) = ({alpha}, {beta}, {c}) outside (0, 1/2) x [0, 1/2) x (0, inf)"
        )));
    }
    let horizon = kernel.horizon();
    let band = T::lit(DIAGONAL_BAND) * horizon;
    let mut max_ratio = T::zero();
    let mut worst = (T::zero(), T::zero());
    let mut checked = 0usize;
    let mut i = 0usize;
    while checked < n_samples {
        i += 1;
        let (x, y) = halton2(i);
        let t = horizon * T::lit(x);
        let s = t * T::lit(y);
        let gap = t * T::lit(1.0 - y);
        if s <= T::zero() || gap < band {
            continue;
        }
        checked += 1;
        let d = kernel.dt_gap(t, s, gap).abs();
        let bound = c * gap.powf(alpha - T::one()) * (t / s).powf(beta);
        let ratio = d / bound;
        if ratio > max_ratio || !ratio.is_finite() {
            max_ratio = ratio;
            worst = (t, s);
        }
    }
    let tol = T::one() + T::lit(1e-12).max(T::epsilon() * T::lit(64.0));
    Ok(RegularityCert {
        alpha,
        beta,
        c,
        grid_checked: format!(
            "{n_samples} Halton(2,3) points t = T x, s = t y on 0 < s < t <= T = {horizon}, t - s >= {DIAGONAL_BAND:e} T"
        ),
        max_ratio,
        worst,
        valid: max_ratio.is_finite() && max_ratio <= tol,
    })
}

#[derive(Debug, Clone)]
pub struct InjectivityCert<T> {
    pub t0: T,
    /// `(s, Ktilde_{t0}(s))` pairs.
    pub samples: Vec<(T, T)>,
    pub sign_definite: bool,
}

/// `Ktilde_{t0}(s) = int_{t0}^s dK/ds(s, u) du` on `n_samples` equispaced
/// points `s` in `(t0, T]`.
///
/// A strict common sign is a sufficient condition for the adjoint operator
/// to be injective; it is not claimed to be necessary.
pub fn injectivity_certificate<T: Real, K: Kernel<T> + ?Sized>(
    kernel: &K,
    t0: T,
    n_samples: usize,
    tol: Tolerance<T>,
) -> Result<InjectivityCert<T>> {
    let horizon = kernel.horizon();
    if !(t0 >= T::zero() && t0 < horizon) {
        return Err(Error::Domain(format!("t0 = {t0} outside [0, {horizon})")));
    }
    if n_samples == 0 {
        return Err(Error::InvalidParameter("n_samples must be positive".into()));
    }
    let mut samples = Vec::with_capacity(n_samples);
    for k in 1..=n_samples {
        let s = t0 + (horizon - t0) * T::idx(k) / T::idx(n_samples);
        let len = s - t0;
        let left_exp = if t0 == T::zero() { -kernel.beta() } else { T::zero() };
        let ends = Ends::both(left_exp, kernel.local_alpha(s) - T::one());
        let f = |u: T, _dl: T, dr: T| kernel.dt_gap(s, u, dr);
        let v = quad::integrate_adaptive(&f, t0, len, ends, 4, 1024, tol, "injectivity integral")?;
        samples.push((s, v));
    }
    let all_pos = samples.iter().all(|&(_, v)| v > T::zero());
    let all_neg = samples.iter().all(|&(_, v)| v < T::zero());
    Ok(InjectivityCert {
        t0,
        samples,
        sign_definite: all_pos || all_neg,
    })
}
