use std::time::Instant;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volterra_bsde::kernels::{kernel_eval, Kernel, KernelSpec};
use volterra_bsde::operators::{
    covariance_r, kstar_apply, phi_eval, phi_tilde_eval, transfer_identity_check, variance_curve, variance_double_integral,
    variance_l2, Indicator, SingularQuadRule, VarianceCurve, Volatility,
};
use volterra_bsde::{Error, Expr};

fn fbm() -> KernelSpec<f64> {
    KernelSpec::fbm(0.75, 1.0).unwrap()
}

fn liouville() -> KernelSpec<f64> {
    KernelSpec::liouville_fbm(0.75, 1.0).unwrap()
}

fn mbm() -> KernelSpec<f64> {
    KernelSpec::mbm(Expr::parse("0.7 + 0.1*sin(3*t)").unwrap(), 1.0).unwrap()
}

fn rule() -> SingularQuadRule<f64> {
    SingularQuadRule::default()
}

/// Closed-form fBm quantities with `H = 3/4`.
fn fbm_phi(r: f64, s: f64) -> f64 {
    0.75 * 0.5 * (r - s).abs().powf(-0.5)
}

fn fbm_cov(t: f64, s: f64) -> f64 {
    0.5 * (t.powf(1.5) + s.powf(1.5) - (t - s).abs().powf(1.5))
}

fn uniform(n: usize, horizon: f64) -> Vec<f64> {
    (0..=n).map(|i| horizon * i as f64 / n as f64).collect()
}

#[test]
fn kstar_closed_forms() {
    let one = Volatility::Constant(1.0);
    let v = kstar_apply(&liouville(), &one, 1.0, 0.5, &rule()).unwrap();
    assert!((v - 0.5f64.powf(0.25)).abs() < 1e-8, "{v}");
    assert!((v - 0.840_896).abs() < 1e-6);
    let v = kstar_apply(&liouville(), &one, 1.0, 0.5, &SingularQuadRule::extraction()).unwrap();
    assert!((v - 0.5f64.powf(0.25)).abs() < 1e-12);
    // sigma = 1 on [0, r]: K*_t sigma = K(r, u)
    for k in [fbm(), liouville(), mbm()] {
        for &(r, u) in &[(0.8, 0.3), (0.5, 0.49), (0.9, 0.01)] {
            let lhs = kstar_apply(&k, &Indicator { r }, 1.0, u, &rule()).unwrap();
            let rhs = kernel_eval(&k, r, u).unwrap();
            assert!((lhs - rhs).abs() < 1e-6, "{}: {lhs} vs {rhs}", k.id());
        }
    }
    assert!(matches!(kstar_apply(&fbm(), &one, 0.5, 0.7, &rule()), Err(Error::Domain(_))));
}

#[test]
fn kstar_rules_agree_for_table_sigma() {
    let sigma = Volatility::table(vec![0.0, 0.3, 0.6], vec![1.0, 0.5, 2.0]).unwrap();
    for k in [fbm(), mbm()] {
        let a = kstar_apply(&k, &sigma, 0.9, 0.2, &rule()).unwrap();
        let b = kstar_apply(&k, &sigma, 0.9, 0.2, &SingularQuadRule::extraction()).unwrap();
        // telescoped closed form over the pieces
        let e = |t: f64| kernel_eval(&k, t, 0.2).unwrap();
        let c = 1.0 * e(0.3) + 0.5 * (e(0.6) - e(0.3)) + 2.0 * (e(0.9) - e(0.6));
        assert!((a - c).abs() < 1e-7 && (b - c).abs() < 1e-7, "{a} {b} {c}");
    }
}

#[test]
fn phi_against_closed_form() {
    let v = phi_eval(&fbm(), 1.0, 0.5, &rule()).unwrap();
    assert!((v - 0.530_330_085_889_910_6).abs() < 1e-6, "{v}");
    let vt = phi_tilde_eval(&fbm(), 1.0, 0.5, &rule()).unwrap();
    assert!((vt - v).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let r: f64 = rng.random_range(0.01..1.0);
        let s: f64 = rng.random_range(0.01..1.0);
        if (r - s).abs() < 1e-6 {
            continue;
        }
        let v = phi_eval(&fbm(), r, s, &rule()).unwrap();
        let e = fbm_phi(r, s);
        assert!(((v - e) / e).abs() < 1e-4, "phi({r},{s}) = {v} vs {e}");
    }
}

#[test]
fn phi_near_and_on_the_diagonal() {
    let v = phi_eval(&liouville(), 0.5, 0.501, &rule()).unwrap();
    assert!(v.is_finite() && v > 0.0);
    assert!(matches!(phi_eval(&liouville(), 0.5, 0.5, &rule()), Err(Error::Domain(_))));
}

#[test]
fn phi_symmetry_and_tilde_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in [mbm(), liouville()] {
        for _ in 0..20 {
            let r: f64 = rng.random_range(0.05..1.0);
            let s: f64 = rng.random_range(0.05..1.0);
            let a = phi_eval(&k, r, s, &rule()).unwrap();
            let b = phi_eval(&k, s, r, &rule()).unwrap();
            assert!(((a - b) / a).abs() < 1e-10);
            let ta = phi_tilde_eval(&k, r, s, &rule()).unwrap();
            let tb = phi_tilde_eval(&k, s, r, &rule()).unwrap();
            assert!(ta >= a.abs() * (1.0 - 1e-12));
            assert!(((ta - tb) / ta).abs() < 1e-10);
        }
    }
}

#[test]
fn covariance_closed_forms() {
    let k = fbm();
    assert_eq!(covariance_r(&k, 0.7, 0.0, &rule()).unwrap(), 0.0);
    let v = covariance_r(&k, 1.0, 0.5, &rule()).unwrap();
    assert!(((v - 0.5) / 0.5).abs() < 1e-4, "{v}");
    let v = covariance_r(&k, 1.0, 1.0, &rule()).unwrap();
    assert!((v - 1.0).abs() < 1e-4, "{v}");
    for &(t, s) in &[(0.3, 0.9), (0.77, 0.76), (0.05, 1.0)] {
        let v = covariance_r(&k, t, s, &rule()).unwrap();
        assert!(((v - fbm_cov(t, s)) / fbm_cov(t, s)).abs() < 1e-4);
    }
    let v = covariance_r(&liouville(), 1.0, 1.0, &rule()).unwrap();
    assert!((v - 2.0 / 3.0).abs() < 1e-8);
}

#[test]
fn variance_curves_hit_closed_forms() {
    let one = Volatility::Constant(1.0);
    let grid = uniform(256, 1.0);
    let start = Instant::now();
    let c = variance_curve(&fbm(), &one, &grid, &rule()).unwrap();
    let elapsed = start.elapsed();
    let last = *c.var.last().unwrap();
    assert!((last - 1.0).abs() < 1e-3, "{last}");
    assert_eq!(c.var[0], 0.0);
    for (t, v) in grid.iter().zip(&c.var) {
        assert!((v - t.powf(1.5)).abs() < 1e-6, "Var({t}) = {v}");
    }
    assert!(elapsed.as_secs_f64() < 10.0, "{elapsed:?}");
    assert!(c.reconstruction_error() <= 1e-6, "{} {:?}", c.reconstruction_error(), &c.rate[..4]);
    // rate oracle 1.5 sqrt(t), away from the origin where the spline cannot see sqrt
    for i in (32..256).step_by(16) {
        let t = grid[i];
        assert!((c.rate[i] - 1.5 * t.sqrt()).abs() < 1e-3, "rate({t}) = {}", c.rate[i]);
    }
    let c = variance_curve(&liouville(), &one, &grid, &rule()).unwrap();
    assert!((c.var.last().unwrap() - 2.0 / 3.0).abs() < 1e-8);
}

#[test]
fn variance_two_routes_agree() {
    let grid = uniform(8, 1.0);
    let sigma = Volatility::table(vec![0.0, 0.4], vec![1.0, 1.5]).unwrap();
    for k in [fbm(), liouville(), mbm()] {
        let a: Vec<f64> = grid.iter().map(|&t| variance_l2(&k, &sigma, t, &rule()).unwrap()).collect();
        let b = variance_double_integral(&k, &sigma, &grid[1..], &rule()).unwrap();
        let top = a[8];
        for i in 1..=8 {
            assert!((a[i] - b[i - 1]).abs() <= 1e-4 * top, "{}: t = {} {} vs {}", k.id(), grid[i], a[i], b[i - 1]);
        }
    }
}

#[test]
fn curve_errors() {
    let grid = vec![0.0, 0.5, 1.0];
    assert!(matches!(VarianceCurve::from_values(grid.clone(), vec![0.0, 0.5, 0.5]), Err(Error::Positivity { .. })));
    let bad = vec![0.0, 0.3, 0.2, 1.0];
    assert!(matches!(
        variance_curve(&fbm(), &Volatility::Constant(1.0), &bad, &rule()),
        Err(Error::InvalidParameter(_))
    ));
}

#[test]
fn transfer_identity() {
    let grid = uniform(99, 1.0);
    let rep = transfer_identity_check(&liouville(), 1.0, &grid, &rule()).unwrap();
    assert!(rep.max_abs_dev <= 1e-6, "{}", rep.max_abs_dev);
    assert_eq!(rep.points.len(), 100);
    let rep = transfer_identity_check(&fbm(), 0.8, &grid, &rule()).unwrap();
    assert!(rep.pass, "scaled deviation {}", rep.max_scaled_dev);
    for &(t, l, r) in &rep.points {
        if t >= 0.8 {
            assert_eq!((l, r), (0.0, 0.0));
        }
    }
}

#[test]
fn graded_rule_converges_at_least_first_order() {
    // K* of sigma = 1 for Liouville equals (t - u)^a; error with a fixed
    // ungraded rule against the graded one
    let k = liouville();
    let exact = 0.5f64.powf(0.25);
    let coarse = SingularQuadRule { n_nodes: 1, max_panels: 4, ..rule() }.with_tolerance(1.0, 1.0);
    let v = kstar_apply(&k, &Volatility::Constant(1.0), 1.0, 0.5, &coarse).unwrap();
    assert!((v - exact).abs() < 1e-10, "{v}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn kstar_of_indicator_is_the_kernel(r in 0.05f64..1.0, frac in 0.0f64..0.999) {
        let u = r * frac;
        prop_assume!(u > 0.0);
        for k in [fbm(), liouville()] {
            let lhs = kstar_apply(&k, &Indicator { r }, 1.0, u, &rule()).unwrap();
            let rhs = kernel_eval(&k, r, u).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-6);
        }
    }

    #[test]
    fn covariance_is_symmetric(t in 0.0f64..1.0, s in 0.0f64..1.0) {
        let k = mbm();
        let a = covariance_r(&k, t, s, &rule()).unwrap();
        let b = covariance_r(&k, s, t, &rule()).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}
