use proptest::prelude::*;
use volterra_bsde::kernels::{self, certify_h2, injectivity_certificate, kernel_dt, kernel_eval, Kernel, KernelSpec};
use volterra_bsde::quad::Tolerance;
use volterra_bsde::{Error, Expr};

/// fBm kernel by substitution `y = (u - s)^a`, which removes the endpoint
/// singularity, followed by composite Simpson with many intervals.
fn fbm_kernel_oracle(h: f64, t: f64, s: f64) -> f64 {
    let a = h - 0.5;
    let g = statrs::function::gamma::gamma;
    let beta = g(2.0 - 2.0 * h) * g(a) / g(2.0 - 2.0 * h + a);
    let c_h = (h * (2.0 * h - 1.0) / beta).sqrt();
    let top = (t - s).powf(a);
    let n = 200_000;
    let dy = top / n as f64;
    let f = |y: f64| (s + y.powf(1.0 / a)).powf(a);
    let mut acc = f(0.0) + f(top);
    for i in 1..n {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * dy);
    }
    c_h * s.powf(-a) * acc * dy / 3.0 / a
}

#[test]
fn liouville_values() {
    let k = KernelSpec::<f64>::liouville_fbm(0.75, 1.0).unwrap();
    assert_eq!(kernel_eval(&k, 0.5, 1.0).unwrap(), 0.0);
    let v = kernel_eval(&k, 1.0, 0.5).unwrap();
    assert!((v - 0.840_896_415_253_714_6).abs() < 1e-15);
    let d = kernel_dt(&k, 1.0, 0.5).unwrap();
    assert!((d - 0.25 * 0.5f64.powf(-0.75)).abs() < 1e-15);
    assert!((d - 0.420_448_207_626_857_3).abs() < 1e-15);
}

#[test]
fn fbm_value_matches_substitution_oracle() {
    let k = KernelSpec::<f64>::fbm(0.75, 1.0).unwrap();
    for &(t, s) in &[(1.0, 0.5), (1.0, 1e-4), (0.3, 0.299), (0.9, 0.05)] {
        let v = kernel_eval(&k, t, s).unwrap();
        let o = fbm_kernel_oracle(0.75, t, s);
        assert!((v - o).abs() <= 1e-8 * o.abs().max(1.0), "({t},{s}): {v} vs {o}");
    }
}

#[test]
fn fbm_derivative_matches_finite_differences() {
    let k = KernelSpec::<f64>::fbm(0.75, 1.0).unwrap();
    let h = 1e-6;
    let fd = (kernel_eval(&k, 1.0, 0.5).unwrap() - kernel_eval(&k, 1.0 - 2.0 * h, 0.5).unwrap()) / (2.0 * h);
    // derivative at the midpoint 1 - h
    let d = kernel_dt(&k, 1.0 - h, 0.5).unwrap();
    assert!(((fd - d) / d).abs() < 1e-4, "{fd} vs {d}");
    let c = k.fbm_constant().unwrap();
    assert!((kernel_dt(&k, 1.0, 0.5).unwrap() - c * 2f64.powf(0.25) * 0.5f64.powf(-0.75)).abs() < 1e-14);
}

#[test]
fn derivative_domain_errors() {
    for k in shipped() {
        assert!(matches!(kernel_dt(&k, 0.5, 1.0), Err(Error::Domain(_))));
        assert!(matches!(kernel_dt(&k, 0.5, 0.5), Err(Error::Domain(_))));
        assert!(matches!(kernel_dt(&k, 0.5, 0.5 - 1e-12), Err(Error::Domain(_))));
        assert!(matches!(kernel_eval(&k, 2.5, 0.5), Err(Error::Domain(_))));
        assert!(matches!(kernel_eval(&k, f64::NAN, 0.5), Err(Error::Domain(_))));
        assert!(matches!(kernel_eval(&k, 0.5, -0.1), Err(Error::Domain(_))));
    }
}

fn shipped() -> Vec<KernelSpec<f64>> {
    vec![
        KernelSpec::liouville_fbm(0.75, 1.0).unwrap(),
        KernelSpec::fbm(0.75, 1.0).unwrap(),
        KernelSpec::fbm(0.6, 2.0).unwrap(),
        KernelSpec::mbm(Expr::parse("0.7 + 0.1*sin(3*t)").unwrap(), 1.0).unwrap(),
    ]
}

#[test]
fn documented_certificates_are_valid() {
    for k in shipped() {
        let (a, b, c) = k.documented_regularity();
        let cert = certify_h2(&k, a, b, c, 10_000).unwrap();
        assert!(cert.valid, "{}: max ratio {} at {:?}", k.id(), cert.max_ratio, cert.worst);
    }
}

#[test]
fn liouville_bound_is_an_identity() {
    let k = KernelSpec::<f64>::liouville_fbm(0.75, 1.0).unwrap();
    let cert = certify_h2(&k, 0.25, 0.0, 0.25, 10_000).unwrap();
    assert!(cert.valid);
    assert!(cert.max_ratio <= 1.0 + 1e-12 && cert.max_ratio > 1.0 - 1e-12);
}

#[test]
fn fbm_bound_is_an_identity() {
    let k = KernelSpec::<f64>::fbm(0.75, 1.0).unwrap();
    let (a, b, c) = k.documented_regularity();
    assert_eq!((a, b), (0.25, 0.25));
    let cert = certify_h2(&k, a, b, c, 1000).unwrap();
    assert!((cert.max_ratio - 1.0).abs() < 1e-12);
}

#[test]
fn too_large_alpha_fails_near_the_diagonal() {
    let k = KernelSpec::<f64>::liouville_fbm(0.75, 1.0).unwrap();
    let cert = certify_h2(&k, 0.4, 0.0, 0.25, 10_000).unwrap();
    assert!(!cert.valid);
    let (t, s) = cert.worst;
    // the ratio (t - s)^(-0.15) is largest for the closest pair
    assert!(t - s < 1e-3, "worst pair {t}, {s}");
    assert!(certify_h2(&k, 0.25, 0.0, 0.25, 50).is_err());
}

/// `K(t, s) = (t - s)^a (1 - 2 t / T)`: changes sign at `t = T / 2`.
struct SignChanging {
    a: f64,
    horizon: f64,
}

impl Kernel<f64> for SignChanging {
    fn horizon(&self) -> f64 {
        self.horizon
    }
    fn eval_gap(&self, t: f64, _s: f64, gap: f64) -> f64 {
        gap.powf(self.a) * (1.0 - 2.0 * t / self.horizon)
    }
    fn dt_gap(&self, t: f64, _s: f64, gap: f64) -> f64 {
        self.a * gap.powf(self.a - 1.0) * (1.0 - 2.0 * t / self.horizon) - 2.0 / self.horizon * gap.powf(self.a)
    }
    fn local_alpha(&self, _t: f64) -> f64 {
        self.a
    }
    fn id(&self) -> String {
        "sign_changing".into()
    }
}

#[test]
fn injectivity_certificates() {
    let tol = Tolerance::default();
    let k = KernelSpec::<f64>::liouville_fbm(0.75, 1.0).unwrap();
    let c = injectivity_certificate(&k, 0.0, 50, tol).unwrap();
    assert!(c.sign_definite);
    // closed form: int_0^s a (s - u)^(a-1) du = s^a
    for &(s, v) in &c.samples {
        assert!((v - s.powf(0.25)).abs() < 1e-7, "{s}: {v}");
    }
    let k = KernelSpec::<f64>::fbm(0.75, 1.0).unwrap();
    assert!(injectivity_certificate(&k, 0.1, 50, tol).unwrap().sign_definite);
    let bad = SignChanging { a: 0.25, horizon: 1.0 };
    let c = injectivity_certificate(&bad, 0.0, 50, tol).unwrap();
    assert!(!c.sign_definite);
    assert!(injectivity_certificate(&bad, 1.0, 50, tol).is_err());
}

#[test]
fn f32_instantiation() {
    let k = KernelSpec::<f32>::liouville_fbm(0.75, 1.0).unwrap();
    let v = kernel_eval(&k, 1.0f32, 0.5).unwrap();
    assert!((v - 0.840_896_4).abs() < 1e-6);
    let k = KernelSpec::<f32>::fbm(0.75, 1.0).unwrap();
    let v = kernel_eval(&k, 1.0f32, 0.5).unwrap() as f64;
    assert!((v - fbm_kernel_oracle(0.75, 1.0, 0.5)).abs() < 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn volterra_and_diagonal(idx in 0usize..4, t in 0.0f64..1.0, d in 0.0f64..1.0) {
        let k = &shipped()[idx];
        let s = (t + d).min(k.horizon());
        prop_assert_eq!(kernel_eval(k, t, s).unwrap(), 0.0);
        prop_assert_eq!(kernel_eval(k, s, s).unwrap(), 0.0);
    }

    #[test]
    fn derivative_consistency(idx in 0usize..4, s in 0.01f64..0.9, d in 0.01f64..0.5) {
        let k = &shipped()[idx];
        let t = (s + d).min(k.horizon());
        prop_assume!(t - s >= 0.01);
        let h = 1e-5 * (t - s);
        let fd = (kernel_eval(k, t + h.min(k.horizon() - t), s).unwrap() - kernel_eval(k, t - h, s).unwrap())
            / (h + h.min(k.horizon() - t));
        let an = kernel_dt(k, t, s).unwrap();
        // one sided at the horizon costs accuracy; stay central
        prop_assume!(k.horizon() - t >= h);
        prop_assert!(((fd - an) / an).abs() < 1e-4, "fd {} vs {}", fd, an);
    }
}

#[test]
fn halton_points_fill_the_triangle() {
    let mut below = 0;
    for i in 1..=1000 {
        let (x, y) = kernels::halton2(i);
        if x * y < 0.25 {
            below += 1;
        }
    }
    assert!(below > 500);
}
