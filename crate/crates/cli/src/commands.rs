//! The subcommands. Each returns its CSV artifacts and checks; `main` writes
//! them and the manifest.

use std::fmt;

use volterra_bsde::bsde::{self, brownian_side_verify, build_yz, density_diagnostic, Problem, ReportRow, Shared};
use volterra_bsde::kernels::{certify_h2, injectivity_certificate};
use volterra_bsde::operators::{transfer_identity_check, variance_curve};
use volterra_bsde::pde::{solve_semilinear_fd, solve_semilinear_picard, PicardOptions};
use volterra_bsde::quad::Tolerance;
use volterra_bsde::simulate::{
    expectation_heat_identity, ito_expectation_check, marginal_moments, report_csv, sample_paths, validate_covariance, ItoFunction,
    DEFAULT_CELL_BUDGET,
};
use volterra_bsde::table::{fmt_num, CsvTable};
use volterra_bsde::{
    Driver, Error, KernelSpec, PathEnsemble, PdeSolution, SingularQuadRule, SpaceGrid, TerminalCondition, TimeGrid, VarianceCurve,
};

use crate::config::ExperimentConfig;
use crate::output::Check;

/// Largest accepted sup-norm gap between the Picard and theta solutions.
pub const PDE_AGREEMENT_TOL: f64 = 5e-3;
/// Largest accepted variance reconstruction error (relative to sup Var).
pub const RECONSTRUCTION_TOL: f64 = 1e-6;
/// Rows and columns kept in exported PDE tables.
const PDE_EXPORT_ROWS: usize = 65;
const PDE_EXPORT_COLS: usize = 201;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Variance,
    Simulate,
    SolvePde,
    SolveBsde,
    Verify,
    Compare,
    Certify,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Self::Variance => "variance",
            Self::Simulate => "simulate",
            Self::SolvePde => "solve-pde",
            Self::SolveBsde => "solve-bsde",
            Self::Verify => "verify",
            Self::Compare => "compare",
            Self::Certify => "certify",
        }
    }
}

/// Why a run stopped early.
#[derive(Debug, Clone)]
pub enum Failure {
    /// Bad input (exit 2).
    Config(String),
    /// A downstream check or precondition failed (exit 1).
    Check(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) | Failure::Check(m) => f.write_str(m),
        }
    }
}

/// Tags a library error with the module it came from and classifies it.
fn at(stage: &'static str) -> impl Fn(Error) -> Failure {
    move |e| {
        let msg = format!("{stage}: {e}");
        match e {
            Error::InvalidParameter(_) | Error::Domain(_) | Error::Expr(_) | Error::Growth { .. } => Failure::Config(msg),
            _ => Failure::Check(msg),
        }
    }
}

#[derive(Debug, Default)]
pub struct Outcome {
    pub files: Vec<(String, String)>,
    pub checks: Vec<Check>,
}

/// Everything derived from the config that several subcommands share.
struct Setup {
    kernel: KernelSpec,
    rule: SingularQuadRule,
    curve: VarianceCurve,
    path_grid: TimeGrid,
    /// Index of `t0` in `path_grid`.
    k0: usize,
}

impl Setup {
    fn new(cfg: &ExperimentConfig) -> Result<Self, Failure> {
        let kernel = cfg.kernel.build().map_err(at("kernels"))?;
        let rule = SingularQuadRule::default().with_tolerance(cfg.tolerances.quad_abs, cfg.tolerances.quad_rel);
        let horizon = cfg.kernel.horizon;
        let n_var = cfg.grids.n_var;
        let vgrid: Vec<f64> = (0..=n_var).map(|i| horizon * i as f64 / n_var as f64).collect();
        let curve = variance_curve(&kernel, &cfg.sigma, &vgrid, &rule).map_err(at("operators"))?;
        let path_grid = TimeGrid::uniform(0.0, horizon, cfg.grids.n_time).map_err(at("simulate"))?;
        let k0 = (cfg.grids.t0 * cfg.grids.n_time as f64 / horizon).round() as usize;
        Ok(Self {
            kernel,
            rule,
            curve,
            path_grid,
            k0,
        })
    }

    fn pde_times(&self) -> &[f64] {
        &self.path_grid.points[self.k0..]
    }

    fn bsde_grid(&self) -> TimeGrid {
        TimeGrid::from_points(self.pde_times().to_vec()).expect("sub-grid of a valid grid")
    }

    fn xgrid(&self, cfg: &ExperimentConfig) -> Result<SpaceGrid, Failure> {
        match cfg.grids.x_halfwidth {
            Some(l) => SpaceGrid::new(l, cfg.grids.n_space),
            None => SpaceGrid::for_curve(&self.curve, 0.0, cfg.grids.n_space),
        }
        .map_err(at("pde"))
    }

    fn ensemble(&self, cfg: &ExperimentConfig) -> Result<PathEnsemble, Failure> {
        sample_paths(&self.kernel, &cfg.sigma, &self.path_grid, cfg.mc.n_paths, cfg.mc.seed, &self.rule, DEFAULT_CELL_BUDGET)
            .map_err(at("simulate"))
    }

    fn picard(&self, cfg: &ExperimentConfig) -> PicardOptions<f64> {
        PicardOptions {
            tol: cfg.tolerances.picard_tol,
            max_iter: cfg.tolerances.max_iter,
        }
    }

    fn meta(&self, cfg: &ExperimentConfig) -> Vec<String> {
        vec![
            format!("kernel={}", self.kernel_id()),
            format!("sigma={}", cfg.sigma.id()),
            format!("seed={}", cfg.mc.seed),
        ]
    }

    fn kernel_id(&self) -> String {
        use volterra_bsde::Kernel;
        self.kernel.id()
    }
}

/// Builds and validates one `(f, g)` problem against the grids.
fn problem(cfg: &ExperimentConfig, setup: &Setup, xgrid: &SpaceGrid, second: bool) -> Result<(Driver, TerminalCondition), Failure> {
    let (d, g) = if second {
        let (d, g) = cfg.compare.as_ref().ok_or_else(|| Failure::Config("compare: missing required section [compare]".into()))?;
        (d, g)
    } else {
        (&cfg.driver, &cfg.terminal)
    };
    let (f, g) = (d.build(), g.build());
    let which = if second { "compare" } else { "terminal" };
    g.check_growth(xgrid, &setup.curve)
        .map_err(|e| Failure::Config(format!("{which}: {e}")))?;
    f.check_lipschitz(cfg.grids.t0, cfg.kernel.horizon, xgrid.half_width, 10.0)
        .map_err(|e| Failure::Config(format!("{}: {e}", if second { "compare" } else { "driver" })))?;
    Ok((f, g))
}

fn pde_table(sol: &PdeSolution, meta: &[String]) -> String {
    let mut t = CsvTable::new(&["t", "x", "u", "ux"]);
    for m in meta {
        t.meta(m);
    }
    t.meta(&format!("method={} iterations={} residual={}", sol.method, sol.iterations, fmt_num(sol.residual)));
    let nt = sol.tgrid.len();
    let nx = sol.nx();
    let st = (nt - 1).div_ceil(PDE_EXPORT_ROWS - 1).max(1);
    let sx = (nx - 1).div_ceil(PDE_EXPORT_COLS - 1).max(1);
    t.meta(&format!("stride_t={st} stride_x={sx} full_grid={nt}x{nx}"));
    let rows: Vec<usize> = (0..nt).step_by(st).chain(std::iter::once(nt - 1)).collect();
    let mut last = usize::MAX;
    for i in rows {
        if i == last {
            continue;
        }
        last = i;
        for j in (0..nx).step_by(sx) {
            t.row(vec![fmt_num(sol.tgrid[i]), fmt_num(sol.xgrid.point(j)), fmt_num(sol.u_at(i, j)), fmt_num(sol.ux_row(i)[j])]);
        }
    }
    t.render()
}

fn rows_to_checks(rows: &[ReportRow<f64>]) -> Vec<Check> {
    rows.iter().map(|r| Check::flag(r.check.clone(), r.value, r.tolerance, r.pass)).collect()
}

pub fn run(cmd: Subcommand, cfg: &ExperimentConfig) -> Result<Outcome, Failure> {
    match cmd {
        Subcommand::Variance => variance(cfg),
        Subcommand::Simulate => simulate(cfg),
        Subcommand::SolvePde => solve_pde(cfg),
        Subcommand::SolveBsde => solve_bsde(cfg),
        Subcommand::Verify => verify(cfg),
        Subcommand::Compare => compare(cfg),
        Subcommand::Certify => certify(cfg),
    }
}

fn variance(cfg: &ExperimentConfig) -> Result<Outcome, Failure> {
    let s = Setup::new(cfg)?;
    let rec = s.curve.reconstruction_error();
    Ok(Outcome {
        files: vec![("variance.csv".into(), s.curve.to_csv(&s.meta(cfg)))],
        checks: vec![Check::at_most("variance_reconstruction", rec, RECONSTRUCTION_TOL)],
    })
}

fn simulate(cfg: &ExperimentConfig) -> Result<Outcome, Failure> {
    let s = Setup::new(cfg)?;
    let ens = s.ensemble(cfg)?;
    let cov = validate_covariance(&ens, &s.kernel, s.kernel.hurst_min(), &s.rule).map_err(at("simulate"))?;
    let mut meta = s.meta(cfg);
    meta.push(format!("allowance={}", cov.allowance_rule));
    let (skew, se_s, kurt, se_k) = marginal_moments(&ens, ens.grid.n_steps());
    let worst_cov = cov
        .rows
        .iter()
        .map(|r| (r.lhs - r.rhs).abs() / (3.0 * r.stderr + r.allowance))
        .fold(0.0, f64::max);
    let checks = vec![
        Check::flag("covariance_validation", worst_cov, 1.0, cov.pass),
        Check::at_most("increment_variance_zscore", ens.increment_variance_zscore(), 4.0),
        Check::at_most("terminal_skewness_zscore", skew.abs() / se_s, 4.0),
        Check::at_most("terminal_excess_kurtosis_zscore", kurt.abs() / se_k, 4.0),
    ];
    Ok(Outcome {
        files: vec![
            ("paths.csv".into(), ens.to_csv(cfg.mc.export_paths, &s.meta(cfg))),
            ("covariance.csv".into(), report_csv(&cov.rows, &meta)),
        ],
        checks,
    })
}

/// Picard and theta solutions and their sup gap on the interior window.
fn pde_pair(cfg: &ExperimentConfig, s: &Setup) -> Result<(PdeSolution, PdeSolution, f64, Driver, TerminalCondition), Failure> {
    let xg = s.xgrid(cfg)?;
    let (f, g) = problem(cfg, s, &xg, false)?;
    let pic = solve_semilinear_picard(&f, &g, &s.curve, &cfg.sigma, s.pde_times(), &xg, s.picard(cfg)).map_err(at("pde"))?;
    let fd = solve_semilinear_fd(&f, &g, &s.curve, &cfg.sigma, s.pde_times(), &xg, 0.5).map_err(at("pde"))?;
    let gap = pic.sup_gap_within(&fd, pic.interior_radius(&s.curve));
    Ok((pic, fd, gap, f, g))
}

fn solve_pde(cfg: &ExperimentConfig) -> Result<Outcome, Failure> {
    let s = Setup::new(cfg)?;
    let (pic, fd, gap, _, _) = pde_pair(cfg, &s)?;
    let meta = s.meta(cfg);
    Ok(Outcome {
        files: vec![("pde_picard.csv".into(), pde_table(&pic, &meta)), ("pde_fd.csv".into(), pde_table(&fd, &meta))],
        checks: vec![
            Check::at_most("picard_residual", pic.residual, cfg.tolerances.picard_tol),
            Check::at_most("picard_fd_agreement", gap, PDE_AGREEMENT_TOL),
        ],
    })
}

fn solve_bsde(cfg: &ExperimentConfig) -> Result<Outcome, Failure> {
    let s = Setup::new(cfg)?;
    let xg = s.xgrid(cfg)?;
    let (f, g) = problem(cfg, &s, &xg, false)?;
    let sol = solve_semilinear_picard(&f, &g, &s.curve, &cfg.sigma, s.pde_times(), &xg, s.picard(cfg)).map_err(at("pde"))?;
    let ens = s.ensemble(cfg)?;
    let yz = build_yz(&sol, &ens, &cfg.sigma).map_err(at("bsde"))?;
    let last = yz.times.len() - 1;
    let terminal = (0..ens.n_paths)
        .map(|p| (yz.y_at(p, last) - g.eval(ens.n_at(p, yz.first_index + last))).abs())
        .fold(0.0, f64::max);
    let run = brownian_side_verify(&sol, &s.curve, &cfg.sigma, &f, &g, &s.bsde_grid(), cfg.mc.n_paths, cfg.mc.seed, cfg.mc.export_paths)
        .map_err(at("bsde"))?;
    let (sy, sz) = yz.square_integrals();
    let rows = vec![
        ReportRow::new("terminal_exactness", terminal, 0.0, terminal == 0.0),
        ReportRow::new("clip_fraction", yz.clip_fraction, bsde::MAX_ESCAPE_FRACTION, yz.clip_fraction <= bsde::MAX_ESCAPE_FRACTION),
        ReportRow::new("zeta_variance_zscore", run.variance_zscore, 3.0, run.variance_match),
        ReportRow::new("zeta_terminal_exactness", run.terminal_defect, 0.0, run.terminal_defect == 0.0),
        ReportRow::new("e_int_y2", sy, f64::INFINITY, sy.is_finite()),
        ReportRow::new("e_int_z2", sz, f64::INFINITY, sz.is_finite()),
        ReportRow::new("residual_l2", run.residual_l2, f64::INFINITY, run.residual_l2.is_finite()),
    ];
    let mut meta = s.meta(cfg);
    meta.push(format!("driver={} terminal={}", f.id, g.id));
    meta.push(format!("rho_clamped={}", run.rho_clamped));
    let mut paths = CsvTable::new(&["path_id", "t", "N", "Y", "Z"]);
    for m in &meta {
        paths.meta(m);
    }
    for p in 0..cfg.mc.export_paths.min(ens.n_paths) {
        for (k, &t) in yz.times.iter().enumerate() {
            paths.row(vec![
                p.to_string(),
                fmt_num(t),
                fmt_num(ens.n_at(p, yz.first_index + k)),
                fmt_num(yz.y_at(p, k)),
                fmt_num(yz.z_at(p, k)),
            ]);
        }
    }
    let mut zeta = CsvTable::new(&["path_id", "t", "zeta", "Ytilde", "Ztilde"]);
    for m in &meta {
        zeta.meta(m);
    }
    let m = run.times.len();
    for p in 0..run.stored_paths {
        for (k, &t) in run.times.iter().enumerate() {
            let i = p * m + k;
            zeta.row(vec![p.to_string(), fmt_num(t), fmt_num(run.zeta[i]), fmt_num(run.ytilde[i]), fmt_num(run.ztilde[i])]);
        }
    }
    Ok(Outcome {
        files: vec![
            ("yz_paths.csv".into(), paths.render()),
            ("brownian_side.csv".into(), zeta.render()),
            ("bsde_report.csv".into(), bsde::report_csv(&rows, &meta)),
        ],
        checks: rows_to_checks(&rows),
    })
}

/// The seven end-to-end checks.
fn verify(cfg: &ExperimentConfig) -> Result<Outcome, Failure> {
    let s = Setup::new(cfg)?;
    let horizon = cfg.kernel.horizon;
    let mut rows: Vec<ReportRow<f64>> = Vec::new();

    let rec = s.curve.reconstruction_error();
    rows.push(ReportRow::new("variance_reconstruction", rec, RECONSTRUCTION_TOL, rec <= RECONSTRUCTION_TOL));

    let ens = s.ensemble(cfg)?;
    let cov = validate_covariance(&ens, &s.kernel, s.kernel.hurst_min(), &s.rule).map_err(at("simulate"))?;
    let worst = cov.rows.iter().map(|r| (r.lhs - r.rhs).abs() / (3.0 * r.stderr + r.allowance)).fold(0.0, f64::max);
    rows.push(ReportRow::new("covariance_validation", worst, 1.0, cov.pass));

    let heat = expectation_heat_identity(&ens, &s.curve, |x: f64| x.cos(), horizon).map_err(at("simulate"))?;
    rows.push(ReportRow::new("heat_identity_cos", (heat.lhs - heat.rhs).abs(), 3.0 * heat.stderr + heat.allowance, heat.pass));

    let ex = ItoFunction {
        f: &|_t, x: f64| (x / 2.0).exp(),
        f_t: &|_t, _x| 0.0,
        f_xx: &|_t, x: f64| 0.25 * (x / 2.0).exp(),
    };
    let mut ito_worst = 0.0f64;
    let mut ito_pass = true;
    for q in [0.25, 0.5, 0.75] {
        let t = ens.grid.points[(q * ens.grid.n_steps() as f64).round() as usize];
        let r = ito_expectation_check(&ens, &s.curve, &ex, t).map_err(at("simulate"))?;
        ito_worst = ito_worst.max((r.lhs - r.rhs).abs() / (3.0 * r.stderr + r.allowance));
        ito_pass &= r.pass;
    }
    rows.push(ReportRow::new("ito_exp_half", ito_worst, 1.0, ito_pass));

    let (pic, _fd, gap, f, g) = pde_pair(cfg, &s)?;
    rows.push(ReportRow::new("picard_fd_agreement", gap, PDE_AGREEMENT_TOL, gap <= PDE_AGREEMENT_TOL));

    let run = brownian_side_verify(&pic, &s.curve, &cfg.sigma, &f, &g, &s.bsde_grid(), cfg.mc.n_paths, cfg.mc.seed, 0).map_err(at("bsde"))?;
    rows.push(ReportRow::new(
        "brownian_side_variance_match",
        run.variance_zscore,
        3.0,
        run.variance_match && run.terminal_defect == 0.0,
    ));

    let k_mid = s.k0 + (cfg.grids.n_time - s.k0) / 2;
    let dd = density_diagnostic(&pic, &ens, &s.curve, ens.grid.points[k_mid]).map_err(at("bsde"))?;
    let jump_tol = 5.0 / ens.n_paths as f64;
    // u_x != 0 along the paths implies a density; a degenerate problem (Y
    // deterministic, say) may legitimately have atoms
    rows.push(ReportRow::new(
        "density_nondegenerate_implies_no_atom",
        dd.max_cdf_jump,
        jump_tol,
        !dd.nondegenerate || dd.continuity_not_rejected,
    ));

    let mut meta = s.meta(cfg);
    meta.push(format!("driver={} terminal={}", f.id, g.id));
    meta.push(format!("covariance_allowance={}", cov.allowance_rule));
    meta.push(format!("residual_l2={} malliavin_sq_min={} nondegenerate={}", fmt_num(run.residual_l2), fmt_num(dd.min_over_paths), dd.nondegenerate));
    Ok(Outcome {
        files: vec![("verify_report.csv".into(), bsde::report_csv(&rows, &meta))],
        checks: rows_to_checks(&rows),
    })
}

fn compare(cfg: &ExperimentConfig) -> Result<Outcome, Failure> {
    let s = Setup::new(cfg)?;
    let xg = s.xgrid(cfg)?;
    let (f1, g1) = problem(cfg, &s, &xg, false)?;
    let (f2, g2) = problem(cfg, &s, &xg, true)?;
    let ens = s.ensemble(cfg)?;
    let shared = Shared {
        curve: &s.curve,
        sigma: &cfg.sigma,
        tgrid: s.pde_times(),
        xgrid: &xg,
        picard: s.picard(cfg),
        ensemble: Some(&ens),
        yz_box: 10.0,
    };
    let rep = bsde::compare(&Problem { f: f1.clone(), g: g1.clone() }, &Problem { f: f2.clone(), g: g2.clone() }, &shared).map_err(at("bsde"))?;
    let mut meta = s.meta(cfg);
    meta.push(format!("problem1: driver={} terminal={}", f1.id, g1.id));
    meta.push(format!("problem2: driver={} terminal={}", f2.id, g2.id));
    let mut gap = CsvTable::new(&["t", "x", "u1", "u2", "gap"]);
    for m in &meta {
        gap.meta(m);
    }
    let nt = rep.u1.tgrid.len();
    let st = (nt - 1).div_ceil(PDE_EXPORT_ROWS - 1).max(1);
    let sx = (xg.len() - 1).div_ceil(PDE_EXPORT_COLS - 1).max(1);
    for i in (0..nt).step_by(st) {
        for j in (0..xg.len()).step_by(sx) {
            let (a, b) = (rep.u1.u_at(i, j), rep.u2.u_at(i, j));
            gap.row(vec![fmt_num(rep.u1.tgrid[i]), fmt_num(xg.point(j)), fmt_num(a), fmt_num(b), fmt_num(a - b)]);
        }
    }
    Ok(Outcome {
        files: vec![("compare_report.csv".into(), bsde::report_csv(&rep.rows, &meta)), ("compare_gap.csv".into(), gap.render())],
        checks: rows_to_checks(&rep.rows),
    })
}

fn certify(cfg: &ExperimentConfig) -> Result<Outcome, Failure> {
    let kernel = cfg.kernel.build().map_err(at("kernels"))?;
    let rule = SingularQuadRule::default().with_tolerance(cfg.tolerances.quad_abs, cfg.tolerances.quad_rel);
    let (alpha, beta, c) = kernel.documented_regularity();
    let h2 = certify_h2(&kernel, alpha, beta, c, cfg.certify.samples).map_err(at("kernels"))?;
    let tol = Tolerance {
        abs: cfg.tolerances.quad_abs,
        rel: cfg.tolerances.quad_rel,
    };
    let inj = injectivity_certificate(&kernel, cfg.grids.t0, cfg.certify.injectivity_samples, tol).map_err(at("kernels"))?;
    let horizon = cfg.kernel.horizon;
    let tgrid: Vec<f64> = (0..=32).map(|i| horizon * i as f64 / 32.0).collect();
    let transfer = transfer_identity_check(&kernel, 0.5 * horizon, &tgrid, &rule).map_err(at("operators"))?;

    let mut t = CsvTable::new(&["certificate", "value", "tolerance", "pass"]);
    t.meta(&format!("kernel={}", {
        use volterra_bsde::Kernel;
        kernel.id()
    }));
    t.meta(&format!("h2: alpha={} beta={} c={} grid={}", fmt_num(alpha), fmt_num(beta), fmt_num(c), h2.grid_checked));
    t.meta(&format!("h2 worst point (t, s) = ({}, {})", fmt_num(h2.worst.0), fmt_num(h2.worst.1)));
    t.meta(&format!("injectivity: t0={} samples={}", fmt_num(inj.t0), inj.samples.len()));
    let min_abs = inj.samples.iter().map(|p| p.1.abs()).fold(f64::INFINITY, f64::min);
    let checks = vec![
        Check::flag("h2_max_ratio", h2.max_ratio, 1.0, h2.valid),
        Check::flag("injectivity_sign_definite", min_abs, 0.0, inj.sign_definite),
        Check::flag("transfer_identity_scaled_dev", transfer.max_scaled_dev, 1.0, transfer.pass),
    ];
    for c in &checks {
        t.row(vec![c.name.clone(), fmt_num(c.value), fmt_num(c.tolerance), c.pass.to_string()]);
    }
    let mut inj_t = CsvTable::new(&["s", "ktilde"]);
    inj_t.meta(&format!("t0={}", fmt_num(inj.t0)));
    for (s, k) in &inj.samples {
        inj_t.row(vec![fmt_num(*s), fmt_num(*k)]);
    }
    Ok(Outcome {
        files: vec![("certificate.csv".into(), t.render()), ("injectivity.csv".into(), inj_t.render())],
        checks,
    })
}
