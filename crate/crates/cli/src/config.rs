//! Sectioned `key = value` experiment configuration.
//!
//! ```text
//! # comment
//! [kernel]
//! family = fbm          # fbm | liouville_fbm | mbm
//! hurst = 0.75          # or, for mbm: hurst_fn = 0.7 + 0.1*sin(3*t)
//! horizon = 1
//! ```
//!
//! Every key is validated; errors carry the line number and `section.key`.

use std::collections::BTreeMap;
use std::fmt;

use volterra_bsde::kernels::Family;
use volterra_bsde::KernelSpec;
use volterra_bsde::{Expr, Volatility};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub key: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.line, &self.key) {
            (Some(l), Some(k)) => write!(f, "line {l}: {k}: {}", self.message),
            (Some(l), None) => write!(f, "line {l}: {}", self.message),
            (None, Some(k)) => write!(f, "{k}: {}", self.message),
            (None, None) => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn err(line: Option<usize>, key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        line,
        key: Some(key.to_string()),
        message: message.into(),
    }
}

const SCHEMA: &[(&str, &[&str])] = &[
    ("kernel", &["family", "hurst", "hurst_fn", "horizon"]),
    ("sigma", &["kind", "value", "knots", "values"]),
    ("grids", &["t0", "n_time", "n_var", "x_halfwidth", "n_space"]),
    ("driver", &["builtin", "expr", "lipschitz"]),
    ("terminal", &["expr", "growth_c", "lambda"]),
    ("mc", &["n_paths", "seed", "export_paths"]),
    ("tolerances", &["quad_abs", "quad_rel", "picard_tol", "max_iter"]),
    ("compare", &["builtin", "expr", "lipschitz", "terminal", "growth_c", "lambda"]),
    ("certify", &["samples", "injectivity_samples"]),
];

/// Parsed but not yet interpreted entries, keyed by `section.key`.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, (String, usize)>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        let mut section: Option<&str> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| ConfigError {
                    line: Some(line_no),
                    key: None,
                    message: format!("malformed section header `{line}`"),
                })?;
                let name = name.trim();
                let known = SCHEMA.iter().find(|(s, _)| *s == name).ok_or_else(|| ConfigError {
                    line: Some(line_no),
                    key: None,
                    message: format!("unknown section [{name}]"),
                })?;
                section = Some(known.0);
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError {
                line: Some(line_no),
                key: None,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let k = k.trim();
            let sec = section.ok_or_else(|| err(Some(line_no), k, "key outside any [section]"))?;
            let full = format!("{sec}.{k}");
            let keys = SCHEMA.iter().find(|(s, _)| *s == sec).map(|s| s.1).unwrap_or(&[]);
            if !keys.contains(&k) {
                return Err(err(Some(line_no), &full, format!("unknown key (expected one of {})", keys.join(", "))));
            }
            let v = v.trim();
            if v.is_empty() {
                return Err(err(Some(line_no), &full, "empty value"));
            }
            if entries.insert(full.clone(), (v.to_string(), line_no)).is_some() {
                return Err(err(Some(line_no), &full, "duplicate key"));
            }
        }
        Ok(Self { entries })
    }

    fn get(&self, key: &str) -> Option<(&str, usize)> {
        self.entries.get(key).map(|(v, l)| (v.as_str(), *l))
    }

    fn has_section(&self, sec: &str) -> bool {
        let prefix = format!("{sec}.");
        self.entries.keys().any(|k| k.starts_with(&prefix))
    }

    fn required(&self, key: &str) -> Result<(&str, usize), ConfigError> {
        self.get(key).ok_or_else(|| err(None, key, "missing required key"))
    }

    fn f64_req(&self, key: &str) -> Result<f64, ConfigError> {
        let (v, l) = self.required(key)?;
        parse_f64(v, l, key)
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.get(key) {
            Some((v, l)) => parse_f64(v, l, key),
            None => Ok(default),
        }
    }

    fn usize_or(&self, key: &str, default: usize, min: usize) -> Result<usize, ConfigError> {
        let (n, line) = match self.get(key) {
            Some((v, l)) => (v.parse::<usize>().map_err(|_| err(Some(l), key, format!("expected a non-negative integer, got `{v}`")))?, Some(l)),
            None => (default, None),
        };
        if n < min {
            return Err(err(line, key, format!("{n} is below the minimum {min}")));
        }
        Ok(n)
    }

    fn list(&self, key: &str) -> Result<Vec<f64>, ConfigError> {
        let (v, l) = self.required(key)?;
        v.split(',').map(|s| parse_f64(s.trim(), l, key)).collect()
    }

    fn expr(&self, key: &str) -> Result<Expr, ConfigError> {
        let (v, l) = self.required(key)?;
        Expr::parse(v).map_err(|e| err(Some(l), key, e.to_string()))
    }
}

fn parse_f64(v: &str, line: usize, key: &str) -> Result<f64, ConfigError> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(err(Some(line), key, format!("expected a finite number, got `{v}`"))),
    }
}

#[derive(Debug, Clone)]
pub enum HurstSpec {
    Constant(f64),
    Function(Expr),
}

#[derive(Debug, Clone)]
pub struct KernelCfg {
    pub family: Family,
    pub hurst: HurstSpec,
    pub horizon: f64,
}

impl KernelCfg {
    pub fn build(&self) -> volterra_bsde::Result<KernelSpec> {
        match (&self.family, &self.hurst) {
            (Family::FBm, HurstSpec::Constant(h)) => KernelSpec::fbm(*h, self.horizon),
            (Family::LiouvilleFBm, HurstSpec::Constant(h)) => KernelSpec::liouville_fbm(*h, self.horizon),
            (Family::Multifractional, HurstSpec::Function(e)) => KernelSpec::mbm(e.clone(), self.horizon),
            _ => unreachable!("validated at parse time"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriverBuiltin {
    Zero,
    One,
    NegY,
}

impl DriverBuiltin {
    fn from_name(s: &str) -> Option<Self> {
        match s {
            "zero" => Some(Self::Zero),
            "one" => Some(Self::One),
            "neg_y" => Some(Self::NegY),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Zero => "zero",
            Self::One => "one",
            Self::NegY => "neg_y",
        }
    }
}

#[derive(Debug, Clone)]
pub enum DriverSpec {
    Builtin(DriverBuiltin),
    Expr(Expr, f64),
}

impl DriverSpec {
    pub fn build(&self) -> volterra_bsde::Driver {
        match self {
            Self::Builtin(DriverBuiltin::Zero) => volterra_bsde::Driver::zero(),
            Self::Builtin(DriverBuiltin::One) => volterra_bsde::Driver::constant(1.0),
            Self::Builtin(DriverBuiltin::NegY) => volterra_bsde::Driver::linear_y(-1.0),
            Self::Expr(e, l) => volterra_bsde::Driver::from_expr(e.clone(), *l),
        }
    }

    fn canonical(&self) -> String {
        match self {
            Self::Builtin(b) => format!("builtin={}", b.name()),
            Self::Expr(e, l) => format!("expr={};lipschitz={}", e.canonical(), num(*l)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TerminalSpec {
    pub expr: Expr,
    pub growth_c: f64,
    pub lambda: f64,
}

impl TerminalSpec {
    pub fn build(&self) -> volterra_bsde::TerminalCondition {
        volterra_bsde::TerminalCondition::from_expr(
            self.expr.clone(),
            volterra_bsde::pde::GrowthBudget {
                c: self.growth_c,
                lambda: self.lambda,
            },
        )
    }

    fn canonical(&self) -> String {
        format!("expr={};growth_c={};lambda={}", self.expr.canonical(), num(self.growth_c), num(self.lambda))
    }
}

#[derive(Debug, Clone)]
pub struct Grids {
    pub t0: f64,
    pub n_time: usize,
    pub n_var: usize,
    pub x_halfwidth: Option<f64>,
    pub n_space: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Mc {
    pub n_paths: usize,
    pub seed: u64,
    pub export_paths: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    pub quad_abs: f64,
    pub quad_rel: f64,
    pub picard_tol: f64,
    pub max_iter: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct CertifyCfg {
    pub samples: usize,
    pub injectivity_samples: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub kernel: KernelCfg,
    pub sigma: Volatility,
    pub grids: Grids,
    pub driver: DriverSpec,
    pub terminal: TerminalSpec,
    pub mc: Mc,
    pub tolerances: Tolerances,
    /// Second problem for `compare`.
    pub compare: Option<(DriverSpec, TerminalSpec)>,
    pub certify: CertifyCfg,
}

/// Smallest accepted counts.
pub const MIN_N_TIME: usize = 8;
pub const MIN_N_VAR: usize = 16;
pub const MIN_N_SPACE: usize = 50;
pub const MIN_N_PATHS: usize = 1000;

fn driver_spec(raw: &RawConfig, sec: &str) -> Result<DriverSpec, ConfigError> {
    let b = raw.get(&format!("{sec}.builtin"));
    let e = raw.get(&format!("{sec}.expr"));
    match (b, e) {
        (Some((name, l)), None) => {
            let key = format!("{sec}.builtin");
            let b = DriverBuiltin::from_name(name).ok_or_else(|| err(Some(l), &key, format!("unknown builtin `{name}` (zero, one, neg_y)")))?;
            if let Some((_, l)) = raw.get(&format!("{sec}.lipschitz")) {
                return Err(err(Some(l), &format!("{sec}.lipschitz"), "builtin drivers carry their own constant"));
            }
            Ok(DriverSpec::Builtin(b))
        }
        (None, Some(_)) => {
            let expr = raw.expr(&format!("{sec}.expr"))?;
            let key = format!("{sec}.lipschitz");
            let l = raw.f64_req(&key)?;
            if l < 0.0 {
                return Err(err(raw.get(&key).map(|p| p.1), &key, "must be >= 0"));
            }
            Ok(DriverSpec::Expr(expr, l))
        }
        (Some(_), Some((_, l))) => Err(err(Some(l), &format!("{sec}.expr"), "give either builtin or expr, not both")),
        (None, None) => Err(err(None, &format!("{sec}.builtin"), "missing driver (set builtin or expr)")),
    }
}

fn terminal_spec(raw: &RawConfig, expr_key: &str, sec: &str) -> Result<TerminalSpec, ConfigError> {
    let expr = raw.expr(expr_key)?;
    if expr.uses(volterra_bsde::expr::Var::Y) || expr.uses(volterra_bsde::expr::Var::Z) || expr.uses(volterra_bsde::expr::Var::T) {
        return Err(err(raw.get(expr_key).map(|p| p.1), expr_key, "terminal condition may only use x"));
    }
    let growth_c = raw.f64_req(&format!("{sec}.growth_c"))?;
    let lambda = raw.f64_req(&format!("{sec}.lambda"))?;
    if growth_c <= 0.0 || lambda < 0.0 {
        return Err(err(None, &format!("{sec}.growth_c"), "need growth_c > 0 and lambda >= 0"));
    }
    Ok(TerminalSpec { expr, growth_c, lambda })
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::from_raw(&RawConfig::parse(text)?)
    }

    pub fn from_raw(raw: &RawConfig) -> Result<Self, ConfigError> {
        let (fam, fam_line) = raw.required("kernel.family")?;
        let family = Family::from_id(fam).ok_or_else(|| err(Some(fam_line), "kernel.family", format!("unknown family `{fam}` (fbm, liouville_fbm, mbm)")))?;
        let hurst = match family {
            Family::Multifractional => {
                if let Some((_, l)) = raw.get("kernel.hurst") {
                    return Err(err(Some(l), "kernel.hurst", "mbm takes hurst_fn, not hurst"));
                }
                let e = raw.expr("kernel.hurst_fn")?;
                if e.uses(volterra_bsde::expr::Var::X) || e.uses(volterra_bsde::expr::Var::Y) || e.uses(volterra_bsde::expr::Var::Z) {
                    return Err(err(raw.get("kernel.hurst_fn").map(|p| p.1), "kernel.hurst_fn", "may only use t"));
                }
                HurstSpec::Function(e)
            }
            _ => {
                if let Some((_, l)) = raw.get("kernel.hurst_fn") {
                    return Err(err(Some(l), "kernel.hurst_fn", "only mbm takes hurst_fn"));
                }
                HurstSpec::Constant(raw.f64_req("kernel.hurst")?)
            }
        };
        let horizon = raw.f64_req("kernel.horizon")?;
        if horizon <= 0.0 {
            return Err(err(raw.get("kernel.horizon").map(|p| p.1), "kernel.horizon", "must be > 0"));
        }
        let kernel = KernelCfg { family, hurst, horizon };
        // surface bad hurst values with the key name
        kernel.build().map_err(|e| err(raw.get("kernel.hurst").or(raw.get("kernel.hurst_fn")).map(|p| p.1), "kernel.hurst", e.to_string()))?;

        let sigma = match raw.get("sigma.kind").map(|p| p.0).unwrap_or("constant") {
            "constant" => {
                let v = raw.f64_or("sigma.value", 1.0)?;
                Volatility::constant(v).map_err(|e| err(raw.get("sigma.value").map(|p| p.1), "sigma.value", e.to_string()))?
            }
            "table" => {
                let knots = raw.list("sigma.knots")?;
                let values = raw.list("sigma.values")?;
                Volatility::table(knots, values).map_err(|e| err(raw.get("sigma.values").map(|p| p.1), "sigma.values", e.to_string()))?
            }
            other => return Err(err(raw.get("sigma.kind").map(|p| p.1), "sigma.kind", format!("unknown kind `{other}` (constant, table)"))),
        };

        let n_time = raw.usize_or("grids.n_time", 256, MIN_N_TIME)?;
        let t0 = raw.f64_req("grids.t0")?;
        let t0_line = raw.get("grids.t0").map(|p| p.1);
        if !(t0 > 0.0 && t0 < horizon) {
            return Err(err(t0_line, "grids.t0", format!("must lie in (0, horizon) = (0, {horizon})")));
        }
        let k0 = t0 * n_time as f64 / horizon;
        if (k0 - k0.round()).abs() > 1e-9 || k0.round() as usize + 2 > n_time {
            return Err(err(t0_line, "grids.t0", format!("must be a time grid point k * horizon / n_time with at least 2 steps after it (k = {k0})")));
        }
        let x_halfwidth = match raw.get("grids.x_halfwidth") {
            Some((v, l)) => {
                let x = parse_f64(v, l, "grids.x_halfwidth")?;
                if x <= 0.0 {
                    return Err(err(Some(l), "grids.x_halfwidth", "must be > 0"));
                }
                Some(x)
            }
            None => None,
        };
        let grids = Grids {
            t0,
            n_time,
            n_var: raw.usize_or("grids.n_var", n_time, MIN_N_VAR)?,
            x_halfwidth,
            n_space: raw.usize_or("grids.n_space", 800, MIN_N_SPACE)?,
        };

        let driver = driver_spec(raw, "driver")?;
        let terminal = terminal_spec(raw, "terminal.expr", "terminal")?;
        let seed = match raw.get("mc.seed") {
            Some((v, l)) => v.parse::<u64>().map_err(|_| err(Some(l), "mc.seed", format!("expected an unsigned 64-bit integer, got `{v}`")))?,
            None => return Err(err(None, "mc.seed", "missing required key")),
        };
        let mc = Mc {
            n_paths: raw.usize_or("mc.n_paths", 10_000, MIN_N_PATHS)?,
            seed,
            export_paths: raw.usize_or("mc.export_paths", 20, 0)?,
        };
        let tolerances = Tolerances {
            quad_abs: raw.f64_or("tolerances.quad_abs", 1e-8)?,
            quad_rel: raw.f64_or("tolerances.quad_rel", 1e-6)?,
            picard_tol: raw.f64_or("tolerances.picard_tol", 1e-10)?,
            max_iter: raw.usize_or("tolerances.max_iter", 50, 1)?,
        };
        for (k, v) in [("tolerances.quad_abs", tolerances.quad_abs), ("tolerances.quad_rel", tolerances.quad_rel), ("tolerances.picard_tol", tolerances.picard_tol)] {
            if v <= 0.0 {
                return Err(err(raw.get(k).map(|p| p.1), k, "must be > 0"));
            }
        }
        let compare = if raw.has_section("compare") {
            Some((driver_spec(raw, "compare")?, terminal_spec(raw, "compare.terminal", "compare")?))
        } else {
            None
        };
        let certify = CertifyCfg {
            samples: raw.usize_or("certify.samples", 2000, 100)?,
            injectivity_samples: raw.usize_or("certify.injectivity_samples", 200, 1)?,
        };
        Ok(Self {
            kernel,
            sigma,
            grids,
            driver,
            terminal,
            mc,
            tolerances,
            compare,
            certify,
        })
    }

    /// One `key=value` line per resolved field (defaults filled in, numbers
    /// and expressions normalised); hashing this gives a config identity that
    /// ignores comments, spacing and key order.
    pub fn canonical(&self) -> String {
        let mut out = Vec::new();
        out.push(format!("kernel.family={}", self.kernel.family.id()));
        match &self.kernel.hurst {
            HurstSpec::Constant(h) => out.push(format!("kernel.hurst={}", num(*h))),
            HurstSpec::Function(e) => out.push(format!("kernel.hurst_fn={}", e.canonical())),
        }
        out.push(format!("kernel.horizon={}", num(self.kernel.horizon)));
        out.push(format!("sigma={}", self.sigma.id()));
        let g = &self.grids;
        out.push(format!("grids.t0={}", num(g.t0)));
        out.push(format!("grids.n_time={}", g.n_time));
        out.push(format!("grids.n_var={}", g.n_var));
        out.push(format!("grids.x_halfwidth={}", g.x_halfwidth.map(num).unwrap_or_else(|| "auto".into())));
        out.push(format!("grids.n_space={}", g.n_space));
        out.push(format!("driver={}", self.driver.canonical()));
        out.push(format!("terminal={}", self.terminal.canonical()));
        out.push(format!("mc.n_paths={}", self.mc.n_paths));
        out.push(format!("mc.seed={}", self.mc.seed));
        out.push(format!("mc.export_paths={}", self.mc.export_paths));
        let t = &self.tolerances;
        out.push(format!("tolerances=quad_abs={};quad_rel={};picard_tol={};max_iter={}", num(t.quad_abs), num(t.quad_rel), num(t.picard_tol), t.max_iter));
        if let Some((d, g)) = &self.compare {
            out.push(format!("compare.driver={}", d.canonical()));
            out.push(format!("compare.terminal={}", g.canonical()));
        }
        out.push(format!("certify=samples={};injectivity_samples={}", self.certify.samples, self.certify.injectivity_samples));
        out.join("\n") + "\n"
    }
}

/// Shortest round-trip representation.
fn num(x: f64) -> String {
    format!("{x:?}")
}
