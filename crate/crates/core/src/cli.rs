//! Command-line surface: a TOML problem config in, a JSON report out.
//!
//! Exit codes: 0 when the report's checks pass, 2 when they run but fail,
//! 1 for usage, config, parse and module errors (an error report with a
//! machine-readable `code` is still written).

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use num_complex::Complex64 as C64;
use serde_json::Value;
use thiserror::Error;

use crate::branch::BranchedSqrt;
use crate::compose::{build_composed_phase, composed_order, composed_pairing, composed_symbol, intersection_excess, ComposeError};
use crate::config::{fiber_box, ConfigError, PhaseSection, ProblemConfig};
use crate::expr::{parse, ExprError, VarLayout};
use crate::oracle::{OracleError, OrderFit, QuadratureSpec};
use crate::phase::{classify, find_critical, lambda_sample, positivity_check, validate_phase, PhaseError, PhaseFunction, PhaseKind, DEFAULT_K};
use crate::report::{cnum, num, nums, obj, opt_num, Report};
use crate::stationary::{leading_term, remainder_order, SPError, SPProblem};
use crate::symbol::{make_psi_damped, pairing_t, principal_symbol, Amplitude, PairingSample, PairingTest, SymbolError};
use crate::validate::{gamma_seed, order_fit_setup, run_suite, SuiteOptions, CRITERIA};

#[derive(Debug, Parser)]
#[command(name = "fiocalc", version, about = "Complex-phase stationary phase, principal symbols and FIO composition, with quadrature cross-checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Problem config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Report destination; stdout when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for the quadrature oracle.
    #[arg(long, global = true, env = "FIOCALC_THREADS")]
    pub threads: Option<usize>,
    /// Seed for sample-point generation.
    #[arg(long, global = true, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Validate and classify a phase function.
    Analyze,
    /// Leading term and remainder order of a stationary-phase integral.
    StationaryPhase,
    /// Principal symbol at a real critical point.
    Symbol,
    /// Clean composition of two operator kernels.
    Compose,
    /// Brute-force quadrature values.
    Oracle,
    /// Run the acceptance suite.
    Validate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Analyze => "analyze",
            Command::StationaryPhase => "stationary-phase",
            Command::Symbol => "symbol",
            Command::Compose => "compose",
            Command::Oracle => "oracle",
            Command::Validate => "validate",
        }
    }
}

#[derive(Debug, Error)]
#[error("{message}")]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
    pub diagnostics: Value,
}

impl CliError {
    fn new(code: &'static str, message: impl Into<String>) -> Self {
        CliError { code, message: message.into(), diagnostics: Value::Null }
    }

    fn invalid(message: impl Into<String>) -> Self {
        CliError::new("config_invalid", message)
    }
}

impl From<ExprError> for CliError {
    fn from(e: ExprError) -> Self {
        let diagnostics = match &e {
            ExprError::Syntax { line, col, msg } => obj([("line", Value::from(*line)), ("column", Value::from(*col)), ("reason", Value::from(msg.as_str()))]),
            ExprError::UnknownIdentifier { name, line, col } => {
                obj([("line", Value::from(*line)), ("column", Value::from(*col)), ("identifier", Value::from(name.as_str()))])
            }
            _ => Value::Null,
        };
        CliError { code: "expr_parse", message: e.to_string(), diagnostics }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        let code = match e {
            ConfigError::Parse(_) => "config_parse",
            ConfigError::Missing(_) => "missing_section",
            ConfigError::Invalid(_) => "config_invalid",
        };
        CliError::new(code, e.to_string())
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        CliError::new("oracle", e.to_string())
    }
}

impl From<PhaseError> for CliError {
    fn from(e: PhaseError) -> Self {
        match e {
            PhaseError::Expr(x) => x.into(),
            e => CliError::new("phase", e.to_string()),
        }
    }
}

impl From<SPError> for CliError {
    fn from(e: SPError) -> Self {
        match e {
            SPError::Expr(x) => x.into(),
            SPError::Oracle(x) => x.into(),
            e => CliError::new("stationary", e.to_string()),
        }
    }
}

impl From<SymbolError> for CliError {
    fn from(e: SymbolError) -> Self {
        match e {
            SymbolError::Expr(x) => x.into(),
            SymbolError::Phase(x) => x.into(),
            SymbolError::Oracle(x) => x.into(),
            e => CliError::new("symbol", e.to_string()),
        }
    }
}

impl From<ComposeError> for CliError {
    fn from(e: ComposeError) -> Self {
        match e {
            ComposeError::Expr(x) => x.into(),
            ComposeError::Phase(x) => x.into(),
            ComposeError::Symbol(x) => x.into(),
            ComposeError::Oracle(x) => x.into(),
            e => CliError::new("compose", e.to_string()),
        }
    }
}

/// A finished run: the command payload and whether its checks passed.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub report: Report,
    pub pass: bool,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.pass {
            0
        } else {
            2
        }
    }
}

/// Runs `command` on the config text. No I/O.
pub fn execute(command: Command, config_text: &str, seed: u64) -> Result<Outcome, CliError> {
    let cfg = ProblemConfig::parse(config_text)?;
    let (pass, payload) = match command {
        Command::Analyze => cmd_analyze(&cfg, seed)?,
        Command::StationaryPhase => cmd_stationary(&cfg)?,
        Command::Symbol => cmd_symbol(&cfg, seed)?,
        Command::Compose => cmd_compose(&cfg, seed)?,
        Command::Oracle => cmd_oracle(&cfg)?,
        Command::Validate => cmd_validate(&cfg, seed)?,
    };
    let mut report = Report::new(command.name(), config_text);
    report.insert("seed", Value::from(seed));
    report.insert("pass", Value::from(pass));
    for (k, v) in payload {
        report.insert(&k, v);
    }
    Ok(Outcome { report, pass })
}

pub fn error_report(command: Option<Command>, config_text: &str, err: &CliError) -> Report {
    let mut report = Report::new(command.map_or("none", Command::name), config_text);
    report.insert("pass", Value::from(false));
    report.insert("error", obj([("code", Value::from(err.code)), ("message", Value::from(err.message.as_str())), ("diagnostics", err.diagnostics.clone())]));
    report
}

/// Entry point for the binary; returns the process exit code.
pub fn main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        // Fails only if a pool already exists in this process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let (text, outcome) = match read_config(&cli) {
        Ok(text) => {
            let r = execute(cli.command, &text, cli.seed);
            (text, r)
        }
        Err(e) => (String::new(), Err(e)),
    };
    let (report, code) = match outcome {
        Ok(o) => {
            let code = o.exit_code();
            (o.report, code)
        }
        Err(e) => {
            eprintln!("error [{}]: {}", e.code, e.message);
            (error_report(Some(cli.command), &text, &e), 1)
        }
    };
    match write_report(&cli, &report.render()) {
        Ok(()) => code,
        Err(e) => {
            eprintln!("error [io]: {e}");
            1
        }
    }
}

fn read_config(cli: &Cli) -> Result<String, CliError> {
    match &cli.config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| CliError::new("io", format!("reading {}: {e}", path.display()))),
        // The suite has built-in problems; everything else needs a config.
        None if cli.command == Command::Validate => Ok(String::new()),
        None => Err(CliError::new("usage", format!("`{}` needs --config PATH", cli.command.name()))),
    }
}

fn write_report(cli: &Cli, text: &str) -> std::io::Result<()> {
    match &cli.out {
        Some(path) => std::fs::write(path, text),
        None => std::io::stdout().lock().write_all(text.as_bytes()),
    }
}

type Payload = Vec<(String, Value)>;

fn payload<const K: usize>(pairs: [(&str, Value); K]) -> Payload {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn vec_c(v: &[C64]) -> Value {
    Value::Array(v.iter().map(|&z| cnum(z)).collect())
}

fn branch_json(b: &BranchedSqrt) -> Value {
    obj([
        ("value", cnum(b.value)),
        ("det", cnum(b.det)),
        ("residual", num(b.residual())),
        ("path_nodes", Value::from(b.path.len())),
        ("subdivisions", Value::from(b.subdivisions)),
        ("min_abs_det", num(b.min_abs_det)),
        ("max_angle", num(b.max_angle)),
    ])
}

fn fit_json(fit: &Option<OrderFit>) -> Value {
    match fit {
        None => Value::Null,
        Some(f) => obj([("slope", num(f.slope)), ("intercept", num(f.intercept)), ("residual", num(f.residual)), ("used", Value::from(f.used.len())), ("dropped", Value::from(f.dropped.len()))]),
    }
}

fn pairing_samples(samples: &[PairingSample]) -> Value {
    Value::Array(
        samples
            .iter()
            .map(|s| obj([("t", num(s.t)), ("oracle", cnum(s.oracle)), ("predicted", cnum(s.predicted)), ("rel_error", num(s.rel_error)), ("nodes", Value::from(s.nodes.clone()))]))
            .collect(),
    )
}

/// Relative agreement good to `10/t` at every sample.
fn pairing_ok(samples: &[PairingSample]) -> bool {
    samples.iter().all(|s| s.rel_error <= 10.0 / s.t)
}

fn phase_section(cfg: &ProblemConfig) -> Result<&PhaseSection, CliError> {
    cfg.phase.as_ref().ok_or_else(|| ConfigError::Missing("phase").into())
}

fn oracle_template(cfg: &ProblemConfig, base: QuadratureSpec) -> QuadratureSpec {
    match &cfg.oracle {
        Some(o) => o.spec(base),
        None => base,
    }
}

fn build_phase(sec: &PhaseSection) -> Result<PhaseFunction, CliError> {
    if sec.big_n == 0 {
        return Err(CliError::invalid("phase.big_n must be at least 1 for a phase function"));
    }
    let phi = PhaseFunction::standard(&sec.expr, sec.n, sec.big_n)?;
    Ok(match &sec.patch {
        Some(p) => phi.with_patch(p.patch()),
        None => phi,
    })
}

fn real_seed(v: &[f64]) -> Vec<C64> {
    v.iter().map(|&x| C64::new(x, 0.0)).collect()
}

fn cmd_analyze(cfg: &ProblemConfig, seed: u64) -> Result<(bool, Payload), CliError> {
    let sec = phase_section(cfg)?;
    let phi = build_phase(sec)?;
    let samples = phi.sample_points(sec.samples, seed);
    let validation = validate_phase(&phi, &samples)?;

    // Real critical points: Newton from the configured point, then from
    // each patch sample; seeds that do not reach a real point are skipped.
    let mut seeds: Vec<Vec<f64>> = sec.point.iter().cloned().collect();
    seeds.extend(samples.iter().cloned());
    let mut critical = Vec::new();
    let mut first = None;
    for s in &seeds {
        if s.len() != phi.dim() {
            return Err(CliError::invalid(format!("phase.point has {} entries, layout has {}", s.len(), phi.dim())));
        }
        if let Ok(cp) = find_critical(&phi, &real_seed(s), None) {
            if cp.real {
                critical.push(cp.real_point());
                first.get_or_insert(cp);
            }
        }
    }
    let Some(cp) = first else {
        return Err(CliError::new("phase", "no real critical point reached from the configured seeds"));
    };
    let cls = classify(&phi, &critical)?;
    let degenerate = cls.kind == PhaseKind::DegenerateInvalid;
    // Positivity needs Λ as a graph over ξ; failing that is a failed check.
    let (positivity_pass, positivity) = if degenerate {
        (false, obj([("pass", Value::from(false)), ("skipped", Value::from("degenerate phase"))]))
    } else {
        match positivity_check(&phi, &critical, 0.1) {
            Ok(p) => (
                p.pass,
                obj([
                    ("min_im_generating", num(p.min_im_generating)),
                    ("min_im_phase", num(p.min_im_phase)),
                    ("xi_samples", Value::from(p.xi_samples)),
                    ("pass", Value::from(p.pass)),
                ]),
            ),
            Err(e @ PhaseError::NotXiGraph(_)) => (false, obj([("pass", Value::from(false)), ("error", Value::from(e.to_string()))])),
            Err(e) => return Err(e.into()),
        }
    };
    let lam = lambda_sample(&phi, &cp)?;
    let pass = validation.pass && positivity_pass && !degenerate;
    Ok((
        pass,
        payload([
            ("kind", Value::from(cls.kind.as_str())),
            ("excess", Value::from(cls.excess)),
            ("n", Value::from(cls.n)),
            ("big_n", Value::from(cls.big_n)),
            ("rank", Value::from(cls.m)),
            ("theta_prime", Value::from(cls.theta_prime.clone())),
            ("theta_second", Value::from(cls.theta_second.clone())),
            ("ranks", Value::from(cls.ranks.clone())),
            ("lambda_ranks", Value::from(cls.lambda_ranks.clone())),
            ("critical_points", Value::from(critical.len())),
            (
                "validation",
                obj([
                    ("samples", Value::from(validation.samples)),
                    ("max_euler_residual", num(validation.max_euler_residual)),
                    ("min_im", num(validation.min_im)),
                    ("min_grad_norm", num(validation.min_grad_norm)),
                    ("pass", Value::from(validation.pass)),
                ]),
            ),
            ("positivity", positivity),
            (
                "lagrangian_sample",
                obj([("x", vec_c(&lam.x)), ("xi", vec_c(&lam.xi)), ("im_phase", num(lam.im_phase)), ("homogeneity_residual", num(lam.homogeneity_residual))]),
            ),
        ]),
    ))
}

fn stationary_problem(cfg: &ProblemConfig) -> Result<SPProblem, CliError> {
    let sec = phase_section(cfg)?;
    if sec.big_n != 0 {
        return Err(CliError::invalid("a stationary-phase integral needs phase.big_n = 0"));
    }
    let amp = cfg.amplitude.as_ref().ok_or(ConfigError::Missing("amplitude"))?;
    let cutoff = cfg.stationary.as_ref().map_or(1.0, |s| s.cutoff);
    let seed = sec.point.clone().unwrap_or_else(|| vec![0.0; sec.n]);
    if seed.len() != sec.n {
        return Err(CliError::invalid(format!("phase.point has {} entries, expected {}", seed.len(), sec.n)));
    }
    let bounds = seed.iter().map(|&c| (c - cutoff, c + cutoff)).collect();
    let layout = VarLayout::new().with("x", sec.n, false);
    Ok(SPProblem::new(parse(&sec.expr)?, parse(&amp.expr)?, layout, &["x"], &[], seed, bounds, DEFAULT_K)?)
}

fn t_grid(cfg: &ProblemConfig) -> Vec<f64> {
    cfg.stationary.as_ref().map_or_else(crate::oracle::default_t_grid, |s| s.t_grid.clone())
}

fn cmd_stationary(cfg: &ProblemConfig) -> Result<(bool, Payload), CliError> {
    let p = stationary_problem(cfg)?;
    let lead = leading_term(&p, &[])?;
    let grid = t_grid(cfg);
    let r = remainder_order(&p, &[], &grid, &oracle_template(cfg, QuadratureSpec::new(vec![])))?;
    let slope = r.fit.as_ref().map(|f| f.slope);
    let slope_ok = if r.at_noise_floor || r.leading_vanishes { None } else { Some(slope.is_some_and(|s| (s - r.expected_slope).abs() <= 0.15)) };
    let pass = lead.positivity_ok() && slope_ok.unwrap_or(true);
    let samples = Value::Array(
        r.samples.iter().map(|s| obj([("t", num(s.t)), ("oracle", cnum(s.oracle)), ("leading", cnum(s.leading)), ("error", num(s.error))])).collect(),
    );
    Ok((
        pass,
        payload([
            ("n", Value::from(lead.n)),
            ("critical_point", vec_c(&lead.critical.z)),
            ("critical_residual", num(lead.critical.residual)),
            ("phase_value", cnum(lead.phase_value)),
            ("c0", cnum(lead.c0)),
            ("u_value", cnum(lead.u_value)),
            ("positivity_ok", Value::from(lead.positivity_ok())),
            ("branch", branch_json(&lead.branch)),
            ("samples", samples),
            ("fit", fit_json(&r.fit)),
            ("slope", opt_num(slope)),
            ("expected_slope", num(r.expected_slope)),
            ("at_noise_floor", Value::from(r.at_noise_floor)),
            ("leading_vanishes", Value::from(r.leading_vanishes)),
            ("slope_ok", slope_ok.map_or(Value::Null, Value::from)),
        ]),
    ))
}

fn symbol_setup(cfg: &ProblemConfig) -> Result<(PhaseFunction, Amplitude, crate::phase::CriticalPoint, crate::symbol::AuxPsi), CliError> {
    let sec = phase_section(cfg)?;
    let phi = build_phase(sec)?;
    let amp = cfg.amplitude.as_ref().ok_or(ConfigError::Missing("amplitude"))?;
    let a = Amplitude::parse(&amp.expr, &phi, amp.degree)?;
    let point = sec.point.as_ref().ok_or_else(|| CliError::invalid("phase.point (a real critical point seed) is required"))?;
    if point.len() != phi.dim() {
        return Err(CliError::invalid(format!("phase.point has {} entries, layout has {}", point.len(), phi.dim())));
    }
    let cp = find_critical(&phi, &real_seed(point), None)?;
    let (lambda, kappa) = cfg.psi.as_ref().map_or((1.0, 0.0), |p| (p.lambda, p.kappa));
    let psi = make_psi_damped(&phi, &cp, lambda, kappa)?;
    Ok((phi, a, cp, psi))
}

fn cmd_symbol(cfg: &ProblemConfig, seed: u64) -> Result<(bool, Payload), CliError> {
    let (phi, a, cp, psi) = symbol_setup(cfg)?;
    let sec = phase_section(cfg)?;
    let cls = classify(&phi, &[cp.real_point()])?;
    let homogeneity = a.validate(&phi, &phi.sample_points(sec.samples, seed))?;
    let fiber = fiber_box(&sec.fiber);
    let s = principal_symbol(&phi, &a, &cls, &cp, &psi, fiber.as_ref())?;
    let fiber_json = match &s.fiber {
        None => Value::Null,
        Some(f) => obj([
            ("nodes", Value::from(f.nodes.clone())),
            ("change", num(f.change)),
            ("doublings", Value::from(f.doublings)),
            ("boundary_max", num(f.boundary_max)),
            ("max_resolve_residual", num(f.max_resolve_residual)),
        ]),
    };
    let mut out = payload([
        ("kind", Value::from(cls.kind.as_str())),
        ("excess", Value::from(cls.excess)),
        ("x", nums(&s.x)),
        ("xi", nums(&s.xi)),
        ("value", cnum(s.value)),
        ("grade", num(s.grade)),
        ("section_degree", num(s.section_degree)),
        ("order", num(s.order)),
        ("amplitude_value", cnum(s.amplitude_value)),
        ("amplitude_homogeneity_residual", num(homogeneity)),
        ("sqrt_dphi", obj([("value", cnum(s.sqrt_dphi.value)), ("det", cnum(s.sqrt_dphi.det)), ("grade", num(s.sqrt_dphi.grade)), ("branch", branch_json(&s.sqrt_dphi.branch))])),
        ("fiber", fiber_json),
    ]);
    let mut pass = true;
    if cfg.oracle.is_some() {
        let st = cfg.stationary.clone();
        let (r_u, r_eta) = st.as_ref().map_or((1.0, 0.4), |s| (s.cutoff, s.eta_cutoff));
        let test = PairingTest::standard(&phi, &cls, &cp, r_u, r_eta, fiber.as_ref());
        let r = pairing_t(&phi, &a, &cls, &cp, &psi, &test, fiber.as_ref(), &t_grid(cfg), &oracle_template(cfg, QuadratureSpec::new(vec![])))?;
        pass = pairing_ok(&r.samples);
        out.push((
            "pairing".into(),
            obj([
                ("u_value", cnum(r.u_value)),
                ("top_constant", cnum(r.top_constant)),
                ("predicted_exponent", num(r.predicted_exponent)),
                ("samples", pairing_samples(&r.samples)),
                ("oracle_fit", fit_json(&r.oracle_fit)),
                ("pass", Value::from(pass)),
            ]),
        ));
    }
    Ok((pass, out))
}

/// σ(B) and the two code paths agree to this relative tolerance.
const CROSS_CHECK_TOL: f64 = 1e-8;

fn cmd_compose(cfg: &ProblemConfig, seed: u64) -> Result<(bool, Payload), CliError> {
    let c = cfg.compose.as_ref().ok_or(ConfigError::Missing("compose"))?;
    let k1 = c.left.build(crate::compose::Slot::Left)?;
    let k2 = c.right.build(crate::compose::Slot::Right)?;
    let plan = build_composed_phase(&k1, &k2)?;
    let pts: Vec<Vec<f64>> = plan.stationary_points(c.samples, seed)?.iter().map(|p| p.real_point()).collect();
    let excess = intersection_excess(&plan, &pts)?;
    let gamma = c.seed.clone().unwrap_or_else(|| gamma_seed(&plan));
    if gamma.len() != plan.phi.dim() {
        return Err(CliError::invalid(format!("compose.seed has {} entries, layout has {}", gamma.len(), plan.phi.dim())));
    }
    let cp = plan.stationary_point(&gamma)?;
    let cls = classify(&plan.phi, &[cp.real_point()])?;
    let (lambda, kappa) = cfg.psi.as_ref().map_or((1.0, 0.0), |p| (p.lambda, p.kappa));
    let psi = make_psi_damped(&plan.phi, &cp, lambda, kappa)?;
    let fiber = fiber_box(&c.fiber);
    let sym = composed_symbol(&plan, &cls, &cp, &psi, fiber.as_ref())?;
    let (m1, m2) = (k1.order(), k2.order());
    let mut pass = sym.cross_check <= CROSS_CHECK_TOL;
    let mut out = payload([
        ("excess", Value::from(excess.excess)),
        ("kind", Value::from(cls.kind.as_str())),
        ("omega_dim", Value::from(excess.omega_dim)),
        ("ranks", Value::from(excess.ranks.clone())),
        ("tangent_dims", Value::from(excess.tangent_dims.clone())),
        ("expected_tangent_dim", Value::from(excess.expected_tangent_dim)),
        ("orders", nums(&[m1, m2])),
        ("composed_order", num(composed_order(m1, m2, excess.excess))),
        ("gamma", nums(&cp.real_point())),
        ("symbol", cnum(sym.symbol.value)),
        ("symbol_omega", cnum(sym.value_omega)),
        ("direct", cnum(sym.direct)),
        ("jacobian", num(sym.jacobian)),
        ("cross_check", num(sym.cross_check)),
    ]);
    if let Some(p) = &c.pairing {
        let (_, base, _, _) = order_fit_setup();
        let damped = make_psi_damped(&plan.phi, &cp, p.lambda, p.kappa)?;
        let r = composed_pairing(&plan, &k1, &k2, &cls, &cp, &damped, fiber.as_ref(), &p.test(), &p.t_grid, &oracle_template(cfg, base))?;
        let order_ok = r.fitted_order.map(|m| (m - r.predicted_order).abs() <= 0.15);
        let ok = pairing_ok(&r.samples) && order_ok.unwrap_or(true);
        pass &= ok;
        out.push((
            "pairing".into(),
            obj([
                ("psi_concavity", cnum(C64::new(p.lambda, p.kappa))),
                ("symbol", cnum(r.symbol.symbol.value)),
                ("top_constant", cnum(r.top_constant)),
                ("predicted_exponent", num(r.predicted_exponent)),
                ("samples", pairing_samples(&r.samples)),
                ("oracle_fit", fit_json(&r.oracle_fit)),
                ("fitted_order", opt_num(r.fitted_order)),
                ("predicted_order", num(r.predicted_order)),
                ("order_ok", order_ok.map_or(Value::Null, Value::from)),
                ("pass", Value::from(ok)),
            ]),
        ));
    }
    Ok((pass, out))
}

fn cmd_oracle(cfg: &ProblemConfig) -> Result<(bool, Payload), CliError> {
    let sec = phase_section(cfg)?;
    if sec.big_n == 0 {
        let p = stationary_problem(cfg)?;
        let lead = leading_term(&p, &[])?;
        let template = oracle_template(cfg, QuadratureSpec::new(vec![]));
        let mut rows = Vec::new();
        for t in t_grid(cfg) {
            let v = crate::stationary::oracle_integral(&p, &[], t, &template)?;
            rows.push(obj([
                ("t", num(t)),
                ("value", cnum(v.value)),
                ("leading", cnum(lead.value(t))),
                ("nodes", Value::from(v.nodes.clone())),
                ("change", num(v.change)),
                ("doublings", Value::from(v.doublings)),
            ]));
        }
        return Ok((true, payload([("integral", Value::from("stationary-phase")), ("samples", Value::Array(rows))])));
    }
    if cfg.amplitude.is_none() {
        return Err(ConfigError::Missing("amplitude").into());
    }
    let (phi, a, cp, psi) = symbol_setup(cfg)?;
    let cls = classify(&phi, &[cp.real_point()])?;
    let fiber = fiber_box(&sec.fiber);
    let (r_u, r_eta) = cfg.stationary.as_ref().map_or((1.0, 0.4), |s| (s.cutoff, s.eta_cutoff));
    let test = PairingTest::standard(&phi, &cls, &cp, r_u, r_eta, fiber.as_ref());
    let r = pairing_t(&phi, &a, &cls, &cp, &psi, &test, fiber.as_ref(), &t_grid(cfg), &oracle_template(cfg, QuadratureSpec::new(vec![])))?;
    Ok((true, payload([("integral", Value::from("symbol-pairing")), ("samples", pairing_samples(&r.samples))])))
}

fn cmd_validate(cfg: &ProblemConfig, seed: u64) -> Result<(bool, Payload), CliError> {
    let ids: Vec<u32> = cfg.validate.as_ref().and_then(|v| v.criteria.clone()).unwrap_or_else(|| CRITERIA.iter().map(|c| c.0).collect());
    let results = run_suite(&ids, &SuiteOptions { seed });
    let passed = results.iter().filter(|c| c.pass).count();
    let pass = passed == results.len();
    Ok((
        pass,
        payload([
            ("passed", Value::from(passed)),
            ("total", Value::from(results.len())),
            ("criteria", Value::Array(results.iter().map(|c| c.to_json()).collect())),
        ]),
    ))
}
