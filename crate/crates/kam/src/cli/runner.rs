//! Orchestration: conditions, iteration, measure, verdicts.

use super::config::{emit_config, ConfigError, ModeKind, ModelConfig, RunConfig};
use super::report::{IdentityCheck, Invariants, RunReport};
use crate::conditions::{bordered_determinant, check_i, check_k, check_r, eigen_lower_bound, frequency_field, hessian_determinant};
use crate::kamstep::{ShiftReport, StepConfig};
use crate::measure::{fit_measure_exponent, PolynomialMap, ResonanceQuery};
use crate::model::{expand_at, HamiltonianSpec, NormalForm};
use crate::schedule::{build_schedule, convergence_report, run_iteration, RunOptions, StepSchedule};
use std::fmt;

pub const EXIT_PASS: i32 = 0;
pub const EXIT_VERDICT: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

/// Relative tolerance of the closed-form determinant checks.
pub const IDENTITY_TOL: f64 = 1e-10;
/// Allowed relative change of a preserved frequency over a run.
pub const FREQUENCY_TOL: f64 = 5e-12;
/// Allowed relative spread of `ω_final/ω_initial` over the selected rows.
pub const RATIO_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Check,
    Run,
    Measure,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Check => "check",
            Command::Run => "run",
            Command::Measure => "measure",
        }
    }
}

#[derive(Debug)]
pub enum RunError {
    Config(ConfigError),
    Internal(String),
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "config error: {e}"),
            RunError::Internal(e) => write!(f, "internal error: {e}"),
        }
    }
}

impl std::error::Error for RunError {}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => EXIT_CONFIG,
            RunError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

fn internal(phase: &str) -> impl Fn(String) -> RunError + '_ {
    move |e| RunError::Internal(format!("{phase}: {e}"))
}

/// Exit status as a function of the verdicts alone.
pub fn exit_code(report: &RunReport) -> i32 {
    if report.verdicts.iter().filter(|v| v.mandatory).all(|v| v.pass) {
        EXIT_PASS
    } else {
        EXIT_VERDICT
    }
}

/// Classifies the scale vector by how it decreases along the index.
pub fn ordering_annotation(eps: &[f64]) -> String {
    // Scales within rounding of each other count as tied.
    let tied = |x: f64, y: f64| (x - y).abs() <= 1e-12 * x.abs().max(y.abs());
    let pairs = || eps.windows(2);
    if pairs().all(|w| w[1] < w[0] && !tied(w[0], w[1])) {
        "scales: ordered".into()
    } else if pairs().all(|w| w[1] < w[0] || tied(w[0], w[1])) {
        "scales: tied".into()
    } else {
        "scales: disordered".into()
    }
}

/// `−128 ε^{10+2a} Σ w_l I_l²` with `w = (1, ε², ε^a, ε³, ε^{a+1}, ε⁴)`.
pub fn coorbital_bordered_expected(epsilon: f64, a: f64, i0: &[f64]) -> f64 {
    let w = super::example::coorbital_scales(epsilon, a);
    let q: f64 = w.iter().zip(i0).map(|(w, x)| w * x * x).sum();
    -128.0 * epsilon.powf(10.0 + 2.0 * a) * q
}

pub fn coorbital_hessian_expected(epsilon: f64, a: f64) -> f64 {
    64.0 * epsilon.powf(10.0 + 2.0 * a)
}

/// Hessian and bordered determinant identities at the base point.
pub fn coorbital_identities(nf: &NormalForm<f64>, epsilon: f64, a: f64, base: &[f64]) -> Vec<IdentityCheck> {
    let zeros = vec![0.0; nf.n()];
    vec![
        IdentityCheck::new(
            "hessian_determinant",
            hessian_determinant(nf),
            coorbital_hessian_expected(epsilon, a),
            IDENTITY_TOL,
        ),
        IdentityCheck::new(
            "bordered_determinant",
            bordered_determinant(nf, &zeros),
            coorbital_bordered_expected(epsilon, a, base),
            IDENTITY_TOL,
        ),
    ]
}

fn run_options(cfg: &RunConfig) -> RunOptions<f64> {
    let t = &cfg.step;
    RunOptions {
        step: StepConfig {
            lie_order: t.lie_order,
            slack: t.slack,
            lipschitz: t.lipschitz,
            trim: t.trim,
        },
        iso_tol: t.iso_tol,
        iso_max_iter: t.iso_max_iter,
        error_floor: None,
        c1: t.c1,
    }
}

fn make_sched(cfg: &RunConfig, spec: &HamiltonianSpec<f64>) -> Result<StepSchedule<f64>, RunError> {
    let s = &cfg.schedule;
    build_schedule(&cfg.schedule_init(), s.m, s.a, s.nu_max, &spec.scales, spec.n)
        .map(|sc| sc.with_theta_gate(s.theta_gate))
        .map_err(|e| RunError::Internal(format!("schedule: {e}")))
}

/// Applies `--mode` and `--seed`, then revalidates.
pub fn apply_overrides(mut cfg: RunConfig, mode: Option<ModeKind>, seed: Option<u64>) -> Result<RunConfig, RunError> {
    if let Some(m) = mode {
        cfg.mode.kind = m;
    }
    if let (Some(s), Some(ms)) = (seed, cfg.measure.as_mut()) {
        ms.seed = s;
    }
    cfg.validate().map_err(RunError::Config)?;
    Ok(cfg)
}

/// Runs `cmd` on a validated config.
pub fn execute(cfg: &RunConfig, cmd: Command) -> Result<RunReport, RunError> {
    let spec = cfg.build_spec().map_err(internal("model"))?;
    let sched = make_sched(cfg, &spec)?;
    let mut rep = RunReport {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: cmd.name().into(),
        mode: cfg.run_mode().name().into(),
        seed: cfg.measure.as_ref().map(|m| m.seed),
        config: emit_config(cfg),
        schedule: sched.entries.clone(),
        ..Default::default()
    };
    rep.annotations.push(ordering_annotation(spec.scales.epsilons()));

    if cmd != Command::Measure {
        let conditions_ok = conditions_phase(cfg, &spec, &sched, &mut rep)?;
        if cmd == Command::Run {
            if conditions_ok {
                iteration_phase(cfg, &spec, &sched, &mut rep)?;
            } else {
                rep.verdict("iteration", false, true, "skipped: a required condition failed");
            }
        }
    }
    if cmd == Command::Measure && cfg.measure.is_none() {
        return Err(RunError::Config(ConfigError::Invalid(vec![super::config::FieldError {
            field: "measure".into(),
            message: "the measure command needs a [measure] block".into(),
        }])));
    }
    if cmd != Command::Check && cfg.measure.is_some() {
        measure_phase(cfg, &spec, &mut rep)?;
    }
    rep.settle();
    Ok(rep)
}

fn conditions_phase(
    cfg: &RunConfig,
    spec: &HamiltonianSpec<f64>,
    sched: &StepSchedule<f64>,
    rep: &mut RunReport,
) -> Result<bool, RunError> {
    let c = &cfg.conditions;
    let xi = &cfg.hamiltonian.base_point;
    let p0 = sched.params(0).map_err(|e| RunError::Internal(format!("schedule: {e}")))?;
    let exp = expand_at(spec, xi, &p0.window).map_err(|e| RunError::Internal(format!("expansion: {e}")))?;
    let nf = &exp.nf;
    let kind = cfg.mode.kind;
    let n1 = cfg.n1();
    let mut ok = true;

    let field = frequency_field(&spec.integrable_parts, &spec.scales);
    let grid = if c.grid.is_empty() { vec![xi.clone()] } else { c.grid.clone() };
    let r = check_r(&field, &grid, Some(c.svd_tol), c.r_order).map_err(|e| RunError::Internal(format!("condition R: {e}")))?;
    rep.verdict("condition_R", r.pass, true, format!("margin {:e}", r.margin));
    ok &= r.pass;
    rep.conditions.push(r);

    if c.check_k {
        let k = check_k(nf, n1, c.c_k).map_err(|e| RunError::Internal(format!("condition K: {e}")))?;
        let mandatory = kind != ModeKind::Full;
        rep.verdict("condition_K", k.pass, mandatory, format!("n1 = {n1}, margin {:e}", k.margin));
        if mandatory {
            ok &= k.pass;
        }
        rep.conditions.push(k);
    }
    if c.check_i {
        let i = check_i(nf, n1, c.c_i).map_err(|e| RunError::Internal(format!("condition I: {e}")))?;
        let mandatory = kind == ModeKind::Isoenergetic;
        rep.verdict("condition_I", i.pass, mandatory, format!("n1 = {n1}, margin {:e}", i.margin));
        if mandatory {
            ok &= i.pass;
        }
        rep.conditions.push(i);
    }
    if let ModelConfig::Coorbital(co) = &cfg.hamiltonian.model {
        for id in coorbital_identities(nf, co.epsilon, co.a, xi) {
            rep.verdict(&id.name, id.pass, true, format!("relative error {:e}", id.rel_error));
            ok &= id.pass;
            rep.identities.push(id);
        }
    }
    match eigen_lower_bound(&nf.a_parts, &nf.scales) {
        Ok(b) => {
            rep.verdict("eigen_bound", b.pass, false, format!("lambda_min {:e}, bound {:e}", b.lambda_min, b.bound));
            rep.eigen_bound = Some(b);
        }
        Err(e) => rep.verdict("eigen_bound", false, false, e.to_string()),
    }
    Ok(ok)
}

fn rel_change(a: f64, b: f64) -> f64 {
    if a == 0.0 {
        b.abs()
    } else {
        ((b - a) / a).abs()
    }
}

fn iteration_phase(
    cfg: &RunConfig,
    spec: &HamiltonianSpec<f64>,
    sched: &StepSchedule<f64>,
    rep: &mut RunReport,
) -> Result<(), RunError> {
    let xi = &cfg.hamiltonian.base_point;
    let out = run_iteration(spec, xi, sched, &cfg.run_mode(), &run_options(cfg))
        .map_err(|e| RunError::Internal(format!("iteration: {e}")))?;
    let steps = out.trace.rows.len();
    let detail = match &out.failure {
        Some(f) => format!("stopped at nu = {} ({}): {}", f.nu, f.kind, f.message),
        None => format!("{steps} steps accepted"),
    };
    rep.verdict("iteration", out.failure.is_none() && steps == sched.nu_max(), true, detail);
    let contraction = out.trace.rows.iter().all(|r| r.error_ok && r.new_error <= r.next_target);
    rep.verdict("contraction", contraction && steps > 0, true, "error contracts by eta^m and stays under target");
    if steps > 0 {
        let summary = convergence_report(&out.trace);
        rep.verdict("convergence", summary.cauchy, false, format!("product bound {:e}", summary.product_bound));
        rep.convergence = Some(summary);
    }

    let w0 = out.initial_nf.omega();
    let w1 = out.nf.omega();
    let changes: Vec<f64> = w0.iter().zip(&w1).map(|(a, b)| rel_change(*a, *b)).collect();
    let (e0, e1) = (out.initial_nf.e(), out.nf.e());
    let e_same = out.initial_nf.e_parts.iter().zip(&out.nf.e_parts).all(|(a, b)| a.to_bits() == b.to_bits());
    let rows = out.reports.iter().find_map(|r| match &r.shift {
        ShiftReport::Frequency { rows, .. } | ShiftReport::Isoenergetic { rows, .. } => Some(rows.clone()),
        ShiftReport::None => None,
    });
    match cfg.mode.kind {
        ModeKind::Full => {}
        ModeKind::FrequencyPreserving => {
            let rows = rows.unwrap_or_default();
            let worst = rows.iter().map(|&r| changes[r]).fold(0.0, f64::max);
            rep.verdict(
                "frequency_preserved",
                !rows.is_empty() && worst <= FREQUENCY_TOL,
                true,
                format!("max relative change {worst:e} on rows {rows:?}"),
            );
        }
        ModeKind::Isoenergetic => {
            let rows = rows.unwrap_or_default();
            let ratios: Vec<f64> = rows.iter().filter(|&&r| w0[r] != 0.0).map(|&r| w1[r] / w0[r]).collect();
            let spread = match ratios.first() {
                Some(&q) => ratios.iter().map(|x| rel_change(q, *x)).fold(0.0, f64::max),
                None => f64::INFINITY,
            };
            let c_t = out
                .reports
                .iter()
                .filter_map(|r| match &r.shift {
                    ShiftReport::Isoenergetic { c_measured, .. } => Some(*c_measured),
                    _ => None,
                })
                .fold(0.0, f64::max);
            rep.verdict("energy_preserved", e_same, true, format!("e = {e1:e}"));
            rep.verdict(
                "frequency_ratio_preserved",
                spread <= RATIO_TOL,
                true,
                format!("ratio spread {spread:e} on rows {rows:?}; |t| <= {c_t:e} eps"),
            );
        }
    }
    rep.invariants = Some(Invariants {
        omega_initial: w0,
        omega_final: w1,
        omega_rel_change: changes,
        e_initial: e0,
        e_final: e1,
        e_bit_identical: e_same,
    });
    rep.steps = out.reports;
    rep.trace = out.trace;
    rep.failure = out.failure;
    Ok(())
}

/// The resonance query a config describes, at `γ = gammas[0]`.
pub fn measure_query(cfg: &RunConfig, spec: &HamiltonianSpec<f64>) -> Result<ResonanceQuery, RunError> {
    let m = cfg.measure.as_ref().ok_or_else(|| RunError::Internal("no measure block".into()))?;
    let field = frequency_field(&spec.integrable_parts, &spec.scales);
    let map = PolynomialMap::from_series(&field).map_err(|e| RunError::Internal(format!("measure: {e}")))?;
    let tau = m.tau.unwrap_or(cfg.schedule.tau);
    let mut q = ResonanceQuery::new(map, m.domain.iter().map(|[a, b]| (*a, *b)).collect(), m.k_max)
        .with_tau(tau)
        .with_gamma(m.gammas[0])
        .with_eps_tilde(spec.scales.eps_min())
        .with_samples(m.samples)
        .with_seed(m.seed);
    if let Some(p) = m.denom_exponent {
        q = q.with_denom_exponent(p);
    }
    Ok(q)
}

fn measure_phase(cfg: &RunConfig, spec: &HamiltonianSpec<f64>, rep: &mut RunReport) -> Result<(), RunError> {
    let m = cfg.measure.as_ref().expect("checked by caller");
    let q = measure_query(cfg, spec)?;
    let order = m.order.unwrap_or(spec.n.saturating_sub(1));
    match fit_measure_exponent(&q, &m.gammas, order) {
        Ok(fit) => {
            let monotone = fit.points.windows(2).all(|w| w[1].estimate <= w[0].estimate);
            rep.verdict(
                "measure",
                fit.beta > 0.0 && monotone && fit.vs_n_plus_one.pass,
                true,
                format!(
                    "beta {:.4} +/- {:.4}; vs 1/(N+1) = {:.4}: {}; vs 1/N = {:.4}: {}",
                    fit.beta,
                    fit.std_error,
                    fit.vs_n_plus_one.exponent,
                    fit.vs_n_plus_one.pass,
                    fit.vs_n.exponent,
                    fit.vs_n.pass
                ),
            );
            if fit.exponents_disagree {
                rep.annotations
                    .push("measure: the 1/(N+1) and 1/N reference exponents give different verdicts".into());
            }
            rep.measure = Some(fit);
        }
        Err(e) => {
            rep.verdict("measure", false, true, e.to_string());
            rep.measure_error = Some(e.to_string());
        }
    }
    Ok(())
}
