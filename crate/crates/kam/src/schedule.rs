//! Parameter sequences for repeated steps, the run driver, and the
//! convergence summary of the weighted deviations.

use crate::kamstep::{
    error_update, gate_check, kam_step, Correction, KamStepReport, StepConfig, StepError, StepParams,
};
use crate::model::{expand_at, HamiltonianSpec, ModelError, NormalForm, ScaleSet};
use crate::scalar::Real;
use crate::series::{DomainWindow, FourierTaylorSeries, SeriesError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_NU_MAX: usize = 12;
/// Strip fraction lost per step: `σ_ν = (3/20)s_ν`.
pub const SIGMA_FRACTION: f64 = 0.15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("m must be > 2, got {0}")]
    BadM(u32),
    #[error("a must be > ln 4 / ln(2 - 2/m) = {bound}, got {a}")]
    BadExponent { a: f64, bound: f64 },
    #[error("eta0 must lie in (0, 1/8), got {0}")]
    BadEta(f64),
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("tau must be >= n - 1 = {min}, got {tau}")]
    BadTau { tau: f64, min: f64 },
    #[error("gate ({gate}) fails at nu = 0: {lhs:e} vs {rhs:e}")]
    InitialGate { gate: String, lhs: f64, rhs: f64 },
    #[error(transparent)]
    Step(#[from] StepError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Series(#[from] SeriesError),
}

/// Initial values `(r₀, s₀, η₀, h₀, γ₀)` and the Diophantine exponent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleInit {
    pub r0: f64,
    pub s0: f64,
    pub eta0: f64,
    pub h0: f64,
    pub gamma0: f64,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub nu: usize,
    pub r: f64,
    pub s: f64,
    pub sigma: f64,
    pub eta: f64,
    pub h: f64,
    /// `ln r_ν` and `ln η_ν`; these stay finite after `r` and `η` underflow.
    pub ln_r: f64,
    pub ln_eta: f64,
    pub big_k: f64,
    pub gamma: f64,
    /// `ε̃γ_ν r_ν² η_ν^m σ_ν^{τ+1}`, the error the step must stay under.
    pub eps_target: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepSchedule<T: Real> {
    pub init: ScheduleInit,
    pub m_taylor: u32,
    pub a: f64,
    pub entries: Vec<ScheduleEntry>,
    pub scales: ScaleSet<T>,
    pub n: usize,
    pub theta_gate: f64,
}

/// `ln 4 / ln(2 − 2/m)`, the lower limit on `a`.
pub fn exponent_bound(m: u32) -> f64 {
    4f64.ln() / (2.0 - 2.0 / m as f64).ln()
}

/// `K = (⌊ln(1/η^m)⌋ + 1)^a`.
pub fn truncation_order(eta: f64, m: u32, a: f64) -> f64 {
    truncation_order_ln(eta.ln(), m, a)
}

/// `truncation_order` from `ln η`.
pub fn truncation_order_ln(ln_eta: f64, m: u32, a: f64) -> f64 {
    ((-(m as f64) * ln_eta).floor() + 1.0).powf(a)
}

/// `γ_ν = γ₀(1 − 2^{−ν−1})`.
pub fn gamma_at(gamma0: f64, nu: usize) -> f64 {
    gamma0 * (1.0 - 0.5f64.powi(nu as i32 + 1))
}

/// Builds the sequences for `ν = 0..=nu_max` and checks every gate at
/// `ν = 0`, gate (e) with the configured `ϵ`.
pub fn make_schedule<T: Real>(
    init: &ScheduleInit,
    m: u32,
    a: f64,
    nu_max: usize,
    scales: &ScaleSet<T>,
    n: usize,
) -> Result<StepSchedule<T>, ScheduleError> {
    let sched = build_schedule(init, m, a, nu_max, scales, n)?;
    let p0 = sched.params(0)?;
    let gates = gate_check(&p0, n, scales.epsilon_ratio());
    if let Some(g) = gates.first_failure() {
        return Err(ScheduleError::InitialGate {
            gate: g.name.clone(),
            lhs: g.lhs,
            rhs: g.rhs,
        });
    }
    Ok(sched)
}

/// `make_schedule` without the gate check at `ν = 0`.
pub fn build_schedule<T: Real>(
    init: &ScheduleInit,
    m: u32,
    a: f64,
    nu_max: usize,
    scales: &ScaleSet<T>,
    n: usize,
) -> Result<StepSchedule<T>, ScheduleError> {
    if m <= 2 {
        return Err(ScheduleError::BadM(m));
    }
    let bound = exponent_bound(m);
    if !(a > bound) {
        return Err(ScheduleError::BadExponent { a, bound });
    }
    if !(init.eta0 > 0.0 && init.eta0 < 0.125) {
        return Err(ScheduleError::BadEta(init.eta0));
    }
    for (name, value) in [("r0", init.r0), ("s0", init.s0), ("h0", init.h0), ("gamma0", init.gamma0)] {
        if !(value > 0.0) || !value.is_finite() {
            return Err(ScheduleError::NonPositive { name, value });
        }
    }
    let min_tau = n as f64 - 1.0;
    if !(init.tau >= min_tau) {
        return Err(ScheduleError::BadTau { tau: init.tau, min: min_tau });
    }
    let emin = scales.eps_min().to_f64_lossy();
    let mut entries = Vec::with_capacity(nu_max + 1);
    let (mut r, mut h, mut eta) = (init.r0, init.h0, init.eta0);
    let (mut ln_r, mut ln_eta) = (init.r0.ln(), init.eta0.ln());
    let mf = m as f64;
    for nu in 0..=nu_max {
        let s = init.s0 * 0.25f64.powi(nu as i32);
        let sigma = SIGMA_FRACTION * s;
        let gamma = gamma_at(init.gamma0, nu);
        entries.push(ScheduleEntry {
            nu,
            r,
            s,
            sigma,
            eta,
            h,
            ln_r,
            ln_eta,
            big_k: truncation_order_ln(ln_eta, m, a),
            gamma,
            eps_target: emin * gamma * r * r * eta.powf(mf) * sigma.powf(init.tau + 1.0),
        });
        r *= eta;
        h *= eta;
        ln_r += ln_eta;
        eta = eta.powf((2.0 * mf - 2.0) / mf);
        ln_eta *= (2.0 * mf - 2.0) / mf;
    }
    Ok(StepSchedule {
        init: init.clone(),
        m_taylor: m,
        a,
        entries,
        scales: scales.clone(),
        n,
        theta_gate: crate::kamstep::DEFAULT_THETA_GATE,
    })
}

impl<T: Real> StepSchedule<T> {
    pub fn nu_max(&self) -> usize {
        self.entries.len() - 1
    }

    pub fn with_theta_gate(mut self, theta: f64) -> Self {
        self.theta_gate = theta;
        self
    }

    /// Step parameters at index `ν`.
    pub fn params(&self, nu: usize) -> Result<StepParams<T>, ScheduleError> {
        let e = &self.entries[nu];
        let window = DomainWindow::new(T::lit(e.r), T::lit(e.s), T::lit(e.h))?;
        let p = StepParams::new(
            window,
            T::lit(e.sigma),
            T::lit(e.eta),
            T::lit(e.big_k),
            T::lit(e.gamma),
            T::lit(self.init.tau),
            self.m_taylor,
            self.scales.clone(),
            self.n,
        )?;
        Ok(p.with_theta_gate(T::lit(self.theta_gate)))
    }

    /// `r₀·η₀^{(m^ν − (2m−2)^ν)/(m^{ν−1}(2−m))}`, computed without the recursion.
    pub fn closed_form_r(&self, nu: usize) -> f64 {
        self.closed_form_ln_r(nu).exp()
    }

    /// Logarithm of `closed_form_r`.
    pub fn closed_form_ln_r(&self, nu: usize) -> f64 {
        let m = self.m_taylor as f64;
        // (m^ν − (2m−2)^ν)/m^{ν−1} = m·(1 − ((2m−2)/m)^ν)
        let expo = m * (1.0 - ((2.0 * m - 2.0) / m).powi(nu as i32)) / (2.0 - m);
        self.init.r0.ln() + expo * self.init.eta0.ln()
    }
}

/// How each step is corrected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunMode {
    Full,
    FrequencyPreserving { n1: usize, rows: Option<Vec<usize>> },
    Isoenergetic { n1: usize, rows: Option<Vec<usize>> },
}

impl RunMode {
    pub fn name(&self) -> &'static str {
        match self {
            RunMode::Full => "full",
            RunMode::FrequencyPreserving { .. } => "frequency_preserving",
            RunMode::Isoenergetic { .. } => "isoenergetic",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions<T: Real> {
    pub step: StepConfig<T>,
    pub iso_tol: f64,
    pub iso_max_iter: usize,
    /// Stop once the measured error is at or below this; `None` never stops early.
    pub error_floor: Option<f64>,
    /// `c₁` in the product bound `Π(1 + c₁·d_ν)`.
    pub c1: f64,
}

impl<T: Real> Default for RunOptions<T> {
    fn default() -> Self {
        RunOptions {
            step: StepConfig::default(),
            iso_tol: 1e-12,
            iso_max_iter: 50,
            error_floor: None,
            c1: 1.0,
        }
    }
}

/// One row of the convergence trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub nu: usize,
    pub r: f64,
    pub s: f64,
    pub sigma: f64,
    pub eta: f64,
    pub big_k: f64,
    pub gamma: f64,
    /// Measured `ε_ν` on `(r_ν, s_ν)`.
    pub error: f64,
    /// Measured `ε_{ν+1}` on `(r_{ν+1}, s_{ν+1})`.
    pub new_error: f64,
    pub contraction_ratio: f64,
    pub eta_m: f64,
    /// `ε̃γ_{ν+1}r_{ν+1}²η_{ν+1}^mσ_{ν+1}^{τ+1}`.
    pub next_target: f64,
    pub error_ok: bool,
    /// `max(ϵ_ν/(γ_ν r_ν σ_ν^{τ+1}), ε_ν/(r_ν h_ν))`.
    pub deviation: f64,
    pub product_bound: f64,
    pub gate_margins: [f64; 5],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub rows: Vec<TraceRow>,
}

impl ConvergenceTrace {
    pub fn deviations(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.deviation).collect()
    }

    /// `ε_0, ε_1, …`: the start error of every step, then the last new error.
    pub fn errors(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.rows.iter().map(|r| r.error).collect();
        if let Some(last) = self.rows.last() {
            v.push(last.new_error);
        }
        v
    }
}

/// Why a run stopped early.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub nu: usize,
    /// `gate`, `divisor`, `correction`, `contraction` or `internal`.
    pub kind: String,
    pub message: String,
    pub gate: Option<String>,
    pub mode: Option<Vec<i64>>,
}

impl RunFailure {
    fn from_step(nu: usize, e: &StepError) -> Self {
        let (kind, gate, mode) = match e {
            StepError::GateFailure { gate, .. } => ("gate", Some(gate.clone()), None),
            StepError::DivisorFailure { k, .. } => ("divisor", None, Some(k.clone())),
            StepError::AllResonant { .. } => ("divisor", None, None),
            StepError::SingularBlock(_)
            | StepError::ShiftTooLarge { .. }
            | StepError::Divergence { .. }
            | StepError::NoConvergence(_) => ("correction", None, None),
            _ => ("internal", None, None),
        };
        RunFailure {
            nu,
            kind: kind.to_string(),
            message: e.to_string(),
            gate,
            mode,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome<T: Real> {
    pub initial_nf: NormalForm<T>,
    pub nf: NormalForm<T>,
    pub pert: FourierTaylorSeries<T>,
    pub trace: ConvergenceTrace,
    pub reports: Vec<KamStepReport>,
    pub failure: Option<RunFailure>,
}

impl<T: Real> RunOutcome<T> {
    pub fn accepted(&self) -> bool {
        self.failure.is_none()
    }
}

/// Runs steps `ν = 0..nu_max` from the expansion of `spec` at `xi`. The
/// conditions that `mode` relies on are the caller's responsibility; a
/// correction that cannot be formed ends the run as a failure.
pub fn run_iteration<T: Real>(
    spec: &HamiltonianSpec<T>,
    xi: &[T],
    sched: &StepSchedule<T>,
    mode: &RunMode,
    opts: &RunOptions<T>,
) -> Result<RunOutcome<T>, ScheduleError> {
    let p0 = sched.params(0)?;
    let exp = expand_at(spec, xi, &p0.window)?;
    let mut nf = exp.nf.clone();
    let mut pert = exp.step_perturbation()?;
    let initial_nf = nf.clone();
    let correction = match mode {
        RunMode::Full => Correction::None,
        RunMode::FrequencyPreserving { n1, rows } => Correction::Frequency {
            n1: *n1,
            rows: rows.clone(),
        },
        RunMode::Isoenergetic { n1, rows } => Correction::Isoenergetic {
            n1: *n1,
            rows: rows.clone(),
            tol: opts.iso_tol,
            max_iter: opts.iso_max_iter,
        },
    };
    let emin = sched.scales.eps_min().to_f64_lossy();
    let tau = sched.init.tau;
    let mut trace = ConvergenceTrace::default();
    let mut reports = Vec::new();
    let mut failure = None;
    let mut product = 1.0;
    for nu in 0..sched.nu_max() {
        let p = sched.params(nu)?;
        let e = &sched.entries[nu];
        let out = match kam_step(&nf, &pert, &p, &opts.step, &correction) {
            Ok(o) => o,
            Err(err) => {
                failure = Some(RunFailure::from_step(nu, &err));
                break;
            }
        };
        let p_next = sched.params(nu + 1)?;
        let rep = out.report;
        let error_ok = error_update(&rep, &p, &p_next, opts.step.slack);
        let error = rep.old_error;
        let deviation = (error / emin / (e.gamma * e.r * e.sigma.powf(tau + 1.0))).max(error / (e.r * e.h));
        product *= 1.0 + opts.c1 * deviation;
        let g = &rep.gates;
        trace.rows.push(TraceRow {
            nu,
            r: e.r,
            s: e.s,
            sigma: e.sigma,
            eta: e.eta,
            big_k: e.big_k,
            gamma: e.gamma,
            error,
            new_error: rep.new_error,
            contraction_ratio: rep.contraction_ratio,
            eta_m: e.eta.powi(sched.m_taylor as i32),
            next_target: sched.entries[nu + 1].eps_target,
            error_ok,
            deviation,
            product_bound: product,
            gate_margins: [g.a.margin, g.b.margin, g.c.margin, g.d.margin, g.e.margin],
        });
        let new_error = rep.new_error;
        reports.push(rep);
        nf = out.nf;
        pert = out.pert;
        if !error_ok {
            failure = Some(RunFailure {
                nu,
                kind: "contraction".into(),
                message: format!("new error {new_error:e} misses the contraction or target bound"),
                gate: None,
                mode: None,
            });
            break;
        }
        if opts.error_floor.is_some_and(|f| new_error <= f) {
            break;
        }
    }
    Ok(RunOutcome {
        initial_nf,
        nf,
        pert,
        trace,
        reports,
        failure,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSummary {
    pub deviations: Vec<f64>,
    pub partial_sums: Vec<f64>,
    pub product_bound: f64,
    /// Geometric estimate of the unsummed tail.
    pub tail_estimate: f64,
    pub cauchy: bool,
}

/// Relative tail size accepted by the Cauchy verdict.
pub const CAUCHY_TOL: f64 = 1e-6;

/// Partial sums, `Π(1 + c₁d_ν)`, and a Cauchy verdict: the last ratio
/// `q = d_last/d_prev` must be below one and the geometric tail
/// `d_last·q/(1−q)` below `CAUCHY_TOL` of the sum.
pub fn convergence_summary(deviations: &[f64], c1: f64) -> ConvergenceSummary {
    let mut partial_sums = Vec::with_capacity(deviations.len());
    let mut sum = 0.0;
    let mut product = 1.0;
    for &d in deviations {
        sum += d;
        product *= 1.0 + c1 * d;
        partial_sums.push(sum);
    }
    let (tail_estimate, cauchy) = match deviations {
        [] => (0.0, false),
        _ if deviations.iter().all(|&d| d == 0.0) => (0.0, true),
        [.., last] if *last == 0.0 => (0.0, true),
        [_] => (f64::INFINITY, false),
        [.., prev, last] => {
            let q = last / prev;
            if q.is_finite() && q < 1.0 {
                let tail = last * q / (1.0 - q);
                (tail, tail <= CAUCHY_TOL * sum)
            } else {
                (f64::INFINITY, false)
            }
        }
    };
    ConvergenceSummary {
        deviations: deviations.to_vec(),
        partial_sums,
        product_bound: product,
        tail_estimate,
        cauchy,
    }
}

pub fn convergence_report(trace: &ConvergenceTrace) -> ConvergenceSummary {
    convergence_summary(&trace.deviations(), 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn init() -> ScheduleInit {
        ScheduleInit {
            r0: 1e-3,
            s0: 1.0,
            eta0: 0.1,
            h0: 1e-3,
            gamma0: 1.0,
            tau: 1.0,
        }
    }

    fn scales() -> ScaleSet<f64> {
        ScaleSet::new(vec![1.0], 1e-3).unwrap()
    }

    #[test]
    fn strip_quarters() {
        let s = build_schedule(&init(), 4, 4.0, 10, &scales(), 2).unwrap();
        for e in &s.entries {
            assert_eq!(e.s, 0.25f64.powi(e.nu as i32));
        }
    }

    #[test]
    fn eta_recursion_value() {
        let s = build_schedule(&init(), 4, 4.0, 2, &scales(), 2).unwrap();
        assert!((s.entries[1].eta - 0.0316227766016838).abs() < 1e-15);
    }

    #[test]
    fn exponent_constraint() {
        assert!((exponent_bound(4) - 3.4190225827029095).abs() < 1e-14);
        assert!(matches!(
            build_schedule(&init(), 4, 3.0, 2, &scales(), 2),
            Err(ScheduleError::BadExponent { .. })
        ));
        assert!(build_schedule(&init(), 4, 4.0, 2, &scales(), 2).is_ok());
    }

    #[test]
    fn closed_form_matches_recursion() {
        let s = build_schedule(&init(), 5, 4.0, 8, &scales(), 2).unwrap();
        for e in &s.entries {
            let c = s.closed_form_r(e.nu);
            assert!(((c - e.r) / e.r).abs() < 1e-12, "nu {}", e.nu);
        }
    }

    #[test]
    fn summary_cases() {
        let one = convergence_summary(&[0.0], 1.0);
        assert!(one.cauchy);
        assert_eq!(one.product_bound, 1.0);
        assert!(!convergence_summary(&[1.0, 1.0, 1.0], 1.0).cauchy);
    }
}
