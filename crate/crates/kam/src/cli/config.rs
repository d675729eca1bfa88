//! Run configuration: TOML in, validated structs out, and a canonical
//! emitter so that `emit(parse(emit(c))) == emit(c)`.

use super::example::{coorbital_scales, example_coorbital, perturbation_size, CoorbitalParams, EXAMPLE_N};
use crate::model::{HamiltonianSpec, ScaleSet};
use crate::schedule::{build_schedule, exponent_bound, RunMode, ScheduleInit};
use crate::series::FourierTaylorSeries;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub hamiltonian: HamiltonianConfig,
    pub mode: ModeConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub step: StepTunables,
    #[serde(default)]
    pub conditions: ConditionsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measure: Option<MeasureConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HamiltonianConfig {
    /// Base point `ξ` in absolute actions.
    pub base_point: Vec<f64>,
    pub model: ModelConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelConfig {
    Coorbital(CoorbitalConfig),
    Polynomial(PolynomialConfig),
}

/// The built-in six-scale example; the perturbation weights are in units
/// of `ε^{a+2}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoorbitalConfig {
    pub epsilon: f64,
    pub a: f64,
    #[serde(default = "one")]
    pub amplitude: f64,
    #[serde(default)]
    pub drift: Vec<f64>,
    #[serde(default)]
    pub tail: f64,
}

fn one() -> f64 {
    1.0
}

/// A general polynomial Hamiltonian `Σ ε_i H_i(I) + ε P(I, θ)`. Scales are
/// numbered from 1; `parts[i]` is multiplied by `scales[i]`. Series use the
/// line format `k_1 … k_n | j_1 … j_n | re im`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolynomialConfig {
    pub n: usize,
    pub scales: Vec<f64>,
    pub epsilon_ratio: f64,
    pub parts: Vec<String>,
    #[serde(default)]
    pub perturbation: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    Full,
    FrequencyPreserving,
    Isoenergetic,
}

impl ModeKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(ModeKind::Full),
            "frequency_preserving" | "frequency" => Some(ModeKind::FrequencyPreserving),
            "isoenergetic" | "iso" => Some(ModeKind::Isoenergetic),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeConfig {
    pub kind: ModeKind,
    /// Number of preserved frequencies; defaults to `n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n1: Option<usize>,
    /// Fixed rows instead of the best-conditioned choice.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub r0: f64,
    pub s0: f64,
    pub eta0: f64,
    pub h0: f64,
    pub gamma0: f64,
    pub tau: f64,
    pub m: u32,
    pub a: f64,
    pub nu_max: usize,
    #[serde(default = "default_theta")]
    pub theta_gate: f64,
}

fn default_theta() -> f64 {
    crate::kamstep::DEFAULT_THETA_GATE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepTunables {
    pub lie_order: usize,
    pub slack: f64,
    pub lipschitz: f64,
    pub trim: f64,
    pub iso_tol: f64,
    pub iso_max_iter: usize,
    pub c1: f64,
}

impl Default for StepTunables {
    fn default() -> Self {
        StepTunables {
            lie_order: 3,
            slack: 0.5,
            lipschitz: 1.0,
            trim: 1e-16,
            iso_tol: 1e-12,
            iso_max_iter: 50,
            c1: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionsConfig {
    pub check_r: bool,
    pub check_k: bool,
    pub check_i: bool,
    pub c_k: f64,
    pub c_i: f64,
    pub svd_tol: f64,
    /// Derivative order for (R); `n − 1` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_order: Option<usize>,
    /// Sample points for (R); the base point when empty.
    pub grid: Vec<Vec<f64>>,
}

impl Default for ConditionsConfig {
    fn default() -> Self {
        ConditionsConfig {
            check_r: true,
            check_k: true,
            check_i: true,
            c_k: 1.0,
            c_i: 1.0,
            svd_tol: crate::conditions::DEFAULT_SVD_TOL,
            r_order: None,
            grid: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureConfig {
    /// Strictly decreasing.
    pub gammas: Vec<f64>,
    pub k_max: u32,
    pub samples: u64,
    pub seed: u64,
    /// Parameter box, `[lo, hi]` per coordinate.
    pub domain: Vec<[f64; 2]>,
    /// Defaults to the schedule's `τ`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    /// Exponent of `|k|` in the threshold; defaults to `τ`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub denom_exponent: Option<f64>,
    /// `N` in the reference exponents; defaults to `n − 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: "kam-out".into() }
    }
}

/// One violated constraint.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConfigError {
    Syntax(String),
    Invalid(Vec<FieldError>),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Syntax(s) => write!(f, "{s}"),
            ConfigError::Invalid(errs) => {
                for (i, e) in errs.iter().enumerate() {
                    if i > 0 {
                        writeln!(f)?;
                    }
                    write!(f, "{}: {}", e.field, e.message)?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for ConfigError {}

/// Parses and validates.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Canonical TOML text.
pub fn emit_config(cfg: &RunConfig) -> String {
    toml::to_string(cfg).expect("config serializes")
}

struct Errors(Vec<FieldError>);

impl Errors {
    fn check(&mut self, ok: bool, field: &str, message: impl Into<String>) {
        if !ok {
            self.0.push(FieldError {
                field: field.into(),
                message: message.into(),
            });
        }
    }
}

fn positive(x: f64) -> bool {
    x > 0.0 && x.is_finite()
}

impl RunConfig {
    pub fn n(&self) -> usize {
        match &self.hamiltonian.model {
            ModelConfig::Coorbital(_) => EXAMPLE_N,
            ModelConfig::Polynomial(p) => p.n,
        }
    }

    pub fn n1(&self) -> usize {
        self.mode.n1.unwrap_or(self.n())
    }

    pub fn run_mode(&self) -> RunMode {
        match self.mode.kind {
            ModeKind::Full => RunMode::Full,
            ModeKind::FrequencyPreserving => RunMode::FrequencyPreserving {
                n1: self.n1(),
                rows: self.mode.rows.clone(),
            },
            ModeKind::Isoenergetic => RunMode::Isoenergetic {
                n1: self.n1(),
                rows: self.mode.rows.clone(),
            },
        }
    }

    pub fn schedule_init(&self) -> ScheduleInit {
        let s = &self.schedule;
        ScheduleInit {
            r0: s.r0,
            s0: s.s0,
            eta0: s.eta0,
            h0: s.h0,
            gamma0: s.gamma0,
            tau: s.tau,
        }
    }

    /// Builds the Hamiltonian. Only fails on configs that did not validate.
    pub fn build_spec(&self) -> Result<HamiltonianSpec<f64>, String> {
        let m = self.schedule.m;
        match &self.hamiltonian.model {
            ModelConfig::Coorbital(c) => example_coorbital(
                &CoorbitalParams {
                    epsilon: c.epsilon,
                    a: c.a,
                    amplitude: c.amplitude,
                    drift: c.drift.clone(),
                    tail: c.tail,
                    m_taylor: m,
                },
                None,
            )
            .map_err(|e| e.to_string()),
            ModelConfig::Polynomial(p) => {
                let scales = ScaleSet::new(p.scales.clone(), p.epsilon_ratio).map_err(|e| e.to_string())?;
                let parts = p
                    .parts
                    .iter()
                    .map(|t| FourierTaylorSeries::from_text(t, p.n, true))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| e.to_string())?;
                let pert = FourierTaylorSeries::from_text(&p.perturbation, p.n, true).map_err(|e| e.to_string())?;
                HamiltonianSpec::new(parts, pert, scales, m).map_err(|e| e.to_string())
            }
        }
    }

    /// Field-precise constraint check.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut e = Errors(Vec::new());
        let n = self.n();
        match &self.hamiltonian.model {
            ModelConfig::Coorbital(c) => {
                let f = "hamiltonian.model.coorbital";
                e.check(c.epsilon > 0.0 && c.epsilon < 1.0, &format!("{f}.epsilon"), "must lie in (0, 1)");
                e.check(c.a > 2.0 && c.a.is_finite(), &format!("{f}.a"), "must be > 2");
                e.check(c.amplitude.is_finite(), &format!("{f}.amplitude"), "must be finite");
                e.check(
                    c.drift.is_empty() || c.drift.len() == EXAMPLE_N,
                    &format!("{f}.drift"),
                    format!("needs 0 or {EXAMPLE_N} entries"),
                );
                e.check(c.drift.iter().all(|x| x.is_finite()), &format!("{f}.drift"), "must be finite");
                e.check(c.tail.is_finite(), &format!("{f}.tail"), "must be finite");
            }
            ModelConfig::Polynomial(p) => {
                let f = "hamiltonian.model.polynomial";
                e.check(p.n >= 1, &format!("{f}.n"), "must be >= 1");
                e.check(!p.scales.is_empty(), &format!("{f}.scales"), "needs at least one scale");
                for (i, s) in p.scales.iter().enumerate() {
                    e.check(*s > 0.0 && *s <= 1.0, &format!("{f}.scales[{}]", i + 1), "must lie in (0, 1]");
                }
                e.check(positive(p.epsilon_ratio), &format!("{f}.epsilon_ratio"), "must be > 0");
                e.check(
                    p.parts.len() == p.scales.len(),
                    &format!("{f}.parts"),
                    format!("needs one part per scale ({})", p.scales.len()),
                );
                if p.n >= 1 {
                    for (i, t) in p.parts.iter().enumerate() {
                        match FourierTaylorSeries::<f64>::from_text(t, p.n, true) {
                            Ok(s) => e.check(
                                s.terms().all(|(k, _, _)| k.is_zero()),
                                &format!("{f}.parts[{}]", i + 1),
                                "must not depend on the angles",
                            ),
                            Err(err) => e.check(false, &format!("{f}.parts[{}]", i + 1), err.to_string()),
                        }
                    }
                    if let Err(err) = FourierTaylorSeries::<f64>::from_text(&p.perturbation, p.n, true) {
                        e.check(false, &format!("{f}.perturbation"), err.to_string());
                    }
                }
            }
        }
        let bp = &self.hamiltonian.base_point;
        e.check(bp.len() == n, "hamiltonian.base_point", format!("needs {n} entries"));
        e.check(bp.iter().all(|x| x.is_finite()), "hamiltonian.base_point", "must be finite");

        if self.mode.kind != ModeKind::Full {
            let n1 = self.n1();
            e.check(n1 >= 1 && n1 <= n, "mode.n1", format!("must lie in 1..={n}"));
            if let Some(rows) = &self.mode.rows {
                e.check(rows.len() == n1, "mode.rows", format!("needs n1 = {n1} entries"));
                e.check(rows.iter().all(|&r| r < n), "mode.rows", format!("entries must be < {n}"));
            }
        }
        let c = &self.conditions;
        e.check(c.check_r, "conditions.check_r", "every mode relies on condition R");
        if self.mode.kind != ModeKind::Full {
            e.check(c.check_k, "conditions.check_k", "frequency preserving and isoenergetic modes rely on condition K");
        }
        if self.mode.kind == ModeKind::Isoenergetic {
            e.check(c.check_i, "conditions.check_i", "isoenergetic mode relies on condition I; refusing to run without it");
        }
        e.check(positive(c.c_k), "conditions.c_k", "must be > 0");
        e.check(positive(c.c_i), "conditions.c_i", "must be > 0");
        e.check(positive(c.svd_tol), "conditions.svd_tol", "must be > 0");
        for (i, p) in c.grid.iter().enumerate() {
            e.check(p.len() == n, &format!("conditions.grid[{i}]"), format!("needs {n} entries"));
        }

        let s = &self.schedule;
        e.check(positive(s.r0), "schedule.r0", "must be > 0");
        e.check(positive(s.s0), "schedule.s0", "must be > 0");
        e.check(s.eta0 > 0.0, "schedule.eta0", "must be > 0");
        e.check(s.eta0 < 0.125, "schedule.eta0", "eta0 must be < 1/8");
        e.check(positive(s.h0), "schedule.h0", "must be > 0");
        e.check(positive(s.gamma0), "schedule.gamma0", "must be > 0");
        e.check(s.tau >= n as f64 - 1.0, "schedule.tau", format!("must be at least n - 1 = {}", n as f64 - 1.0));
        e.check(s.m >= 3, "schedule.m", "must be >= 3");
        if s.m >= 3 {
            let bound = exponent_bound(s.m);
            e.check(s.a > bound, "schedule.a", format!("must exceed ln 4 / ln(2 - 2/m) = {bound}"));
        }
        e.check(s.nu_max >= 1, "schedule.nu_max", "must be >= 1");
        e.check(s.theta_gate > 0.0 && s.theta_gate <= 1.0, "schedule.theta_gate", "must lie in (0, 1]");

        let t = &self.step;
        e.check(t.lie_order >= 1, "step.lie_order", "must be >= 1");
        e.check(t.slack >= 0.0 && t.slack.is_finite(), "step.slack", "must be >= 0");
        e.check(positive(t.lipschitz), "step.lipschitz", "must be > 0");
        e.check(t.trim >= 0.0 && t.trim < 1.0, "step.trim", "must lie in [0, 1)");
        e.check(positive(t.iso_tol), "step.iso_tol", "must be > 0");
        e.check(t.iso_max_iter >= 1, "step.iso_max_iter", "must be >= 1");
        e.check(t.c1 >= 0.0 && t.c1.is_finite(), "step.c1", "must be >= 0");

        if let Some(m) = &self.measure {
            e.check(m.gammas.len() >= 4, "measure.gammas", "needs at least 4 values");
            e.check(m.gammas.iter().all(|g| positive(*g)), "measure.gammas", "must be > 0");
            e.check(m.gammas.windows(2).all(|w| w[1] < w[0]), "measure.gammas", "must be strictly decreasing");
            if let (Some(f), Some(l)) = (m.gammas.first(), m.gammas.last()) {
                e.check(f / l >= 100.0 * (1.0 - 1e-12), "measure.gammas", "must span at least 2 decades");
            }
            e.check(m.k_max >= 1, "measure.k_max", "must be >= 1");
            e.check(m.samples >= 1, "measure.samples", "must be >= 1");
            e.check(m.domain.len() == n, "measure.domain", format!("needs {n} intervals"));
            e.check(
                m.domain.iter().all(|[lo, hi]| lo.is_finite() && hi.is_finite() && hi > lo),
                "measure.domain",
                "intervals need lo < hi",
            );
            let tau = m.tau.unwrap_or(s.tau);
            e.check(tau > n as f64 - 1.0, "measure.tau", format!("must exceed n - 1 = {}", n as f64 - 1.0));
        }
        e.check(!self.output.dir.is_empty(), "output.dir", "must not be empty");

        if e.0.is_empty() {
            if let Err(msg) = self.build_spec() {
                e.check(false, "hamiltonian", msg);
            }
        }
        if e.0.is_empty() {
            e.0.extend(self.schedule_check());
        }
        if e.0.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(e.0))
        }
    }

    fn schedule_check(&self) -> Vec<FieldError> {
        let spec = match self.build_spec() {
            Ok(s) => s,
            Err(_) => return Vec::new(),
        };
        match build_schedule::<f64>(&self.schedule_init(), self.schedule.m, self.schedule.a, self.schedule.nu_max, &spec.scales, spec.n) {
            Ok(_) => Vec::new(),
            Err(err) => vec![FieldError {
                field: "schedule".into(),
                message: err.to_string(),
            }],
        }
    }
}

/// Tuned constants of the built-in example.
pub mod builtin {
    pub const EPSILON: f64 = 1e-3;
    pub const A: f64 = 4.0;
    pub const M: u32 = 6;
    pub const SCHEDULE_A: f64 = 2.75;
    pub const ETA0: f64 = 0.12;
    pub const S0: f64 = 3.0;
    pub const TAU: f64 = 5.0;
    /// `ε̃γ₀`.
    pub const GAP: f64 = 1e15;
    pub const NU_MAX: usize = 5;
    /// `2^154`: a degree-`m` weight that keeps the error in range for five steps.
    pub const TAIL: f64 = (1u128 << 127) as f64 * (1u32 << 27) as f64;
    pub const BASE_POINT: [f64; 6] = [1e14, 1e-3, 1.0, 1.0, 1.0, 1.0];
}

/// `r₀` that meets gates (c) and (d) for `ν < nu_max` with `θ = 0.1`,
/// scaled down by `0.999`.
pub fn example_radius(scales: &ScaleSet<f64>, gamma0: f64, nu_max: usize) -> f64 {
    use builtin::*;
    let probe = ScheduleInit {
        r0: 1.0,
        s0: S0,
        eta0: ETA0,
        h0: 1.0,
        gamma0,
        tau: TAU,
    };
    let sched = build_schedule::<f64>(&probe, M, SCHEDULE_A, nu_max, scales, EXAMPLE_N).expect("built-in schedule");
    let x = sched.entries[..nu_max]
        .iter()
        .map(|e| e.r * e.big_k.powf(TAU + 1.0) / e.gamma)
        .fold(0.0, f64::max);
    crate::kamstep::DEFAULT_THETA_GATE * scales.eps_min() / x * 0.999
}

/// The built-in example config.
pub fn builtin_config(kind: ModeKind) -> RunConfig {
    use builtin::*;
    let eps = coorbital_scales(EPSILON, A);
    let emin = eps.iter().copied().fold(f64::INFINITY, f64::min);
    let scales = ScaleSet::new(eps, perturbation_size(EPSILON, A) / emin).expect("example scales");
    let gamma0 = GAP / emin;
    let r0 = example_radius(&scales, gamma0, NU_MAX);
    let mut drift = vec![0.0; EXAMPLE_N];
    drift[1] = 1.0;
    RunConfig {
        hamiltonian: HamiltonianConfig {
            base_point: BASE_POINT.to_vec(),
            model: ModelConfig::Coorbital(CoorbitalConfig {
                epsilon: EPSILON,
                a: A,
                amplitude: 1.0,
                drift,
                tail: TAIL,
            }),
        },
        mode: ModeConfig {
            kind,
            n1: if kind == ModeKind::Full { None } else { Some(EXAMPLE_N) },
            rows: None,
        },
        schedule: ScheduleConfig {
            r0,
            s0: S0,
            eta0: ETA0,
            h0: r0,
            gamma0,
            tau: TAU,
            m: M,
            a: SCHEDULE_A,
            nu_max: NU_MAX,
            theta_gate: crate::kamstep::DEFAULT_THETA_GATE,
        },
        step: StepTunables::default(),
        conditions: ConditionsConfig {
            svd_tol: 0.1 * emin,
            ..ConditionsConfig::default()
        },
        measure: Some(MeasureConfig {
            gammas: vec![1.0, 0.3, 0.1, 0.03, 0.01],
            k_max: 3,
            samples: 500_000,
            seed: 1,
            // Thin in ξ₃ and ξ₆ so the bands near ξ₃ = ξ₆ carry enough samples.
            domain: vec![[1.0, 2.0], [1.0, 2.0], [1.0, 1.001], [1.0, 2.0], [1.0, 2.0], [1.0, 1.001]],
            tau: Some(6.0),
            denom_exponent: None,
            order: None,
        }),
        output: OutputConfig::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_parses_and_round_trips() {
        let text = emit_config(&builtin_config(ModeKind::Full));
        let cfg = parse_config(&text).unwrap();
        assert_eq!(emit_config(&cfg), text);
    }

    #[test]
    fn eta0_bound_is_named() {
        let mut cfg = builtin_config(ModeKind::Full);
        cfg.schedule.eta0 = 0.2;
        let err = parse_config(&emit_config(&cfg)).unwrap_err();
        assert!(err.to_string().contains("eta0 must be < 1/8"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = emit_config(&builtin_config(ModeKind::Full)) + "\n[extra]\nfoo = 1\n";
        assert!(matches!(parse_config(&text), Err(ConfigError::Syntax(_))));
    }

    #[test]
    fn syntax_error_has_line() {
        let err = parse_config("[mode]\nkind = \n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn iso_without_check_i_refused() {
        let mut cfg = builtin_config(ModeKind::Isoenergetic);
        cfg.conditions.check_i = false;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("conditions.check_i"), "{err}");
    }
}
