//! Acceptance suite: one line per criterion, nonzero exit on any failure.

mod common;

use kam::cli::config::{builtin_config, ModeKind, RunConfig};
use kam::cli::example::{example_coorbital, CoorbitalParams};
use kam::cli::report::RunReport;
use kam::cli::runner::{coorbital_bordered_expected, coorbital_hessian_expected, execute, Command};
use kam::conditions::{bordered_determinant, eigen_lower_bound, hessian_determinant};
use kam::kamstep::{homological_residual, solve_homological, time_one_map, ShiftReport, StepParams};
use kam::measure::{affine_1d_resonant_length, fit_measure_exponent, resonance_measure, PolynomialMap, ResonanceQuery};
use kam::model::{expand_at, ScaleSet};
use kam::schedule::{build_schedule, ScheduleInit};
use kam::series::DomainWindow;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use std::time::{Duration, Instant};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn rel(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        a.abs()
    } else {
        ((a - b) / b).abs()
    }
}

fn within(limit: Duration, elapsed: Duration) -> Result<(), String> {
    if elapsed <= limit {
        Ok(())
    } else {
        Err(format!("took {:.2} s, limit {:.0} s", elapsed.as_secs_f64(), limit.as_secs_f64()))
    }
}

/// The determinant weights as stated for this criterion, `I₃²` weighted by one.
fn stated_bordered(epsilon: f64, a: f64, i: &[f64]) -> f64 {
    let w = [1.0, epsilon * epsilon, 1.0, epsilon.powi(3), epsilon.powf(1.0 + a), epsilon.powi(4)];
    -128.0 * epsilon.powf(10.0 + 2.0 * a) * w.iter().zip(i).map(|(w, x)| w * x * x).sum::<f64>()
}

/// Checked against the stated weights. These cannot hold once `I₃ ≠ 0`: the
/// Hessian entry `2ε^a` of that coordinate forces the weight `ε^a`. The
/// Hessian-consistent error is reported alongside so a failure is readable.
fn determinant_identities() -> Check {
    let start = Instant::now();
    let mut rng = common::rng(101);
    let (mut worst_h, mut worst_b, mut worst_consistent) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let epsilon = rng.random_range(1e-3..0.2);
        let a = rng.random_range(2.0f64..5.0).max(2.0 + 1e-9);
        let params = CoorbitalParams {
            epsilon,
            a,
            amplitude: 1.0,
            drift: vec![],
            tail: 0.0,
            m_taylor: 4,
        };
        let spec = example_coorbital(&params, None).map_err(|e| e.to_string())?;
        let window = DomainWindow::new(1e-3, 1.0, 1e-3).unwrap();
        for _ in 0..10 {
            let i0: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let nf = expand_at(&spec, &i0, &window).map_err(|e| e.to_string())?.nf;
            let zeros = [0.0; 6];
            let h = rel(hessian_determinant(&nf), coorbital_hessian_expected(epsilon, a));
            let got = bordered_determinant(&nf, &zeros);
            worst_h = worst_h.max(h);
            worst_b = worst_b.max(rel(got, stated_bordered(epsilon, a, &i0)));
            worst_consistent = worst_consistent.max(rel(got, coorbital_bordered_expected(epsilon, a, &i0)));
        }
    }
    within(Duration::from_secs(1), start.elapsed())?;
    let detail = format!(
        "200 evaluations, hessian {worst_h:.1e}, bordered vs stated weights {worst_b:.1e}, \
         bordered with I3 weight eps^a {worst_consistent:.1e}"
    );
    if worst_h.max(worst_b) <= 1e-10 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn schedule_exactness() -> Check {
    let start = Instant::now();
    let init = ScheduleInit {
        r0: 0.5,
        s0: 1.0,
        eta0: 0.05,
        h0: 0.5,
        gamma0: 1.0,
        tau: 5.0,
    };
    let n = 6;
    let scales = ScaleSet::new(vec![1.0], 1e-3).unwrap();
    let sched = build_schedule(&init, 4, 4.0, 20, &scales, n).map_err(|e| e.to_string())?;
    let mut worst_s = 0.0f64;
    let mut worst_r = 0.0f64;
    let mut min_gate = f64::INFINITY;
    for e in &sched.entries {
        worst_s = worst_s.max(rel(e.s, 0.25f64.powi(e.nu as i32) * init.s0));
        worst_r = worst_r.max(rel(e.ln_r, sched.closed_form_ln_r(e.nu)));
        if e.r > f64::MIN_POSITIVE {
            worst_r = worst_r.max(rel(e.r, sched.closed_form_r(e.nu)));
        }
        min_gate = min_gate.min(e.sigma * e.big_k / (n as f64 + 1.0));
    }
    within(Duration::from_secs(1), start.elapsed())?;
    if worst_s <= 1e-12 && worst_r <= 1e-12 && min_gate > 1.0 {
        Ok(format!(
            "nu <= 20: s error {worst_s:.1e}, r error {worst_r:.1e}, min sigma*K/(n+1) = {min_gate:.3e}"
        ))
    } else {
        Err(format!("s error {worst_s:.1e}, r error {worst_r:.1e}, min sigma*K/(n+1) = {min_gate:.3e}"))
    }
}

fn homological_exactness() -> Check {
    let start = Instant::now();
    let mut rng = common::rng(303);
    let mut terms = 0;
    for case in 0..100 {
        let n = rng.random_range(2..=3);
        let tau = n as f64;
        let gamma = 1e-2;
        let omega = common::diophantine_omega(&mut rng, n, 8, gamma, tau);
        let nf = common::random_normal_form(&mut rng, &omega, 4, 1e-3);
        let r = common::random_real_series(&mut rng, n, 8, 3, 12, 1.0);
        let window = DomainWindow::new(0.1, 1.0, 0.1).unwrap();
        let scales = nf.scales.clone();
        let p = StepParams::new(window, 0.1, 0.1, 8.0, gamma, tau, 4, scales, n).map_err(|e| e.to_string())?;
        let f = solve_homological(&nf, &r, &p).map_err(|e| format!("case {case}: {e}"))?;
        let res = homological_residual(&nf, &f.series, &r, &p).map_err(|e| e.to_string())?;
        let norm = res.majorant_norm(1.0, 1.0).unwrap();
        if norm != 0.0 {
            return Err(format!("case {case}: residual majorant {norm:e} over {} terms", res.len()));
        }
        terms += f.series.len();
    }
    within(Duration::from_secs(10), start.elapsed())?;
    Ok(format!("100 pairs, residual majorant exactly 0 ({terms} generating terms)"))
}

fn symplecticity() -> Check {
    let mut rng = common::rng(404);
    let (r, s) = (0.2, 0.1);
    let mut worst = 0.0f64;
    for point in 0..20 {
        let n = rng.random_range(1..=3);
        let f = common::random_real_series(&mut rng, n, 3, 2, 6, 0.02);
        let map = time_one_map(&f, 4).map_err(|e| e.to_string())?;
        let bound = map.remainder_derivative_bound(r, s).map_err(|e| e.to_string())?;
        let actions: Vec<f64> = (0..n).map(|_| rng.random_range(-r..r)).collect();
        let angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        let defect = map.symplectic_defect(&actions, &angles);
        if defect > 10.0 * bound {
            return Err(format!("point {point}: defect {defect:e} > 10 x {bound:e}"));
        }
        if bound > 0.0 {
            worst = worst.max(defect / bound);
        }
    }
    Ok(format!("20 points at L = 4, max defect/remainder = {worst:.2e}"))
}

fn run_builtin(kind: ModeKind) -> Result<RunReport, String> {
    let mut cfg: RunConfig = builtin_config(kind);
    cfg.measure = None;
    execute(&cfg, Command::Run).map_err(|e| e.to_string())
}

fn frequency_preservation() -> Check {
    let start = Instant::now();
    let fp = run_builtin(ModeKind::FrequencyPreserving)?;
    let full = run_builtin(ModeKind::Full)?;
    within(Duration::from_secs(30), start.elapsed())?;
    let steps = fp.trace.rows.len();
    let (Some(a), Some(b)) = (&fp.invariants, &full.invariants) else {
        return Err("a run produced no invariants".into());
    };
    let worst = a.omega_rel_change.iter().copied().fold(0.0, f64::max);
    let moved = b.omega_rel_change.iter().copied().fold(0.0, f64::max);
    if fp.failure.is_some() || steps != 5 {
        return Err(format!("frequency-preserving run stopped after {steps} steps"));
    }
    if worst <= 5e-12 && moved > 10.0 * 5e-12 {
        Ok(format!("5 steps, max change {worst:.1e} preserved vs {moved:.2e} in full mode"))
    } else {
        Err(format!("preserved change {worst:.1e}, full-mode change {moved:.1e}"))
    }
}

fn isoenergetic_invariants() -> Check {
    let rep = run_builtin(ModeKind::Isoenergetic)?;
    let inv = rep.invariants.as_ref().ok_or("no invariants")?;
    if rep.failure.is_some() || rep.trace.rows.len() != 5 {
        return Err(format!("run stopped after {} steps", rep.trace.rows.len()));
    }
    let mut c_max = 0.0f64;
    let mut rows = Vec::new();
    for s in &rep.steps {
        if let ShiftReport::Isoenergetic { t, eps, c_measured, rows: r, .. } = &s.shift {
            if t.abs() > c_measured * eps * (1.0 + 1e-12) {
                return Err(format!("|t| = {t:e} exceeds C eps = {:e}", c_measured * eps));
            }
            c_max = c_max.max(*c_measured);
            rows = r.clone();
        } else {
            return Err("a step carried no iso-energetic shift".into());
        }
    }
    let q: Vec<f64> = rows.iter().map(|&i| inv.omega_final[i] / inv.omega_initial[i]).collect();
    let spread = q.iter().map(|x| rel(*x, q[0])).fold(0.0, f64::max);
    if inv.e_bit_identical && spread <= 1e-10 {
        Ok(format!("e bit-identical, ratio spread {spread:.1e}, measured C = {c_max:.3e}"))
    } else {
        Err(format!("e identical {}, ratio spread {spread:.1e}", inv.e_bit_identical))
    }
}

fn error_contraction() -> Check {
    let rep = run_builtin(ModeKind::Full)?;
    let rows = &rep.trace.rows;
    if rows.len() != 5 {
        return Err(format!("only {} steps accepted", rows.len()));
    }
    let mut worst_ratio = 0.0f64;
    let mut worst_target = 0.0f64;
    for r in rows {
        let entry = &rep.schedule[r.nu];
        let ratio = r.new_error / (r.error * r.eta_m * 1.5);
        worst_ratio = worst_ratio.max(ratio);
        worst_target = worst_target.max(r.error / entry.eps_target).max(r.new_error / r.next_target);
    }
    if worst_ratio <= 1.0 && worst_target <= 1.0 {
        Ok(format!(
            "nu = 1..5: max eps_nu/(1.5 eps_(nu-1) eta^m) = {worst_ratio:.3e}, max eps/target = {worst_target:.3e}"
        ))
    } else {
        Err(format!("contraction ratio {worst_ratio:.3e}, target ratio {worst_target:.3e}"))
    }
}

fn measure_scaling() -> Check {
    let start = Instant::now();
    let q = ResonanceQuery::new(PolynomialMap::identity(2), vec![(1.0, 2.0), (1.0, 2.0)], 10)
        .with_tau(1.5)
        .with_samples(1_000_000)
        .with_seed(8);
    let fit = fit_measure_exponent(&q, &[1e-2, 1e-3, 1e-4, 1e-5], 1).map_err(|e| e.to_string())?;
    let one_sided = fit.beta >= 0.5 - 2.0 * fit.std_error;
    let q1 = ResonanceQuery::new(PolynomialMap::diagonal(&[0.7]), vec![(-1.0, 1.5)], 6)
        .with_tau(0.5)
        .with_gamma(0.05)
        .with_samples(200_000)
        .with_seed(9);
    let mc = resonance_measure(&q1).map_err(|e| e.to_string())?;
    let exact = affine_1d_resonant_length(&q1, 0.7, 0.0);
    let z = (mc.estimate - exact).abs() / mc.std_error;
    within(Duration::from_secs(60), start.elapsed())?;
    if (0.9..=1.1).contains(&fit.beta) && one_sided && z <= 3.0 {
        Ok(format!(
            "beta = {:.4} +- {:.4} (>= 1/(N+1) one-sided), 1-D oracle within {z:.2} se",
            fit.beta, fit.std_error
        ))
    } else {
        Err(format!("beta = {:.4} +- {:.4}, 1-D deviation {z:.2} se", fit.beta, fit.std_error))
    }
}

/// `λ_min(AA*)` as `1/λ_max((A⁻¹)*A⁻¹)`.
fn oracle_lambda_min(a: &DMatrix<f64>) -> Option<f64> {
    let inv = a.clone().try_inverse()?;
    let eig = SymmetricEigen::new(inv.transpose() * &inv);
    Some(1.0 / eig.eigenvalues.max())
}

fn eigen_verifier() -> Check {
    let start = Instant::now();
    let mut rng = common::rng(909);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let n = rng.random_range(2..=4);
        let parts_count = rng.random_range(2..=3);
        let eps: Vec<f64> = (0..parts_count).map(|_| 10f64.powf(-rng.random_range(0.0..3.0))).collect();
        let scales = ScaleSet::new(eps.clone(), 1e-3).unwrap();
        let parts: Vec<DMatrix<f64>> = (0..parts_count)
            .map(|_| DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let mut a = DMatrix::zeros(n, n);
        for (p, e) in parts.iter().zip(&eps) {
            a += p * *e;
        }
        let Some(expected) = oracle_lambda_min(&a) else {
            continue;
        };
        let b = eigen_lower_bound(&parts, &scales).map_err(|e| e.to_string())?;
        let err = rel(b.lambda_min, expected);
        if err > 1e-10 {
            return Err(format!("case {case}: lambda_min {:e} vs oracle {expected:e}", b.lambda_min));
        }
        worst = worst.max(err);
    }
    let mut flagged = 0;
    for _ in 0..20 {
        let n = rng.random_range(2..=4);
        let v = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0)).normalize();
        let proj = DMatrix::identity(n, n) - &v * v.transpose();
        let parts: Vec<DMatrix<f64>> = (0..2)
            .map(|_| DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)) * &proj)
            .collect();
        let scales = ScaleSet::new(vec![1.0, 0.01], 1e-3).unwrap();
        let b = eigen_lower_bound(&parts, &scales).map_err(|e| e.to_string())?;
        if !b.pass && !b.pass_linear {
            flagged += 1;
        }
    }
    within(Duration::from_secs(5), start.elapsed())?;
    if flagged == 20 {
        Ok(format!("200 matrices, worst relative error {worst:.1e}; 20/20 common kernels flagged"))
    } else {
        Err(format!("only {flagged}/20 common kernels flagged"))
    }
}

fn cli_end_to_end() -> Check {
    let bin = env!("CARGO_BIN_EXE_kam");
    let base = std::env::temp_dir().join(format!("kam-acceptance-{}", std::process::id()));
    let mut reports = Vec::new();
    for (i, mode) in ["full", "full", "frequency-preserving", "isoenergetic"].iter().enumerate() {
        let dir = base.join(format!("run{i}"));
        let out = std::process::Command::new(bin)
            .args(["run", "--seed", "3", "--mode", mode, "--out"])
            .arg(&dir)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("kam run --mode {mode} exited with {:?}", out.status.code()));
        }
        reports.push(std::fs::read(dir.join("report.json")).map_err(|e| e.to_string())?);
    }
    let _ = std::fs::remove_dir_all(&base);
    if reports[0] == reports[1] {
        Ok("three modes exit 0; seeded report.json byte-identical across runs".into())
    } else {
        Err("repeated seeded runs wrote different reports".into())
    }
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("determinant identities", determinant_identities),
        ("schedule exactness", schedule_exactness),
        ("homological exactness", homological_exactness),
        ("symplecticity", symplecticity),
        ("frequency preservation", frequency_preservation),
        ("iso-energetic invariants", isoenergetic_invariants),
        ("error contraction", error_contraction),
        ("measure scaling", measure_scaling),
        ("eigenvalue verifier", eigen_verifier),
        ("cli end to end", cli_end_to_end),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {} ({name}): {detail} [{secs:.2} s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {} ({name}): {detail} [{secs:.2} s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
