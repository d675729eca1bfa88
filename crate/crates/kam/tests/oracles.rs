//! Small closed-form cases checked against independently computed values.

use kam::kamstep::{
    frequency_correction, isoenergetic_correction, screen_divisors, solve_homological, homological_residual,
    tail_bound, StepParams,
};
use kam::model::{NormalForm, ScaleSet};
use kam::schedule::{build_schedule, convergence_summary, exponent_bound, ScheduleError, ScheduleInit};
use kam::series::{DomainWindow, FourierTaylorSeries};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex;

type S = FourierTaylorSeries<f64>;

fn nf_from(p: &S) -> NormalForm<f64> {
    let mut nf = NormalForm::zero(p.dim(), ScaleSet::new(vec![1.0], 1e-3).unwrap(), 4);
    nf.set_part_from_series(0, p);
    nf
}

fn params(n: usize, gamma: f64) -> StepParams<f64> {
    let window = DomainWindow::new(0.1, 1.0, 0.1).unwrap();
    StepParams::new(window, 0.1, 0.1, 5.0, gamma, n as f64, 4, ScaleSet::new(vec![1.0], 1e-3).unwrap(), n).unwrap()
}

fn init(eta0: f64) -> ScheduleInit {
    ScheduleInit {
        r0: 1.0,
        s0: 1.0,
        eta0,
        h0: 1.0,
        gamma0: 1.0,
        tau: 2.0,
    }
}

#[test]
fn eta_recursion_first_step() {
    let scales = ScaleSet::new(vec![1.0], 1e-3).unwrap();
    let s = build_schedule(&init(0.1), 4, 4.0, 1, &scales, 2).unwrap();
    assert!((s.entries[1].eta - 0.031_622_776_601_683_79).abs() < 1e-15);
}

#[test]
fn exponent_bound_for_m4() {
    assert!((exponent_bound(4) - 3.419_022_582_702_909).abs() < 1e-12);
    let scales = ScaleSet::new(vec![1.0], 1e-3).unwrap();
    assert!(matches!(
        build_schedule(&init(0.1), 4, 3.0, 1, &scales, 2),
        Err(ScheduleError::BadExponent { .. })
    ));
    assert!(build_schedule(&init(0.1), 4, 4.0, 1, &scales, 2).is_ok());
}

/// Composite Simpson on `[K, K + 200]`, far past where the integrand matters.
#[test]
fn tail_bound_dominates_quadrature() {
    let (k, sigma) = (20.0, 0.5);
    let f = |x: f64| x * x * (-x * sigma).exp();
    let steps = 20_000;
    let h = 200.0 / steps as f64;
    let mut sum = f(k) + f(k + 200.0);
    for i in 1..steps {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(k + i as f64 * h);
    }
    let quad = sum * h / 3.0;
    // closed form of the same integral, as a check on the quadrature itself
    let exact = (-k * sigma).exp() * (k * k / sigma + 2.0 * k / sigma.powi(2) + 2.0 / sigma.powi(3));
    assert!((quad - exact).abs() < 1e-9 * exact);
    assert!(tail_bound(3, k, sigma) >= quad);
}

#[test]
fn golden_like_frequency_has_no_resonances() {
    let omega = [1.0, std::f64::consts::SQRT_2];
    let p = params(2, 1e-3);
    let res = screen_divisors(&omega, &p, 0.0).unwrap();
    assert!(res.resonant.is_empty());
    assert_eq!(res.screened, 60);
}

/// `N = ⟨ω,I⟩ + ½⟨I,AI⟩` with `ω = (1, 2)`, `A = ((2, ½), (½, 1))` and
/// `R = (1 + I₁)e^{iθ₁}`. By hand: `F⁰ = −i`, and the degree-one part
/// `(I₁ − ⟨k,AI⟩F⁰·i)/i = i·I₁ + ½i·I₂` carries the `A` correction, which
/// then feeds every higher degree: `F² = −⟨k,AI⟩F¹`.
#[test]
fn homological_degree_one_correction() {
    let n = 2;
    let p = S::from_terms(
        n,
        vec![
            (vec![0, 0], vec![1, 0], Complex::new(1.0, 0.0)),
            (vec![0, 0], vec![0, 1], Complex::new(2.0, 0.0)),
            (vec![0, 0], vec![2, 0], Complex::new(1.0, 0.0)),
            (vec![0, 0], vec![1, 1], Complex::new(0.5, 0.0)),
            (vec![0, 0], vec![0, 2], Complex::new(0.5, 0.0)),
        ],
        true,
    )
    .unwrap();
    let nf = nf_from(&p);
    let r = S::monomial(vec![1, 0], vec![0, 0], Complex::new(1.0, 0.0))
        .add(&S::monomial(vec![1, 0], vec![1, 0], Complex::new(1.0, 0.0)))
        .unwrap();
    let sp = params(n, 1e-3);
    let f = solve_homological(&nf, &r, &sp).unwrap().series;
    assert_eq!(f.len(), 1 + 2 + 3 + 4);
    assert_eq!(f.coeff(&[1, 0], &[0, 0]), Complex::new(0.0, -1.0));
    assert_eq!(f.coeff(&[1, 0], &[1, 0]), Complex::new(0.0, 1.0));
    assert_eq!(f.coeff(&[1, 0], &[0, 1]), Complex::new(0.0, 0.5));
    assert_eq!(f.coeff(&[1, 0], &[2, 0]), Complex::new(0.0, -2.0));
    assert_eq!(f.coeff(&[1, 0], &[1, 1]), Complex::new(0.0, -1.5));
    assert_eq!(f.coeff(&[1, 0], &[0, 2]), Complex::new(0.0, -0.25));
    assert!(homological_residual(&nf, &f, &r, &sp).unwrap().is_empty());
}

#[test]
fn frequency_correction_nonsingular_matches_linear_solve() {
    let p = S::from_text("0 0 | 1 0 | 1 0\n0 0 | 0 1 | 1.5 0\n0 0 | 2 0 | 0.8 0\n0 0 | 1 1 | 0.3 0\n0 0 | 0 2 | 0.6 0", 2, true)
        .unwrap();
    let nf = nf_from(&p);
    let p01 = [1e-4, -3e-4];
    let fc = frequency_correction(&nf, &p01, 2, None, 1.0).unwrap();
    let a = DMatrix::from_row_slice(2, 2, &[1.6, 0.3, 0.3, 1.2]);
    let want = a.lu().solve(&DVector::from_row_slice(&[-p01[0], -p01[1]])).unwrap();
    for i in 0..2 {
        assert!((fc.i_star[i] - want[i]).abs() < 1e-15 * want.amax() * 10.0);
    }
    assert!(fc.residual_shift.is_empty());
    let w = fc.nf.omega();
    assert!((w[0] - (1.0 - p01[0])).abs() < 1e-15 && (w[1] - (1.5 - p01[1])).abs() < 1e-15);
}

/// `A = diag(2ε₁, 0)`, one preserved row: `Ĩ₁ = −p₁/(2ε₁)`, the second row
/// keeps its shift `p₂`.
#[test]
fn frequency_correction_singular_block() {
    let eps1 = 0.25;
    let p = S::from_text(&format!("0 0 | 1 0 | 1 0\n0 0 | 0 1 | 1.5 0\n0 0 | 2 0 | {eps1} 0"), 2, true).unwrap();
    let nf = nf_from(&p);
    let p01 = [2e-4, 5e-5];
    let fc = frequency_correction(&nf, &p01, 1, None, 1.0).unwrap();
    assert_eq!(fc.rows, vec![0]);
    assert!((fc.i_star[0] + p01[0] / (2.0 * eps1)).abs() < 1e-18);
    assert_eq!(fc.i_star[1], 0.0);
    assert_eq!(fc.residual_shift, vec![p01[1]]);
}

/// With no `h`, `ω₊ = ω + P₀₁ + AI*`, and the bordered rows force
/// `ω₊ = (1 − t)ω`: every component keeps its ratio to `ω`.
#[test]
fn isoenergetic_linear_case_keeps_ratios() {
    let p = S::from_text("0 0 | 0 0 | 0.7 0\n0 0 | 1 0 | 1 0\n0 0 | 0 1 | 1.5 0\n0 0 | 2 0 | 0.8 0\n0 0 | 1 1 | 0.3 0\n0 0 | 0 2 | 0.6 0", 2, true)
        .unwrap();
    let nf = nf_from(&p);
    let avg = S::from_text("0 0 | 0 0 | 1e-9 0\n0 0 | 1 0 | 2e-5 0\n0 0 | 0 1 | -1e-5 0", 2, true).unwrap();
    let iso = isoenergetic_correction(&nf, &avg, 2, None, 1e-12, 50, 1.0).unwrap();
    assert!(iso.iterations <= 5);
    let (w0, w1) = (nf.omega(), iso.nf.omega());
    let q: Vec<f64> = w1.iter().zip(&w0).map(|(a, b)| a / b).collect();
    assert!(((q[1] - q[0]) / q[0]).abs() < 1e-12);
    assert!((q[0] - (1.0 - iso.t)).abs() < 1e-12);
    assert_eq!(iso.nf.e_parts[0].to_bits(), nf.e_parts[0].to_bits());
}

#[test]
fn geometric_deviations_sum() {
    let d: Vec<f64> = (1..=15).map(|v| 0.1f64.powi(v)).collect();
    let s = convergence_summary(&d, 1.0);
    let last = *s.partial_sums.last().unwrap();
    assert!((last - (1.0 / 0.9 - 1.0)).abs() < 1e-12);
    assert!(s.cauchy);
}
