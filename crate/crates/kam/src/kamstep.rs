//! One KAM step: gates, truncation, divisor screen, homological solve, Lie
//! transform, optional frequency correction and the new error.
//!
//! Linear algebra for the corrections runs in `f64` regardless of `T`.

use crate::conditions::{greedy_pivots, to_f64_matrix};
use crate::model::{ModelError, NormalForm, ScaleSet};
use crate::scalar::Real;
use crate::series::{DomainWindow, FourierMode, FourierTaylorSeries, MultiIndex, SeriesError};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Default factor turning the `o(·)` gates into inequalities.
pub const DEFAULT_THETA_GATE: f64 = 0.1;
/// Largest mode count `screen_divisors` is willing to enumerate.
pub const ENUMERATION_LIMIT: f64 = 5.0e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StepError {
    #[error("invalid step parameters: {0}")]
    InvalidParams(String),
    #[error("gate ({gate}) failed: {lhs:e} vs {rhs:e}")]
    GateFailure { gate: String, lhs: f64, rhs: f64 },
    #[error("all {count} screened modes are resonant")]
    AllResonant { count: usize },
    #[error("small divisor at k = {k:?}: |<k,w>| = {divisor:e} below {threshold:e}")]
    DivisorFailure { k: Vec<i64>, divisor: f64, threshold: f64 },
    #[error("{count:e} modes with |k| <= K exceed the enumeration limit")]
    TooManyModes { count: f64 },
    #[error("no nonsingular block: {0}")]
    SingularBlock(String),
    #[error("action shift {norm:e} exceeds the window limit {limit:e}")]
    ShiftTooLarge { norm: f64, limit: f64 },
    #[error("fixed point diverged at iteration {iteration}: |I| = {norm:e} > {limit:e}")]
    Divergence { iteration: usize, norm: f64, limit: f64 },
    #[error("fixed point did not converge in {0} iterations")]
    NoConvergence(usize),
    #[error(transparent)]
    Series(#[from] SeriesError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Everything a single step needs besides the Hamiltonian.
#[derive(Clone, Debug, PartialEq)]
pub struct StepParams<T: Real> {
    pub window: DomainWindow<T>,
    pub sigma: T,
    pub eta: T,
    /// Truncation order; may be non-integer, `⌊K⌋` is used to cut modes.
    pub big_k: T,
    pub gamma: T,
    pub tau: T,
    pub m_taylor: u32,
    pub scales: ScaleSet<T>,
    pub theta_gate: T,
}

impl<T: Real> StepParams<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        window: DomainWindow<T>,
        sigma: T,
        eta: T,
        big_k: T,
        gamma: T,
        tau: T,
        m_taylor: u32,
        scales: ScaleSet<T>,
        n: usize,
    ) -> Result<Self, StepError> {
        let p = StepParams {
            window,
            sigma,
            eta,
            big_k,
            gamma,
            tau,
            m_taylor,
            scales,
            theta_gate: T::lit(DEFAULT_THETA_GATE),
        };
        p.validate(n)?;
        Ok(p)
    }

    pub fn with_theta_gate(mut self, theta: T) -> Self {
        self.theta_gate = theta;
        self
    }

    pub fn validate(&self, n: usize) -> Result<(), StepError> {
        let bad = |m: String| Err(StepError::InvalidParams(m));
        if !(self.eta > T::zero() && self.eta < T::lit(0.125)) {
            return bad(format!("eta must lie in (0, 1/8), got {}", self.eta));
        }
        if !(self.sigma > T::zero() && T::lit(5.0) * self.sigma < self.window.s) {
            return bad(format!("need 0 < 5 sigma < s, got sigma = {}, s = {}", self.sigma, self.window.s));
        }
        if !(self.tau >= T::lit(n as f64 - 1.0)) {
            return bad(format!("tau must be >= n - 1 = {}, got {}", n as i64 - 1, self.tau));
        }
        if !(self.big_k >= T::one()) {
            return bad(format!("K must be >= 1, got {}", self.big_k));
        }
        if !(self.gamma > T::zero()) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if self.m_taylor < 3 {
            return bad(format!("m_taylor must be >= 3, got {}", self.m_taylor));
        }
        if !(self.theta_gate > T::zero()) {
            return bad(format!("theta_gate must be positive, got {}", self.theta_gate));
        }
        Ok(())
    }

    /// `⌊K⌋` as a mode cutoff.
    pub fn k_trunc(&self) -> u32 {
        self.big_k.to_f64_lossy().floor().min(u32::MAX as f64) as u32
    }

    /// `ε̃γ/(2|k|^τ)`, the screen threshold for a mode.
    pub fn divisor_threshold(&self, k_norm: u64) -> T {
        self.scales.eps_min() * self.gamma / (T::lit(2.0) * T::lit(k_norm as f64).powf(self.tau))
    }
}

/// One evaluated gate: `lhs` against `rhs`, `margin = rhs / lhs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    pub pass: bool,
}

impl Gate {
    fn new(name: &str, lhs: f64, rhs: f64, strict: bool) -> Self {
        let pass = if strict { lhs < rhs } else { lhs <= rhs };
        let margin = if lhs > 0.0 { rhs / lhs } else { f64::INFINITY };
        Gate {
            name: name.to_string(),
            lhs,
            rhs,
            margin,
            pass,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub a: Gate,
    pub b: Gate,
    pub c: Gate,
    pub d: Gate,
    pub e: Gate,
}

impl GateReport {
    pub fn all(&self) -> [&Gate; 5] {
        [&self.a, &self.b, &self.c, &self.d, &self.e]
    }

    pub fn all_pass(&self) -> bool {
        self.all().iter().all(|g| g.pass)
    }

    pub fn first_failure(&self) -> Option<&Gate> {
        self.all().into_iter().find(|g| !g.pass)
    }
}

/// `n!·Kⁿ·e^{−Kσ}/σ^{n+1}`, the closed-form bound on `∫_K^∞ x^{n−1}e^{−xσ}dx`.
pub fn tail_bound(n: usize, big_k: f64, sigma: f64) -> f64 {
    log_tail_bound(n, big_k, sigma).exp()
}

fn log_tail_bound(n: usize, big_k: f64, sigma: f64) -> f64 {
    let ln_fact: f64 = (1..=n).map(|i| (i as f64).ln()).sum();
    ln_fact + n as f64 * big_k.ln() - big_k * sigma - (n as f64 + 1.0) * sigma.ln()
}

/// Evaluates gates (a)-(e); `eps_ratio` is `ϵ`, the current error over `ε̃`.
pub fn gate_check<T: Real>(p: &StepParams<T>, n: usize, eps_ratio: T) -> GateReport {
    let f = |x: T| x.to_f64_lossy();
    let (k, sigma, gamma, tau) = (f(p.big_k), f(p.sigma), f(p.gamma), f(p.tau));
    let (r, h, eta) = (f(p.window.r), f(p.window.h), f(p.eta));
    let (emin, emax, theta) = (f(p.scales.eps_min()), f(p.scales.eps_max()), f(p.theta_gate));
    let m = p.m_taylor as f64;
    let a = Gate::new("a", (n as f64 - 1.0) / sigma, k, true);
    let ln_lhs = log_tail_bound(n, k, sigma);
    let ln_rhs = m * eta.ln();
    let b = Gate {
        name: "b".into(),
        lhs: ln_lhs.exp(),
        rhs: ln_rhs.exp(),
        margin: (ln_rhs - ln_lhs).exp(),
        pass: ln_lhs < ln_rhs,
    };
    let kt = k.powf(tau + 1.0);
    let c = Gate::new("c", emax * h * kt, theta * gamma * emin, false);
    let d = Gate::new("d", r * kt, theta * gamma * emin, false);
    let e = Gate::new(
        "e",
        f(eps_ratio),
        gamma * r * r * eta.powf(m) * sigma.powf(tau + 1.0),
        true,
    );
    GateReport { a, b, c, d, e }
}

/// Outcome of a divisor screen.
#[derive(Clone, Debug, PartialEq)]
pub struct ScreenResult {
    pub resonant: Vec<FourierMode>,
    /// `min |⟨k,ω⟩|·|k|^τ/(ε̃γ)` over the modes that passed.
    pub divisor_min: f64,
    pub screened: usize,
}

/// Number of `k ∈ Zⁿ` with `0 < |k|₁ ≤ K`.
pub fn mode_count(n: usize, big_k: u32) -> f64 {
    let mut total = 0.0;
    let mut c_n = 1.0;
    let mut c_k = 1.0;
    let mut pow2 = 1.0;
    for i in 0..=n.min(big_k as usize) {
        if i > 0 {
            c_n *= (n - i + 1) as f64 / i as f64;
            c_k *= (big_k as usize - i + 1) as f64 / i as f64;
            pow2 *= 2.0;
        }
        total += pow2 * c_n * c_k;
    }
    total - 1.0
}

/// All nonzero modes with `|k|₁ ≤ K`, in lexicographic order.
pub fn enumerate_modes(n: usize, big_k: u32) -> Vec<FourierMode> {
    fn rec(n: usize, left: i64, cur: &mut Vec<i64>, out: &mut Vec<FourierMode>) {
        if cur.len() == n {
            if cur.iter().any(|&x| x != 0) {
                out.push(FourierMode(cur.clone()));
            }
            return;
        }
        for v in -left..=left {
            cur.push(v);
            rec(n, left - v.abs(), cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, big_k as i64, &mut Vec::with_capacity(n), &mut out);
    out
}

fn screen_one<T: Real>(omega: &[T], p: &StepParams<T>, lipschitz: T, k: &FourierMode) -> (bool, f64) {
    let d = k.dot(omega).abs();
    let kn = k.norm();
    let margin = d - p.big_k * p.window.h * lipschitz;
    let flagged = margin < p.divisor_threshold(kn);
    let rel = d * T::lit(kn as f64).powf(p.tau) / (p.scales.eps_min() * p.gamma);
    (flagged, rel.to_f64_lossy())
}

/// Screens the listed modes; a mode is resonant iff
/// `|⟨k,ω⟩| − K·h·lipschitz < ε̃γ/(2|k|^τ)`.
pub fn screen_modes<T: Real>(
    omega: &[T],
    p: &StepParams<T>,
    lipschitz: T,
    modes: &[FourierMode],
) -> Result<ScreenResult, StepError> {
    let results: Vec<(bool, f64)> = modes.par_iter().map(|k| screen_one(omega, p, lipschitz, k)).collect();
    let mut resonant = Vec::new();
    let mut divisor_min = f64::INFINITY;
    for (k, (flagged, rel)) in modes.iter().zip(&results) {
        if *flagged {
            resonant.push(k.clone());
        } else {
            divisor_min = divisor_min.min(*rel);
        }
    }
    Ok(ScreenResult {
        resonant,
        divisor_min,
        screened: modes.len(),
    })
}

/// Screens every mode with `0 < |k| ≤ ⌊K⌋`; fails if none survives.
pub fn screen_divisors<T: Real>(omega: &[T], p: &StepParams<T>, lipschitz: T) -> Result<ScreenResult, StepError> {
    let count = mode_count(omega.len(), p.k_trunc());
    if count > ENUMERATION_LIMIT {
        return Err(StepError::TooManyModes { count });
    }
    let res = screen_modes(omega, p, lipschitz, &enumerate_modes(omega.len(), p.k_trunc()))?;
    if res.screened > 0 && res.resonant.len() == res.screened {
        return Err(StepError::AllResonant { count: res.screened });
    }
    Ok(res)
}

/// `F` with its majorant on `(r, s − 2σ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratingFunction<T: Real> {
    pub series: FourierTaylorSeries<T>,
    pub norm_bound: T,
}

type Poly<T> = BTreeMap<MultiIndex, Complex<T>>;

fn canonical(k: &FourierMode) -> bool {
    k.0.iter().find(|&&x| x != 0).is_some_and(|&x| x > 0)
}

/// `⟨k, AI + ∇h(I)⟩` as a polynomial in `I`.
fn divisor_poly<T: Real>(k: &FourierMode, a: &DMatrix<T>, h: &BTreeMap<MultiIndex, T>) -> Poly<T> {
    let n = k.0.len();
    let mut g: Poly<T> = BTreeMap::new();
    let mut push = |j: MultiIndex, c: T| {
        if c != T::zero() {
            let slot = g.entry(j).or_insert_with(|| Complex::new(T::zero(), T::zero()));
            *slot = *slot + Complex::new(c, T::zero());
        }
    };
    for l in 0..n {
        let mut c = T::zero();
        for i in 0..n {
            c = c + T::lit(k.0[i] as f64) * a[(i, l)];
        }
        push(MultiIndex::unit(n, l), c);
    }
    for (j, &c) in h {
        for l in 0..n {
            if k.0[l] == 0 || j.0[l] == 0 {
                continue;
            }
            let mut jj = j.clone();
            jj.0[l] -= 1;
            push(jj, c * T::lit(j.0[l] as f64) * T::lit(k.0[l] as f64));
        }
    }
    g.retain(|_, c| c.norm() != T::zero());
    g
}

/// Solves `{N, F} + R − [R] = 0` degree by degree: with `d_k = ⟨k,ω⟩` and
/// `G_k(I) = ⟨k, AI + ∇h(I)⟩`, `F_k^{(d)} = (R_k^{(d)} − i(G_k F_k)^{(d)})/(i d_k)`.
pub fn solve_homological<T: Real>(
    nf: &NormalForm<T>,
    r_series: &FourierTaylorSeries<T>,
    p: &StepParams<T>,
) -> Result<GeneratingFunction<T>, StepError> {
    let n = nf.n();
    if r_series.dim() != n {
        return Err(SeriesError::DimensionMismatch {
            left: n,
            right: r_series.dim(),
        }
        .into());
    }
    let m = p.m_taylor;
    let kk = p.k_trunc() as u64;
    let omega = nf.omega();
    let a = nf.a();
    let h = nf.h();
    let real = r_series.is_real();
    let mut by_mode: BTreeMap<FourierMode, Poly<T>> = BTreeMap::new();
    for (k, j, c) in r_series.terms() {
        if k.is_zero() || k.norm() > kk || j.order() >= m || (real && !canonical(k)) {
            continue;
        }
        by_mode.entry(k.clone()).or_default().insert(j.clone(), *c);
    }
    let i = Complex::new(T::zero(), T::one());
    let zero = Complex::new(T::zero(), T::zero());
    let mut terms = Vec::new();
    for (k, rk) in by_mode {
        let d = k.dot(&omega);
        let thr = p.divisor_threshold(k.norm());
        if !(d.abs() >= thr) {
            return Err(StepError::DivisorFailure {
                k: k.0.clone(),
                divisor: d.to_f64_lossy(),
                threshold: thr.to_f64_lossy(),
            });
        }
        let g = divisor_poly(&k, &a, &h);
        let inv = Complex::new(T::one(), T::zero()) / (i * d);
        let mut fk: Poly<T> = BTreeMap::new();
        for deg in 0..m {
            let mut rhs: Poly<T> = rk.iter().filter(|(j, _)| j.order() == deg).map(|(j, c)| (j.clone(), *c)).collect();
            for (gj, gc) in &g {
                for (fj, fc) in fk.iter().filter(|(fj, _)| fj.order() + gj.order() == deg) {
                    let slot = rhs.entry(gj.add(fj)).or_insert(zero);
                    *slot = *slot - i * *gc * *fc;
                }
            }
            for (j, c) in rhs {
                let v = c * inv;
                if v.norm() != T::zero() {
                    fk.insert(j, v);
                }
            }
        }
        for (j, c) in fk {
            if real {
                terms.push((k.neg().0, j.0.clone(), c.conj()));
            }
            terms.push((k.0.clone(), j.0, c));
        }
    }
    let series = FourierTaylorSeries::from_terms(n, terms, real)?;
    let norm_bound = series.majorant_norm(p.window.r, p.window.s - T::lit(2.0) * p.sigma)?;
    Ok(GeneratingFunction { series, norm_bound })
}

/// `{N, F} + R − [R]` restricted to `|k| ≤ ⌊K⌋`, `|j| ≤ m − 1`.
pub fn homological_residual<T: Real>(
    nf: &NormalForm<T>,
    f: &FourierTaylorSeries<T>,
    r_series: &FourierTaylorSeries<T>,
    p: &StepParams<T>,
) -> Result<FourierTaylorSeries<T>, StepError> {
    let full = nf.to_series().poisson(f)?.add(r_series)?.sub(&r_series.average())?;
    let kk = p.k_trunc() as u64;
    let m = p.m_taylor;
    Ok(full.select(|k, j| k.norm() <= kk && j.order() < m))
}

/// Adds `[R]` to the normal form: the largest-scale part takes `[R]/ε_max`.
pub fn absorb_average<T: Real>(nf: &NormalForm<T>, r_avg: &FourierTaylorSeries<T>) -> Result<NormalForm<T>, StepError> {
    let i = nf.scales.argmax();
    let eps = nf.scales.epsilons()[i];
    let mut out = nf.clone();
    let part = nf.part_series(i).add(&r_avg.average().scale(T::one() / eps))?;
    out.set_part_from_series(i, &part);
    Ok(out)
}

/// `(P₀₀, P₀₁)`: constant and linear coefficients of `[R]`.
pub fn average_low_order<T: Real>(r_avg: &FourierTaylorSeries<T>) -> (T, Vec<T>) {
    let n = r_avg.dim();
    let k0 = vec![0i64; n];
    let p00 = r_avg.coeff(&k0, &vec![0u32; n]).re;
    let p01 = (0..n).map(|l| r_avg.coeff(&k0, &MultiIndex::unit(n, l).0).re).collect();
    (p00, p01)
}

/// Coordinate displacements of the time-one map of `F`, as Lie series:
/// `I ↦ I + d_action`, `θ ↦ θ + d_angle`.
#[derive(Clone, Debug)]
pub struct TimeOneMap<T: Real> {
    pub order: usize,
    pub d_action: Vec<FourierTaylorSeries<T>>,
    pub d_angle: Vec<FourierTaylorSeries<T>>,
    /// The first dropped terms, order `L + 1`.
    pub next_action: Vec<FourierTaylorSeries<T>>,
    pub next_angle: Vec<FourierTaylorSeries<T>>,
}

fn displacement<T: Real>(
    g: &FourierTaylorSeries<T>,
    f: &FourierTaylorSeries<T>,
    order: usize,
) -> Result<(FourierTaylorSeries<T>, FourierTaylorSeries<T>), SeriesError> {
    let chain = g.lie_brackets(f, order)?;
    let mut sum = FourierTaylorSeries::zero(g.dim());
    let mut fact = T::one();
    for (l, b) in chain.iter().take(order).enumerate() {
        fact = fact * T::lit((l + 1) as f64);
        sum = sum.add(&b.scale(T::one() / fact))?;
    }
    let next = chain[order].scale(T::one() / (fact * T::lit((order + 1) as f64)));
    Ok((sum, next))
}

/// Builds the order-`L` time-one map of `F`.
pub fn time_one_map<T: Real>(f: &FourierTaylorSeries<T>, order: usize) -> Result<TimeOneMap<T>, StepError> {
    if order < 1 {
        return Err(StepError::InvalidParams("Lie order must be >= 1".into()));
    }
    let n = f.dim();
    let mut out = TimeOneMap {
        order,
        d_action: Vec::with_capacity(n),
        d_angle: Vec::with_capacity(n),
        next_action: Vec::with_capacity(n),
        next_angle: Vec::with_capacity(n),
    };
    for l in 0..n {
        let (a, na) = displacement(&f.d_angle(l).neg(), f, order)?;
        let (b, nb) = displacement(&f.d_action(l), f, order)?;
        out.d_action.push(a);
        out.next_action.push(na);
        out.d_angle.push(b);
        out.next_angle.push(nb);
    }
    Ok(out)
}

fn jacobian_of<T: Real>(da: &[FourierTaylorSeries<T>], dt: &[FourierTaylorSeries<T>], actions: &[T], angles: &[T], identity: bool) -> DMatrix<f64> {
    let n = da.len();
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    for l in 0..n {
        for q in 0..n {
            m[(l, q)] = da[l].d_action(q).eval_real(actions, angles).re.to_f64_lossy();
            m[(l, n + q)] = da[l].d_angle(q).eval_real(actions, angles).re.to_f64_lossy();
            m[(n + l, q)] = dt[l].d_action(q).eval_real(actions, angles).re.to_f64_lossy();
            m[(n + l, n + q)] = dt[l].d_angle(q).eval_real(actions, angles).re.to_f64_lossy();
        }
    }
    if identity {
        m += DMatrix::identity(2 * n, 2 * n);
    }
    m
}

fn row_sum_majorant<T: Real>(rows: &[FourierTaylorSeries<T>], wrt_action: bool, r: T, s: T) -> Result<f64, SeriesError> {
    let n = rows.len();
    let mut worst = 0.0f64;
    for d in rows {
        let mut sum = 0.0;
        for q in 0..n {
            let der = if wrt_action { d.d_action(q) } else { d.d_angle(q) };
            sum += der.majorant_norm(r, s)?.to_f64_lossy();
        }
        worst = worst.max(sum);
    }
    Ok(worst)
}

fn max_majorant<T: Real>(rows: &[FourierTaylorSeries<T>], r: T, s: T) -> Result<f64, SeriesError> {
    let mut worst = 0.0f64;
    for d in rows {
        worst = worst.max(d.majorant_norm(r, s)?.to_f64_lossy());
    }
    Ok(worst)
}

impl<T: Real> TimeOneMap<T> {
    pub fn dim(&self) -> usize {
        self.d_action.len()
    }

    /// Image of a real point.
    pub fn apply(&self, actions: &[T], angles: &[T]) -> (Vec<T>, Vec<T>) {
        let a = actions
            .iter()
            .zip(&self.d_action)
            .map(|(&x, d)| x + d.eval_real(actions, angles).re)
            .collect();
        let b = angles
            .iter()
            .zip(&self.d_angle)
            .map(|(&x, d)| x + d.eval_real(actions, angles).re)
            .collect();
        (a, b)
    }

    /// Jacobian of the truncated map, variables ordered `(I, θ)`.
    pub fn jacobian(&self, actions: &[T], angles: &[T]) -> DMatrix<f64> {
        jacobian_of(&self.d_action, &self.d_angle, actions, angles, true)
    }

    /// `max |MᵀJM − J|` entrywise at a point.
    pub fn symplectic_defect(&self, actions: &[T], angles: &[T]) -> f64 {
        let m = self.jacobian(actions, angles);
        let j = symplectic_form(self.dim());
        (m.transpose() * &j * &m - j).amax()
    }

    /// Sum of the majorants of all first derivatives of the order-`L+1` terms.
    pub fn remainder_derivative_bound(&self, r: T, s: T) -> Result<f64, SeriesError> {
        let n = self.dim();
        let mut sum = 0.0;
        for d in self.next_action.iter().chain(&self.next_angle) {
            for q in 0..n {
                sum += d.d_action(q).majorant_norm(r, s)?.to_f64_lossy();
                sum += d.d_angle(q).majorant_norm(r, s)?.to_f64_lossy();
            }
        }
        Ok(sum)
    }
}

/// The standard form `J = ((0, −I), (I, 0))` in `(I, θ)` ordering.
pub fn symplectic_form(n: usize) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        j[(i, n + i)] = -1.0;
        j[(n + i, i)] = 1.0;
    }
    j
}

/// A measured deviation against its limit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundEntry {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub pass: bool,
}

/// The six near-identity bounds for a time-one map, with `ϵ = err/ε̃`.
pub fn transform_bounds<T: Real>(map: &TimeOneMap<T>, p: &StepParams<T>, eps_ratio: f64, n: usize) -> Result<Vec<BoundEntry>, StepError> {
    let f = |x: T| x.to_f64_lossy();
    let (r, s, sg) = (p.window.r, p.window.s, p.sigma);
    let half = r / T::lit(2.0);
    let s3 = s - T::lit(3.0) * sg;
    let s4 = s - T::lit(4.0) * sg;
    let eta_r = p.eta * r;
    let (gamma, sigma, tau, rf) = (f(p.gamma), f(sg), f(p.tau), f(r));
    let e = eps_ratio;
    let rows = [
        ("U-id", max_majorant(&map.d_action, half, s3)?, e / (gamma * sigma.powi(n as i32 + 1))),
        ("V-id", max_majorant(&map.d_angle, half, s3)?, e / (gamma * rf * sigma.powf(tau))),
        ("U_I-I", row_sum_majorant(&map.d_action, true, eta_r, s3)?, e / (gamma * rf * sigma.powf(tau + 1.0))),
        ("V_theta-I", row_sum_majorant(&map.d_angle, false, half, s4)?, e / (gamma * rf * sigma.powf(tau + 1.0))),
        ("U_theta", row_sum_majorant(&map.d_action, false, half, s4)?, e / (gamma * sigma.powf(tau + 2.0))),
        ("V_I", row_sum_majorant(&map.d_angle, true, eta_r, s3)?, e / (gamma * rf * rf * sigma.powf(tau + 1.0))),
    ];
    Ok(rows
        .into_iter()
        .map(|(name, value, limit)| BoundEntry {
            name: name.to_string(),
            value,
            limit,
            pass: value <= limit,
        })
        .collect())
}

/// Tunables that are not part of the step parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct StepConfig<T: Real> {
    /// Lie series order `L`.
    pub lie_order: usize,
    /// Allowed excess over `η^m` in the contraction check.
    pub slack: f64,
    /// Bound on `‖∂_ξ ω‖` used by the divisor screen.
    pub lipschitz: T,
    /// Terms lighter than this fraction of the new error are dropped and
    /// their weight is added to the reported error.
    pub trim: f64,
}

impl<T: Real> Default for StepConfig<T> {
    fn default() -> Self {
        StepConfig {
            lie_order: 3,
            slack: 0.5,
            lipschitz: T::one(),
            trim: 1e-16,
        }
    }
}

/// Which correction follows the transform.
#[derive(Clone, Debug, PartialEq)]
pub enum Correction {
    None,
    Frequency { n1: usize, rows: Option<Vec<usize>> },
    Isoenergetic { n1: usize, rows: Option<Vec<usize>>, tol: f64, max_iter: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShiftReport {
    None,
    Frequency {
        i_star: Vec<f64>,
        rows: Vec<usize>,
        cols: Vec<usize>,
        /// Frequency change left on the rows that were not preserved.
        residual_shift: Vec<f64>,
        /// Least-squares row relation of the unpreserved rows of `A`.
        d1: Vec<Vec<f64>>,
        newton_iterations: usize,
        shift_norm: f64,
        /// `ϵ/r`, the stated scale of the shift.
        eps_over_r: f64,
        /// `|I*|/(ϵ/r)`, the constant actually needed.
        c_measured: f64,
    },
    Isoenergetic {
        i_star: Vec<f64>,
        t: f64,
        rows: Vec<usize>,
        cols: Vec<usize>,
        iterations: usize,
        energy_residual: f64,
        shift_norm: f64,
        eps_over_r: f64,
        /// `ϵ`, the stated scale of `t`.
        eps: f64,
        /// `|t|/ϵ`.
        c_measured: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KamStepReport {
    pub gates: GateReport,
    pub divisor_min: f64,
    pub screened_modes: usize,
    pub f_norm: f64,
    pub transform_bounds: Vec<BoundEntry>,
    pub shift: ShiftReport,
    pub p00: f64,
    pub p01: Vec<f64>,
    pub old_error: f64,
    pub new_error: f64,
    pub contraction_ratio: f64,
    /// Majorant of the first dropped Lie term, included in `new_error`.
    pub lie_remainder: f64,
    /// Weight dropped by trimming, included in `new_error`.
    pub trimmed: f64,
}

/// Result of a step.
#[derive(Clone, Debug)]
pub struct StepOutput<T: Real> {
    pub nf: NormalForm<T>,
    pub pert: FourierTaylorSeries<T>,
    pub f: GeneratingFunction<T>,
    pub r_avg: FourierTaylorSeries<T>,
    pub report: KamStepReport,
}

/// Output of the ungated transform.
#[derive(Clone, Debug)]
pub struct TransformOutput<T: Real> {
    pub nf_plus: NormalForm<T>,
    pub pert_plus: FourierTaylorSeries<T>,
    pub r_avg: FourierTaylorSeries<T>,
    /// `ad^L(Z)/(L+1)! + ad^{L+1}(P)/(L+1)!`.
    pub remainder: FourierTaylorSeries<T>,
    pub map: TimeOneMap<T>,
}

/// `H∘φ_F = N + [R] + P₊` without gates. With `Z = {N,F} = [R] − R + E`,
/// `P₊ = (P − R) + E + Σ_{ℓ≥2} ad^{ℓ−1}(Z)/ℓ! + Σ_{ℓ≥1} ad^ℓ(P)/ℓ!`, so the
/// large normal form never enters `P₊` except through the small `E`.
pub fn transform_step<T: Real>(
    nf: &NormalForm<T>,
    pert: &FourierTaylorSeries<T>,
    f: &GeneratingFunction<T>,
    p: &StepParams<T>,
    cfg: &StepConfig<T>,
) -> Result<TransformOutput<T>, StepError> {
    let l_order = cfg.lie_order.max(1);
    let (_, r_ser) = pert.truncate(p.k_trunc(), p.m_taylor)?;
    let r_avg = r_ser.average();
    let e_res = nf.to_series().poisson(&f.series)?.add(&r_ser)?.sub(&r_avg)?;
    let z = r_avg.sub(&r_ser)?.add(&e_res)?;
    let mut plus = pert.sub(&r_ser)?.add(&e_res)?;
    let zb = z.lie_brackets(&f.series, l_order)?;
    let mut fact = T::one();
    for (l, b) in zb.iter().enumerate().take(l_order + 1).skip(1) {
        // ad^{l}(Z) enters with 1/(l+1)!
        fact = fact * T::lit((l + 1) as f64);
        if l < l_order {
            plus = plus.add(&b.scale(T::one() / fact))?;
        }
    }
    let mut remainder = zb[l_order].scale(T::one() / fact);
    let pb = pert.lie_brackets(&f.series, l_order + 1)?;
    let mut fact = T::one();
    for (l, b) in pb.iter().enumerate().skip(1) {
        fact = fact * T::lit(l as f64);
        if l <= l_order {
            plus = plus.add(&b.scale(T::one() / fact))?;
        } else {
            remainder = remainder.add(&b.scale(T::one() / fact))?;
        }
    }
    let nf_plus = absorb_average(nf, &r_avg)?;
    let map = time_one_map(&f.series, l_order)?;
    Ok(TransformOutput {
        nf_plus,
        pert_plus: plus,
        r_avg,
        remainder,
        map,
    })
}

fn eps_ratio_of<T: Real>(err: T, p: &StepParams<T>) -> T {
    err / p.scales.eps_min()
}

/// Gated transform for a given `F`: refuses when a gate fails.
pub fn apply_step<T: Real>(
    nf: &NormalForm<T>,
    pert: &FourierTaylorSeries<T>,
    f: &GeneratingFunction<T>,
    p: &StepParams<T>,
    cfg: &StepConfig<T>,
) -> Result<StepOutput<T>, StepError> {
    let n = nf.n();
    let old_error = pert.majorant_norm(p.window.r, p.window.s)?;
    let gates = gate_check(p, n, eps_ratio_of(old_error, p));
    if let Some(g) = gates.first_failure() {
        return Err(StepError::GateFailure {
            gate: g.name.clone(),
            lhs: g.lhs,
            rhs: g.rhs,
        });
    }
    let screen = screen_modes(&nf.omega(), p, cfg.lipschitz, &f.series.modes())?;
    finish_step(nf, pert, f, p, cfg, gates, &screen, old_error, &Correction::None)
}

/// The full step: gates, truncation, screen, solve, transform, correction.
pub fn kam_step<T: Real>(
    nf: &NormalForm<T>,
    pert: &FourierTaylorSeries<T>,
    p: &StepParams<T>,
    cfg: &StepConfig<T>,
    correction: &Correction,
) -> Result<StepOutput<T>, StepError> {
    let n = nf.n();
    p.validate(n)?;
    let old_error = pert.majorant_norm(p.window.r, p.window.s)?;
    let gates = gate_check(p, n, eps_ratio_of(old_error, p));
    if let Some(g) = gates.first_failure() {
        return Err(StepError::GateFailure {
            gate: g.name.clone(),
            lhs: g.lhs,
            rhs: g.rhs,
        });
    }
    let (_, r_ser) = pert.truncate(p.k_trunc(), p.m_taylor)?;
    let omega = nf.omega();
    let screen = screen_modes(&omega, p, cfg.lipschitz, &r_ser.modes())?;
    if let Some(k) = screen.resonant.first() {
        return Err(StepError::DivisorFailure {
            k: k.0.clone(),
            divisor: k.dot(&omega).to_f64_lossy(),
            threshold: p.divisor_threshold(k.norm()).to_f64_lossy(),
        });
    }
    let f = solve_homological(nf, &r_ser, p)?;
    finish_step(nf, pert, &f, p, cfg, gates, &screen, old_error, correction)
}

#[allow(clippy::too_many_arguments)]
fn finish_step<T: Real>(
    nf: &NormalForm<T>,
    pert: &FourierTaylorSeries<T>,
    f: &GeneratingFunction<T>,
    p: &StepParams<T>,
    cfg: &StepConfig<T>,
    gates: GateReport,
    screen: &ScreenResult,
    old_error: T,
    correction: &Correction,
) -> Result<StepOutput<T>, StepError> {
    let n = nf.n();
    let tr = transform_step(nf, pert, f, p, cfg)?;
    let eps_ratio = eps_ratio_of(old_error, p).to_f64_lossy();
    let bounds = transform_bounds(&tr.map, p, eps_ratio, n)?;
    let (p00, p01) = average_low_order(&tr.r_avg);
    let r_limit = p.window.r / T::lit(2.0);
    let eps_over_r = eps_ratio / p.window.r.to_f64_lossy();
    let (nf_new, mut pert_new, shift) = match correction {
        Correction::None => (tr.nf_plus, tr.pert_plus, ShiftReport::None),
        Correction::Frequency { n1, rows } => {
            let fc = frequency_correction(&tr.nf_plus, &p01, *n1, rows.as_deref(), r_limit)?;
            let shifted = tr.pert_plus.shift_actions(&fc.i_star)?;
            let i_star: Vec<f64> = fc.i_star.iter().map(|x| x.to_f64_lossy()).collect();
            let shift_norm = i_star.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let report = ShiftReport::Frequency {
                i_star,
                rows: fc.rows,
                cols: fc.cols,
                residual_shift: fc.residual_shift,
                d1: fc.d1,
                newton_iterations: fc.iterations,
                shift_norm,
                eps_over_r,
                c_measured: if eps_over_r > 0.0 { shift_norm / eps_over_r } else { 0.0 },
            };
            (fc.nf, shifted, report)
        }
        Correction::Isoenergetic { n1, rows, tol, max_iter } => {
            let ic = isoenergetic_correction(nf, &tr.r_avg, *n1, rows.as_deref(), *tol, *max_iter, r_limit)?;
            let shifted = tr
                .pert_plus
                .shift_actions(&ic.i_star)?
                .add(&FourierTaylorSeries::constant(n, ic.energy_residual))?;
            let i_star: Vec<f64> = ic.i_star.iter().map(|x| x.to_f64_lossy()).collect();
            let shift_norm = i_star.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let report = ShiftReport::Isoenergetic {
                i_star,
                t: ic.t,
                rows: ic.rows,
                cols: ic.cols,
                iterations: ic.iterations,
                energy_residual: ic.energy_residual.to_f64_lossy(),
                shift_norm,
                eps_over_r,
                eps: eps_ratio,
                c_measured: if eps_ratio > 0.0 { ic.t.abs() / eps_ratio } else { 0.0 },
            };
            (ic.nf, shifted, report)
        }
    };
    let r_new = p.eta * p.window.r;
    let s_new = p.window.s - T::lit(5.0) * p.sigma;
    let lie_remainder = tr.remainder.majorant_norm(r_new, s_new)?;
    let total = pert_new.majorant_norm(r_new, s_new)?;
    let (kept, trimmed) = pert_new.trim_on_window(r_new, s_new, T::lit(cfg.trim) * total);
    pert_new = kept;
    let new_error = pert_new.majorant_norm(r_new, s_new)? + lie_remainder + trimmed;
    let old = old_error.to_f64_lossy();
    let new = new_error.to_f64_lossy();
    let report = KamStepReport {
        gates,
        divisor_min: screen.divisor_min,
        screened_modes: screen.screened,
        f_norm: f.norm_bound.to_f64_lossy(),
        transform_bounds: bounds,
        shift,
        p00: p00.to_f64_lossy(),
        p01: p01.iter().map(|x| x.to_f64_lossy()).collect(),
        old_error: old,
        new_error: new,
        contraction_ratio: if old > 0.0 { new / old } else { 0.0 },
        lie_remainder: lie_remainder.to_f64_lossy(),
        trimmed: trimmed.to_f64_lossy(),
    };
    Ok(StepOutput {
        nf: nf_new,
        pert: pert_new,
        f: f.clone(),
        r_avg: tr.r_avg,
        report,
    })
}

fn monomial_value<T: Real>(j: &MultiIndex, x: &[T]) -> T {
    j.0.iter().zip(x).fold(T::one(), |acc, (&e, &v)| acc * v.powi(e as i32))
}

/// `∇h(x)` for the higher-order part of a normal form.
fn h_gradient<T: Real>(h: &BTreeMap<MultiIndex, T>, x: &[T]) -> Vec<f64> {
    let n = x.len();
    let mut g = vec![0.0; n];
    for (j, &c) in h {
        for l in 0..n {
            if j.0[l] == 0 {
                continue;
            }
            let mut jj = j.clone();
            jj.0[l] -= 1;
            g[l] += (c * T::lit(j.0[l] as f64) * monomial_value(&jj, x)).to_f64_lossy();
        }
    }
    g
}

fn h_hessian<T: Real>(h: &BTreeMap<MultiIndex, T>, x: &[T]) -> DMatrix<f64> {
    let n = x.len();
    let mut m = DMatrix::zeros(n, n);
    for (j, &c) in h {
        for a in 0..n {
            for b in 0..n {
                let mut jj = j.clone();
                let ea = jj.0[a];
                if ea == 0 {
                    continue;
                }
                jj.0[a] -= 1;
                let eb = jj.0[b];
                if eb == 0 {
                    continue;
                }
                jj.0[b] -= 1;
                m[(a, b)] += (c * T::lit(ea as f64) * T::lit(eb as f64) * monomial_value(&jj, x)).to_f64_lossy();
            }
        }
    }
    m
}

fn h_value<T: Real>(h: &BTreeMap<MultiIndex, T>, x: &[T]) -> f64 {
    h.iter().map(|(j, &c)| (c * monomial_value(j, x)).to_f64_lossy()).sum()
}

fn pick(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

fn check_rows(rows: &[usize], n1: usize, n: usize) -> Result<(), StepError> {
    if n1 == 0 || n1 > n {
        return Err(StepError::InvalidParams(format!("n1 = {n1} must lie in 1..={n}")));
    }
    if rows.len() != n1 || rows.iter().any(|&r| r >= n) {
        return Err(StepError::InvalidParams(format!("preserved rows {rows:?} must be {n1} indices below {n}")));
    }
    Ok(())
}

fn choose_rows_cols(a: &DMatrix<f64>, n1: usize, rows: Option<&[usize]>) -> Result<(Vec<usize>, Vec<usize>), StepError> {
    let n = a.nrows();
    let mut rows = match rows {
        Some(r) => r.to_vec(),
        None => greedy_pivots(&a.transpose(), n1),
    };
    rows.sort_unstable();
    check_rows(&rows, n1, n)?;
    let mut cols = greedy_pivots(&pick(a, &rows, &(0..n).collect::<Vec<_>>()), n1);
    cols.sort_unstable();
    Ok((rows, cols))
}

fn solve_square(m: &DMatrix<f64>, rhs: &DVector<f64>, what: &str) -> Result<DVector<f64>, StepError> {
    let x = m
        .clone()
        .lu()
        .solve(rhs)
        .ok_or_else(|| StepError::SingularBlock(what.to_string()))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(StepError::SingularBlock(what.to_string()));
    }
    Ok(x)
}

/// Result of the frequency correction.
#[derive(Clone, Debug)]
pub struct FrequencyCorrection<T: Real> {
    pub i_star: Vec<T>,
    pub nf: NormalForm<T>,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub residual_shift: Vec<f64>,
    pub d1: Vec<Vec<f64>>,
    pub iterations: usize,
}

const NEWTON_MAX: usize = 50;

/// Translates actions so that the `rows` components of `∇N₊` return to
/// `ω₊ − P₀₁`. The residual `P₀₁ + A₊I + ∇h₊(I)` is formed without `ω`, so
/// huge frequencies do not swamp it.
pub fn frequency_correction<T: Real>(
    nf_plus: &NormalForm<T>,
    p01: &[T],
    n1: usize,
    preserved_rows: Option<&[usize]>,
    r_limit: T,
) -> Result<FrequencyCorrection<T>, StepError> {
    let n = nf_plus.n();
    let a = to_f64_matrix(&nf_plus.a());
    let h = nf_plus.h();
    let (rows, cols) = choose_rows_cols(&a, n1, preserved_rows)?;
    let p01f: Vec<f64> = p01.iter().map(|x| x.to_f64_lossy()).collect();
    let mut x = vec![0.0f64; n];
    let to_t = |v: &[f64]| v.iter().map(|&y| T::lit(y)).collect::<Vec<T>>();
    let residual = |x: &[f64]| -> Vec<f64> {
        let xt = to_t(x);
        let gh = h_gradient(&h, &xt);
        (0..n)
            .map(|i| p01f[i] + (0..n).map(|j| a[(i, j)] * x[j]).sum::<f64>() + gh[i])
            .collect()
    };
    let mut iterations = 0;
    if p01f.iter().any(|&v| v != 0.0) {
        for it in 1..=NEWTON_MAX {
            iterations = it;
            let g = residual(&x);
            let jac = &a + h_hessian(&h, &to_t(&x));
            let rhs = DVector::from_iterator(n1, rows.iter().map(|&i| g[i]));
            let delta = solve_square(&pick(&jac, &rows, &cols), &rhs, "frequency block")?;
            let mut step = 0.0f64;
            let mut size = 0.0f64;
            for (q, &c) in cols.iter().enumerate() {
                x[c] -= delta[q];
                step = step.max(delta[q].abs());
                size = size.max(x[c].abs());
            }
            if step <= 1e-15 * size || step == 0.0 {
                break;
            }
        }
    }
    let norm = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let limit = r_limit.to_f64_lossy();
    if norm > limit {
        return Err(StepError::ShiftTooLarge { norm, limit });
    }
    let g = residual(&x);
    let others: Vec<usize> = (0..n).filter(|i| !rows.contains(i)).collect();
    let residual_shift = others.iter().map(|&i| g[i]).collect();
    let d1 = if others.is_empty() {
        Vec::new()
    } else {
        let ar = pick(&a, &rows, &(0..n).collect::<Vec<_>>());
        let ao = pick(&a, &others, &(0..n).collect::<Vec<_>>());
        let svd = ar.transpose().svd(true, true);
        let mut out = Vec::new();
        for i in 0..ao.nrows() {
            let b = ao.row(i).transpose();
            let coef = svd.solve(&b, 1e-12).map_err(|e| StepError::SingularBlock(e.to_string()))?;
            out.push(coef.iter().copied().collect());
        }
        out
    };
    let i_star = to_t(&x);
    let nf = nf_plus.translate(&i_star)?;
    Ok(FrequencyCorrection {
        i_star,
        nf,
        rows,
        cols,
        residual_shift,
        d1,
        iterations,
    })
}

/// Result of the iso-energetic correction.
#[derive(Clone, Debug)]
pub struct IsoCorrection<T: Real> {
    pub i_star: Vec<T>,
    pub t: f64,
    pub nf: NormalForm<T>,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub iterations: usize,
    /// `N₊(I*) − e`, moved into the perturbation's constant term.
    pub energy_residual: T,
}

/// Solves the bordered system `A₊I + tω = −(P₀₁ + ∇h₊(I))` on `rows`,
/// `⟨ω,I⟩ = −(P₀₀ + ⟨P₀₁,I⟩ + ½⟨I,A₊I⟩ + h₊(I))` by an undamped fixed point
/// from `(0, 0)`, freezing the nonlinear terms at the previous iterate.
/// `nf` is the normal form before `[R]` was absorbed; its energy
/// coefficients are carried over bit for bit.
pub fn isoenergetic_correction<T: Real>(
    nf: &NormalForm<T>,
    r_avg: &FourierTaylorSeries<T>,
    n1: usize,
    preserved_rows: Option<&[usize]>,
    tol: f64,
    max_iter: usize,
    r_limit: T,
) -> Result<IsoCorrection<T>, StepError> {
    let n = nf.n();
    let nf_plus = absorb_average(nf, r_avg)?;
    let (p00, p01) = average_low_order(r_avg);
    let p00 = p00.to_f64_lossy();
    let p01: Vec<f64> = p01.iter().map(|x| x.to_f64_lossy()).collect();
    let a = to_f64_matrix(&nf_plus.a());
    let h = nf_plus.h();
    let omega: Vec<f64> = nf.omega().iter().map(|x| x.to_f64_lossy()).collect();
    let mut aw = DMatrix::zeros(n, n + 1);
    for i in 0..n {
        for j in 0..n {
            aw[(i, j)] = a[(i, j)];
        }
        aw[(i, n)] = omega[i];
    }
    let mut rows = match preserved_rows {
        Some(r) => r.to_vec(),
        None => greedy_pivots(&aw.transpose(), n1),
    };
    rows.sort_unstable();
    check_rows(&rows, n1, n)?;
    let mut cols = if n1 == n {
        (0..n).collect()
    } else {
        greedy_pivots(&pick(&a, &rows, &(0..n).collect::<Vec<_>>()), n1)
    };
    cols.sort_unstable();
    let mut b = DMatrix::zeros(n1 + 1, n1 + 1);
    for (p, &i) in rows.iter().enumerate() {
        for (q, &j) in cols.iter().enumerate() {
            b[(p, q)] = a[(i, j)];
        }
        b[(p, n1)] = omega[i];
    }
    for (q, &j) in cols.iter().enumerate() {
        b[(n1, q)] = omega[j];
    }
    let lu = b.clone().lu();
    if !lu.is_invertible() {
        return Err(StepError::SingularBlock("bordered block".into()));
    }
    let to_t = |v: &[f64]| v.iter().map(|&y| T::lit(y)).collect::<Vec<T>>();
    let limit = r_limit.to_f64_lossy();
    let nonlinear = |x: &[f64]| -> (Vec<f64>, f64) {
        let xt = to_t(x);
        let gh = h_gradient(&h, &xt);
        let f1 = rows.iter().map(|&i| p01[i] + gh[i]).collect();
        let quad: f64 = (0..n).map(|i| x[i] * (0..n).map(|j| a[(i, j)] * x[j]).sum::<f64>()).sum::<f64>() / 2.0;
        let lin: f64 = (0..n).map(|i| p01[i] * x[i]).sum();
        (f1, p00 + lin + quad + h_value(&h, &xt))
    };
    let mut x = vec![0.0f64; n];
    let mut t = 0.0f64;
    let mut iterations = 0;
    let mut converged = false;
    for it in 1..=max_iter.max(1) {
        iterations = it;
        let (f1, f2) = nonlinear(&x);
        let mut rhs = DVector::zeros(n1 + 1);
        for p in 0..n1 {
            rhs[p] = -f1[p];
        }
        rhs[n1] = -f2;
        let sol = lu.solve(&rhs).ok_or_else(|| StepError::SingularBlock("bordered block".into()))?;
        let mut next = vec![0.0f64; n];
        for (q, &c) in cols.iter().enumerate() {
            next[c] = sol[q];
        }
        let norm = next.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !norm.is_finite() || norm > limit {
            return Err(StepError::Divergence {
                iteration: it,
                norm,
                limit,
            });
        }
        let dx = next.iter().zip(&x).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let dt = (sol[n1] - t).abs();
        x = next;
        t = sol[n1];
        if dx <= tol * norm && dt <= tol * t.abs() {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(StepError::NoConvergence(iterations));
    }
    let (_, f2) = nonlinear(&x);
    let energy_residual = f2 + (0..n).map(|i| omega[i] * x[i]).sum::<f64>();
    let i_star = to_t(&x);
    let mut out = nf_plus.translate(&i_star)?;
    out.e_parts = nf.e_parts.clone();
    Ok(IsoCorrection {
        i_star,
        t,
        nf: out,
        rows,
        cols,
        iterations,
        energy_residual: T::lit(energy_residual),
    })
}

/// `new ≤ old·η^m·(1 + slack)` and `new ≤ ε̃γ₊r₊²η₊^mσ₊^{τ+1}`.
pub fn error_update<T: Real>(report: &KamStepReport, p: &StepParams<T>, p_next: &StepParams<T>, slack: f64) -> bool {
    let f = |x: T| x.to_f64_lossy();
    let m = p.m_taylor as i32;
    let contraction = report.new_error <= report.old_error * f(p.eta).powi(m) * (1.0 + slack);
    let target = f(p_next.scales.eps_min())
        * f(p_next.gamma)
        * f(p_next.window.r).powi(2)
        * f(p_next.eta).powi(p_next.m_taylor as i32)
        * f(p_next.sigma).powf(f(p_next.tau) + 1.0);
    contraction && report.new_error <= target
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ScaleSet;

    type S = FourierTaylorSeries<f64>;

    fn params(n: usize, k: f64, gamma: f64) -> StepParams<f64> {
        let scales = ScaleSet::new(vec![1.0], 1.0).unwrap();
        let w = DomainWindow::new(0.1, 1.0, 1e-9).unwrap();
        StepParams::new(w, 0.1, 0.1, k, gamma, (n as f64 - 1.0).max(1.0), 4, scales, n).unwrap()
    }

    fn linear_nf(omega: &[f64]) -> NormalForm<f64> {
        let scales = ScaleSet::new(vec![1.0], 1.0).unwrap();
        let mut nf = NormalForm::zero(omega.len(), scales, 4);
        nf.omega_parts[0] = omega.to_vec();
        nf
    }

    #[test]
    fn gate_a_example() {
        let mut p = params(2, 10.0, 1e-3);
        p.sigma = 1.0;
        p.window.s = 6.0;
        let g = gate_check(&p, 2, 0.0);
        assert!(g.a.pass);
        p.big_k = 1.5;
        let g = gate_check(&p, 3, 0.0);
        assert!(!g.a.pass && g.a.margin < 1.0);
    }

    #[test]
    fn mode_enumeration_count() {
        for n in 1..4 {
            for k in 1..6 {
                assert_eq!(enumerate_modes(n, k).len() as f64, mode_count(n, k));
            }
        }
    }

    #[test]
    fn exact_resonance_flagged() {
        let p = params(2, 5.0, 1e-6);
        let k = FourierMode(vec![1, -1]);
        let res = screen_modes(&[1.0, 1.0], &p, 0.0, &[k.clone(), FourierMode(vec![1, 0])]).unwrap();
        assert_eq!(res.resonant, vec![k]);
    }

    #[test]
    fn homological_simple() {
        let nf = linear_nf(&[1.0, 2.0]);
        let r = S::monomial(vec![1, 0], vec![0, 0], Complex::new(1.0, 0.0));
        let p = params(2, 5.0, 1e-3);
        let f = solve_homological(&nf, &r, &p).unwrap();
        assert_eq!(f.series.len(), 1);
        assert_eq!(f.series.coeff(&[1, 0], &[0, 0]), Complex::new(0.0, -1.0));
        assert!(homological_residual(&nf, &f.series, &r, &p).unwrap().is_empty());
    }

    #[test]
    fn constant_r_gives_empty_f() {
        let nf = linear_nf(&[1.0, 2.0]);
        let r = S::constant(2, 3.0);
        let f = solve_homological(&nf, &r, &params(2, 5.0, 1e-3)).unwrap();
        assert!(f.series.is_empty());
        assert_eq!(r.average(), r);
    }

    #[test]
    fn identity_step() {
        let nf = linear_nf(&[1.0, 2.0_f64.sqrt()]);
        let pert = S::zero(2);
        let p = params(2, 400.0, 1e6);
        let out = kam_step(&nf, &pert, &p, &StepConfig::default(), &Correction::None).unwrap();
        assert_eq!(out.nf, nf);
        assert!(out.pert.is_empty());
        assert!(out.report.transform_bounds.iter().all(|b| b.value == 0.0));
    }

    #[test]
    fn symplectic_form_is_antisymmetric() {
        let j = symplectic_form(3);
        assert_eq!(&j + j.transpose(), DMatrix::zeros(6, 6));
    }
}
