//! Monte Carlo estimates of resonant parameter sets and their scaling in γ.
//!
//! A sample `ξ` is resonant when some `0 < |k| ≤ k_max` has
//! `|⟨k, ω(ξ)⟩| < ε̃γ/|k|^p`. Per sample we keep the score
//! `q(ξ) = min_k |⟨k, ω(ξ)⟩|·|k|^p`, so one pass answers every γ at once and
//! the estimate is monotone in γ by construction.

use crate::kamstep::enumerate_modes;
use crate::scalar::Real;
use crate::series::{FourierMode, FourierTaylorSeries};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Samples per seeded batch.
pub const BATCH: u64 = 1 << 16;
pub const DEFAULT_SAMPLES: u64 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("sample_count must be positive")]
    NoSamples,
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("frequency component {0} depends on the angles")]
    NonPolynomial(usize),
    #[error("estimate is zero at gamma = {gamma:e}; cannot fit a power law")]
    EmptySet { gamma: f64 },
    #[error("fit needs {0}")]
    BadGammas(String),
}

/// A real polynomial map `ξ ↦ ω(ξ)`, one term list per component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolynomialMap {
    pub n: usize,
    pub components: Vec<Vec<(f64, Vec<u32>)>>,
}

impl PolynomialMap {
    /// `ω(ξ) = ξ`.
    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    /// `ω_l(ξ) = c_l ξ_l`.
    pub fn diagonal(c: &[f64]) -> Self {
        let n = c.len();
        let components = (0..n)
            .map(|l| {
                let mut j = vec![0; n];
                j[l] = 1;
                vec![(c[l], j)]
            })
            .collect();
        PolynomialMap { n, components }
    }

    /// From `k = 0` series, e.g. a frequency field. Imaginary parts are dropped.
    pub fn from_series<T: Real>(field: &[FourierTaylorSeries<T>]) -> Result<Self, MeasureError> {
        let n = field.len();
        let mut components = Vec::with_capacity(n);
        for (i, w) in field.iter().enumerate() {
            if w.dim() != n {
                return Err(MeasureError::InvalidQuery(format!("component {} has dimension {}", i + 1, w.dim())));
            }
            let mut terms = Vec::new();
            for (k, j, c) in w.terms() {
                if !k.is_zero() {
                    return Err(MeasureError::NonPolynomial(i + 1));
                }
                terms.push((c.re.to_f64_lossy(), j.0.clone()));
            }
            components.push(terms);
        }
        Ok(PolynomialMap { n, components })
    }

    pub fn eval_into(&self, xi: &[f64], out: &mut [f64]) {
        for (o, comp) in out.iter_mut().zip(&self.components) {
            *o = comp
                .iter()
                .map(|(c, j)| j.iter().zip(xi).fold(*c, |acc, (&e, &x)| acc * x.powi(e as i32)))
                .sum();
        }
    }

    pub fn eval(&self, xi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.eval_into(xi, &mut out);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResonanceQuery {
    pub map: PolynomialMap,
    /// Box `Λ` as `(lo, hi)` per coordinate.
    pub domain: Vec<(f64, f64)>,
    pub gamma: f64,
    pub tau: f64,
    /// Exponent `p` of `|k|` in the threshold; defaults to `τ`.
    pub denom_exponent: f64,
    pub k_max: u32,
    pub eps_tilde: f64,
    pub sample_count: u64,
    pub seed: u64,
    /// Explicit mode list replacing the `|k| ≤ k_max` ball.
    pub modes: Option<Vec<FourierMode>>,
}

impl ResonanceQuery {
    /// Defaults: `γ = 1`, `τ = n`, `ε̃ = 1`, 10⁶ samples, seed 0.
    pub fn new(map: PolynomialMap, domain: Vec<(f64, f64)>, k_max: u32) -> Self {
        let tau = map.n as f64;
        ResonanceQuery {
            map,
            domain,
            gamma: 1.0,
            tau,
            denom_exponent: tau,
            k_max,
            eps_tilde: 1.0,
            sample_count: DEFAULT_SAMPLES,
            seed: 0,
            modes: None,
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    /// Sets `τ` and the threshold exponent together.
    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self.denom_exponent = tau;
        self
    }

    pub fn with_denom_exponent(mut self, p: f64) -> Self {
        self.denom_exponent = p;
        self
    }

    pub fn with_eps_tilde(mut self, e: f64) -> Self {
        self.eps_tilde = e;
        self
    }

    pub fn with_samples(mut self, count: u64) -> Self {
        self.sample_count = count;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_modes(mut self, modes: Vec<FourierMode>) -> Self {
        self.modes = Some(modes);
        self
    }

    pub fn volume(&self) -> f64 {
        self.domain.iter().map(|(lo, hi)| hi - lo).product()
    }

    pub fn validate(&self) -> Result<(), MeasureError> {
        let n = self.map.n;
        if self.sample_count == 0 {
            return Err(MeasureError::NoSamples);
        }
        if self.domain.len() != n {
            return Err(MeasureError::InvalidQuery(format!("domain has {} sides, n = {n}", self.domain.len())));
        }
        if self.domain.iter().any(|(lo, hi)| !(hi > lo) || !lo.is_finite() || !hi.is_finite()) {
            return Err(MeasureError::InvalidQuery("domain box must have positive volume".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(MeasureError::InvalidQuery(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.tau > n as f64 - 1.0) {
            return Err(MeasureError::InvalidQuery(format!("tau must exceed n - 1 = {}, got {}", n - 1, self.tau)));
        }
        if !(self.eps_tilde > 0.0) || !self.denom_exponent.is_finite() {
            return Err(MeasureError::InvalidQuery("eps_tilde must be > 0 and the exponent finite".into()));
        }
        if let Some(modes) = &self.modes {
            if modes.iter().any(|k| k.0.len() != n || k.is_zero()) {
                return Err(MeasureError::InvalidQuery("modes must be nonzero with n entries".into()));
            }
        } else if self.k_max == 0 {
            return Err(MeasureError::InvalidQuery("k_max must be >= 1".into()));
        }
        Ok(())
    }

    /// Modes with `k` and `−k` merged, paired with `|k|^p`.
    fn weighted_modes(&self) -> Vec<(Vec<f64>, f64)> {
        let modes = match &self.modes {
            Some(m) => m.clone(),
            None => enumerate_modes(self.map.n, self.k_max)
                .into_iter()
                .filter(|k| k.0.iter().find(|&&x| x != 0).is_some_and(|&x| x > 0))
                .collect(),
        };
        modes
            .iter()
            .map(|k| {
                let w = (k.norm() as f64).powf(self.denom_exponent);
                (k.0.iter().map(|&x| x as f64).collect(), w)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureEstimate {
    pub gamma: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub hits: u64,
    pub samples: u64,
}

fn score(map: &PolynomialMap, modes: &[(Vec<f64>, f64)], xi: &[f64], w: &mut [f64]) -> f64 {
    map.eval_into(xi, w);
    modes
        .iter()
        .map(|(k, wk)| k.iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>().abs() * wk)
        .fold(f64::INFINITY, f64::min)
}

/// Hit counts for each γ, from seeded batches merged by summation.
fn hit_counts(q: &ResonanceQuery, gammas: &[f64]) -> Vec<u64> {
    let modes = q.weighted_modes();
    let thresholds: Vec<f64> = gammas.iter().map(|g| q.eps_tilde * g).collect();
    let batches = q.sample_count.div_ceil(BATCH);
    (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(q.seed);
            rng.set_stream(b);
            let count = BATCH.min(q.sample_count - b * BATCH);
            let mut hits = vec![0u64; gammas.len()];
            let mut xi = vec![0.0; q.map.n];
            let mut w = vec![0.0; q.map.n];
            for _ in 0..count {
                for (x, (lo, hi)) in xi.iter_mut().zip(&q.domain) {
                    *x = lo + (hi - lo) * rng.random::<f64>();
                }
                let s = score(&q.map, &modes, &xi, &mut w);
                for (h, t) in hits.iter_mut().zip(&thresholds) {
                    if s < *t {
                        *h += 1;
                    }
                }
            }
            hits
        })
        .reduce(
            || vec![0u64; gammas.len()],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        )
}

fn to_estimate(q: &ResonanceQuery, gamma: f64, hits: u64) -> MeasureEstimate {
    let n = q.sample_count as f64;
    let p = hits as f64 / n;
    let vol = q.volume();
    MeasureEstimate {
        gamma,
        estimate: vol * p,
        std_error: vol * (p * (1.0 - p) / n).sqrt(),
        hits,
        samples: q.sample_count,
    }
}

/// Estimate of the resonant set at `q.gamma`.
pub fn resonance_measure(q: &ResonanceQuery) -> Result<MeasureEstimate, MeasureError> {
    q.validate()?;
    let hits = hit_counts(q, &[q.gamma]);
    Ok(to_estimate(q, q.gamma, hits[0]))
}

/// Estimates for several γ from one shared sample.
pub fn resonance_measures(q: &ResonanceQuery, gammas: &[f64]) -> Result<Vec<MeasureEstimate>, MeasureError> {
    q.validate()?;
    if gammas.iter().any(|g| !(*g > 0.0)) {
        return Err(MeasureError::InvalidQuery("gammas must be > 0".into()));
    }
    let hits = hit_counts(q, gammas);
    Ok(gammas.iter().zip(hits).map(|(&g, h)| to_estimate(q, g, h)).collect())
}

/// Ordinary least squares `y = α + βx`: `(β, se(β), α)`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let m = x.len() as f64;
    let mx = x.iter().sum::<f64>() / m;
    let my = y.iter().sum::<f64>() / m;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let beta = sxy / sxx;
    let alpha = my - beta * mx;
    let ssr: f64 = x.iter().zip(y).map(|(a, b)| (b - alpha - beta * a).powi(2)).sum();
    let se = if x.len() > 2 { (ssr / (m - 2.0) / sxx).sqrt() } else { 0.0 };
    (beta, se, alpha)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentVerdict {
    pub exponent: f64,
    /// `β ≥ exponent − 2·se`.
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureFit {
    pub points: Vec<MeasureEstimate>,
    pub beta: f64,
    pub std_error: f64,
    /// `β ± 2·se`.
    pub interval: (f64, f64),
    pub prefactor: f64,
    /// Derivative order `N` of the non-degeneracy condition.
    pub order: usize,
    pub vs_n_plus_one: ExponentVerdict,
    pub vs_n: ExponentVerdict,
    /// Set when the two verdicts differ.
    pub exponents_disagree: bool,
}

fn verdict(beta: f64, se: f64, exponent: f64) -> ExponentVerdict {
    ExponentVerdict {
        exponent,
        pass: beta >= exponent - 2.0 * se,
    }
}

/// Power law fit from given estimates. `gammas` must be decreasing.
pub fn fit_estimates(points: Vec<MeasureEstimate>, order: usize) -> Result<MeasureFit, MeasureError> {
    if points.len() < 4 {
        return Err(MeasureError::BadGammas("at least 4 gamma values".into()));
    }
    if points.windows(2).any(|w| !(w[1].gamma < w[0].gamma)) {
        return Err(MeasureError::BadGammas("a strictly decreasing gamma list".into()));
    }
    let first = points[0].gamma;
    let last = points[points.len() - 1].gamma;
    if first / last < 100.0 * (1.0 - 1e-12) {
        return Err(MeasureError::BadGammas("gammas spanning at least 2 decades".into()));
    }
    if let Some(p) = points.iter().find(|p| !(p.estimate > 0.0)) {
        return Err(MeasureError::EmptySet { gamma: p.gamma });
    }
    let x: Vec<f64> = points.iter().map(|p| p.gamma.ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.estimate.ln()).collect();
    let (beta, se, alpha) = ols_slope(&x, &y);
    let np1 = 1.0 / (order as f64 + 1.0);
    let nn = if order == 0 { f64::INFINITY } else { 1.0 / order as f64 };
    let vs_n_plus_one = verdict(beta, se, np1);
    let vs_n = verdict(beta, se, nn);
    Ok(MeasureFit {
        points,
        beta,
        std_error: se,
        interval: (beta - 2.0 * se, beta + 2.0 * se),
        prefactor: alpha.exp(),
        order,
        exponents_disagree: vs_n_plus_one.pass != vs_n.pass,
        vs_n_plus_one,
        vs_n,
    })
}

/// Fits `measure ≈ C·γ^β` over `gammas`, one shared sample for all.
pub fn fit_measure_exponent(q: &ResonanceQuery, gammas: &[f64], order: usize) -> Result<MeasureFit, MeasureError> {
    if gammas.len() < 4 {
        return Err(MeasureError::BadGammas("at least 4 gamma values".into()));
    }
    let points = resonance_measures(q, gammas)?;
    fit_estimates(points, order)
}

/// Exact length of `[lo, hi] ∩ ⋃ intervals`.
pub fn interval_union_measure(lo: f64, hi: f64, intervals: &[(f64, f64)]) -> f64 {
    let mut iv: Vec<(f64, f64)> = intervals
        .iter()
        .map(|&(a, b)| (a.max(lo), b.min(hi)))
        .filter(|(a, b)| b > a)
        .collect();
    iv.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut total = 0.0;
    let mut cur: Option<(f64, f64)> = None;
    for (a, b) in iv {
        cur = match cur {
            Some((ca, cb)) if a <= cb => Some((ca, cb.max(b))),
            Some((ca, cb)) => {
                total += cb - ca;
                Some((a, b))
            }
            None => Some((a, b)),
        };
    }
    if let Some((a, b)) = cur {
        total += b - a;
    }
    total
}

/// Exact resonant length for `n = 1`, `ω(ξ) = αξ + β`: each `k` gives the
/// interval `|k(αξ + β)| < ε̃γ/k^p`.
pub fn affine_1d_resonant_length(q: &ResonanceQuery, alpha: f64, beta: f64) -> f64 {
    let (lo, hi) = q.domain[0];
    let centre = -beta / alpha;
    let iv: Vec<(f64, f64)> = (1..=q.k_max)
        .map(|k| {
            let k = k as f64;
            let half = q.eps_tilde * q.gamma / k.powf(q.denom_exponent) / (k * alpha.abs());
            (centre - half, centre + half)
        })
        .collect();
    interval_union_measure(lo, hi, &iv)
}
