//! Multi-scale Hamiltonians and their parameterized normal forms.
//!
//! Scales are 1-based: `epsilons[0]` is `ε_1`, and a leading `ε_0` from an
//! input Hamiltonian is stored there.

use crate::scalar::Real;
use crate::series::{DomainWindow, FourierMode, FourierTaylorSeries, MultiIndex, SeriesError};
use nalgebra::DMatrix;
use num_complex::Complex;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("scale {index} = {value} outside (0, 1]")]
    ScaleOutOfRange { index: usize, value: f64 },
    #[error("epsilon_ratio must be positive, got {0}")]
    BadRatio(f64),
    #[error("empty scale set")]
    NoScales,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("integrable part {0} depends on the angles (only k = 0 terms are allowed)")]
    NonPolynomial(usize),
    #[error("base point is within {distance} of the domain boundary, window needs {r}")]
    BoundaryTooClose { distance: f64, r: f64 },
    #[error("m_taylor must be at least 3, got {0}")]
    BadTaylorCutoff(u32),
    #[error(transparent)]
    Series(#[from] SeriesError),
}

/// Scale factors `ε_1..ε_m` with derived min, max and perturbation size.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleSet<T> {
    epsilons: Vec<T>,
    eps_min: T,
    eps_max: T,
    epsilon_ratio: T,
    eps_pert: T,
}

impl<T: Real> ScaleSet<T> {
    pub fn new(epsilons: Vec<T>, epsilon_ratio: T) -> Result<Self, ModelError> {
        if epsilons.is_empty() {
            return Err(ModelError::NoScales);
        }
        for (i, &e) in epsilons.iter().enumerate() {
            if !(e > T::zero() && e <= T::one()) {
                return Err(ModelError::ScaleOutOfRange {
                    index: i + 1,
                    value: e.to_f64_lossy(),
                });
            }
        }
        if !(epsilon_ratio > T::zero()) || !epsilon_ratio.is_finite() {
            return Err(ModelError::BadRatio(epsilon_ratio.to_f64_lossy()));
        }
        let eps_min = epsilons.iter().copied().fold(T::infinity(), T::min);
        let eps_max = epsilons.iter().copied().fold(T::zero(), T::max);
        Ok(ScaleSet {
            eps_pert: epsilon_ratio * eps_min,
            epsilons,
            eps_min,
            eps_max,
            epsilon_ratio,
        })
    }

    pub fn epsilons(&self) -> &[T] {
        &self.epsilons
    }

    pub fn len(&self) -> usize {
        self.epsilons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epsilons.is_empty()
    }

    /// `ε̃`
    pub fn eps_min(&self) -> T {
        self.eps_min
    }

    /// `ε̂`
    pub fn eps_max(&self) -> T {
        self.eps_max
    }

    /// `ϵ`
    pub fn epsilon_ratio(&self) -> T {
        self.epsilon_ratio
    }

    /// `ε = ϵ·ε̃`
    pub fn eps_pert(&self) -> T {
        self.eps_pert
    }

    /// Index of the largest scale (first one on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &e) in self.epsilons.iter().enumerate() {
            if e > self.epsilons[best] {
                best = i;
            }
        }
        best
    }

    /// Same scales with a different perturbation ratio.
    pub fn with_ratio(&self, epsilon_ratio: T) -> Result<Self, ModelError> {
        ScaleSet::new(self.epsilons.clone(), epsilon_ratio)
    }
}

/// Per-scale pieces of `e + ⟨ω,I⟩ + ½⟨I,AI⟩ + Σ h_j I^j`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalForm<T: Real> {
    pub e_parts: Vec<T>,
    pub omega_parts: Vec<Vec<T>>,
    pub a_parts: Vec<DMatrix<T>>,
    pub h_parts: Vec<BTreeMap<MultiIndex, T>>,
    pub scales: ScaleSet<T>,
    pub m_taylor: u32,
}

impl<T: Real> NormalForm<T> {
    pub fn zero(n: usize, scales: ScaleSet<T>, m_taylor: u32) -> Self {
        let m = scales.len();
        NormalForm {
            e_parts: vec![T::zero(); m],
            omega_parts: vec![vec![T::zero(); n]; m],
            a_parts: vec![DMatrix::from_element(n, n, T::zero()); m],
            h_parts: vec![BTreeMap::new(); m],
            scales,
            m_taylor,
        }
    }

    pub fn n(&self) -> usize {
        self.omega_parts.first().map_or(0, |w| w.len())
    }

    pub fn e(&self) -> T {
        self.e_parts
            .iter()
            .zip(self.scales.epsilons())
            .fold(T::zero(), |acc, (&p, &eps)| acc + eps * p)
    }

    pub fn omega(&self) -> Vec<T> {
        let mut w = vec![T::zero(); self.n()];
        for (part, &eps) in self.omega_parts.iter().zip(self.scales.epsilons()) {
            for (wi, &pi) in w.iter_mut().zip(part) {
                *wi = *wi + eps * pi;
            }
        }
        w
    }

    pub fn a(&self) -> DMatrix<T> {
        let n = self.n();
        let mut a = DMatrix::from_element(n, n, T::zero());
        for (part, &eps) in self.a_parts.iter().zip(self.scales.epsilons()) {
            for i in 0..n {
                for j in 0..n {
                    a[(i, j)] = a[(i, j)] + eps * part[(i, j)];
                }
            }
        }
        a
    }

    pub fn h(&self) -> BTreeMap<MultiIndex, T> {
        let mut out: BTreeMap<MultiIndex, T> = BTreeMap::new();
        for (part, &eps) in self.h_parts.iter().zip(self.scales.epsilons()) {
            for (j, &c) in part {
                let slot = out.entry(j.clone()).or_insert(T::zero());
                *slot = *slot + eps * c;
            }
        }
        out
    }

    /// Largest asymmetry `|A_ij − A_ji|` over all parts.
    pub fn asymmetry(&self) -> T {
        let mut worst = T::zero();
        for a in &self.a_parts {
            for i in 0..a.nrows() {
                for j in 0..a.ncols() {
                    worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
                }
            }
        }
        worst
    }

    /// Part `i` as an action polynomial.
    pub fn part_series(&self, i: usize) -> FourierTaylorSeries<T> {
        poly_series(
            self.n(),
            self.e_parts[i],
            &self.omega_parts[i],
            &self.a_parts[i],
            &self.h_parts[i],
        )
    }

    /// The combined normal form `N` as a series.
    pub fn to_series(&self) -> FourierTaylorSeries<T> {
        poly_series(self.n(), self.e(), &self.omega(), &self.a(), &self.h())
    }

    /// Overwrites part `i` from a polynomial of degree `< m_taylor`.
    pub fn set_part_from_series(&mut self, i: usize, p: &FourierTaylorSeries<T>) {
        let (e, w, a, h) = split_poly(self.n(), p, self.m_taylor);
        self.e_parts[i] = e;
        self.omega_parts[i] = w;
        self.a_parts[i] = a;
        self.h_parts[i] = h;
    }

    /// Per-scale Taylor shift `I ↦ I + shift`.
    pub fn translate(&self, shift: &[T]) -> Result<Self, ModelError> {
        let mut out = self.clone();
        for i in 0..self.scales.len() {
            let p = self.part_series(i).shift_actions(shift)?;
            out.set_part_from_series(i, &p);
        }
        Ok(out)
    }

    /// `∇N(I)` of the combined normal form.
    pub fn gradient_at(&self, actions: &[T]) -> Vec<T> {
        let n = self.n();
        let a = self.a();
        let mut g = self.omega();
        for i in 0..n {
            for j in 0..n {
                g[i] = g[i] + a[(i, j)] * actions[j];
            }
        }
        for (j, c) in self.h() {
            for l in 0..n {
                let e = j.0[l];
                if e == 0 {
                    continue;
                }
                let mut term = c * T::lit(e as f64);
                for (q, &x) in actions.iter().enumerate() {
                    let p = if q == l { e - 1 } else { j.0[q] };
                    term = term * x.powi(p as i32);
                }
                g[l] = g[l] + term;
            }
        }
        g
    }

    /// `N(I)` of the combined normal form.
    pub fn value_at(&self, actions: &[T]) -> T {
        let zeros = vec![T::zero(); self.n()];
        self.to_series().eval_real(actions, &zeros).re
    }
}

fn poly_series<T: Real>(
    n: usize,
    e: T,
    omega: &[T],
    a: &DMatrix<T>,
    h: &BTreeMap<MultiIndex, T>,
) -> FourierTaylorSeries<T> {
    let mut terms = Vec::new();
    let k0 = vec![0i64; n];
    let re = |x: T| Complex::new(x, T::zero());
    terms.push((k0.clone(), vec![0u32; n], re(e)));
    for l in 0..n {
        terms.push((k0.clone(), MultiIndex::unit(n, l).0, re(omega[l])));
    }
    for i in 0..n {
        for j in i..n {
            let mut idx = vec![0u32; n];
            idx[i] += 1;
            idx[j] += 1;
            let c = if i == j {
                a[(i, i)] / T::lit(2.0)
            } else {
                (a[(i, j)] + a[(j, i)]) / T::lit(2.0)
            };
            terms.push((k0.clone(), idx, re(c)));
        }
    }
    for (j, &c) in h {
        terms.push((k0.clone(), j.0.clone(), re(c)));
    }
    FourierTaylorSeries::from_terms(n, terms, true).expect("k = 0 real terms")
}

type PolyParts<T> = (T, Vec<T>, DMatrix<T>, BTreeMap<MultiIndex, T>);

fn split_poly<T: Real>(n: usize, p: &FourierTaylorSeries<T>, m_taylor: u32) -> PolyParts<T> {
    let mut e = T::zero();
    let mut w = vec![T::zero(); n];
    let mut a = DMatrix::from_element(n, n, T::zero());
    let mut h = BTreeMap::new();
    for (k, j, c) in p.terms() {
        if !k.is_zero() {
            continue;
        }
        let c = c.re;
        match j.order() {
            0 => e = c,
            1 => {
                let l = j.0.iter().position(|&x| x == 1).unwrap();
                w[l] = c;
            }
            2 => {
                let idx: Vec<usize> = (0..n).flat_map(|l| std::iter::repeat_n(l, j.0[l] as usize)).collect();
                if idx[0] == idx[1] {
                    a[(idx[0], idx[0])] = c * T::lit(2.0);
                } else {
                    a[(idx[0], idx[1])] = c;
                    a[(idx[1], idx[0])] = c;
                }
            }
            d if d < m_taylor => {
                h.insert(j.clone(), c);
            }
            _ => {}
        }
    }
    (e, w, a, h)
}

/// `Σ ε_i H_i(I) + ε·P(I, θ)` with polynomial `H_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct HamiltonianSpec<T: Real> {
    pub n: usize,
    pub integrable_parts: Vec<FourierTaylorSeries<T>>,
    pub perturbation: FourierTaylorSeries<T>,
    pub scales: ScaleSet<T>,
    pub m_taylor: u32,
    /// Optional action box `[lo, hi]` per coordinate; `None` means unbounded.
    pub domain: Option<Vec<(T, T)>>,
}

impl<T: Real> HamiltonianSpec<T> {
    pub fn new(
        integrable_parts: Vec<FourierTaylorSeries<T>>,
        perturbation: FourierTaylorSeries<T>,
        scales: ScaleSet<T>,
        m_taylor: u32,
    ) -> Result<Self, ModelError> {
        let n = perturbation.dim();
        if integrable_parts.len() != scales.len() {
            return Err(ModelError::Dimension(format!(
                "{} integrable parts for {} scales",
                integrable_parts.len(),
                scales.len()
            )));
        }
        if m_taylor < 3 {
            return Err(ModelError::BadTaylorCutoff(m_taylor));
        }
        for (i, part) in integrable_parts.iter().enumerate() {
            if part.dim() != n {
                return Err(ModelError::Dimension(format!(
                    "part {} has dimension {}, perturbation has {n}",
                    i + 1,
                    part.dim()
                )));
            }
            if part.terms().any(|(k, _, _)| !k.is_zero()) {
                return Err(ModelError::NonPolynomial(i + 1));
            }
        }
        Ok(HamiltonianSpec {
            n,
            integrable_parts,
            perturbation,
            scales,
            m_taylor,
            domain: None,
        })
    }

    pub fn with_domain(mut self, domain: Vec<(T, T)>) -> Result<Self, ModelError> {
        if domain.len() != self.n {
            return Err(ModelError::Dimension(format!("domain has {} intervals, n = {}", domain.len(), self.n)));
        }
        self.domain = Some(domain);
        Ok(self)
    }

    /// The full Hamiltonian as one series.
    pub fn full_series(&self) -> Result<FourierTaylorSeries<T>, ModelError> {
        let mut h = self.perturbation.scale(self.scales.eps_pert());
        for (part, &eps) in self.integrable_parts.iter().zip(self.scales.epsilons()) {
            h = h.add(&part.scale(eps))?;
        }
        Ok(h)
    }
}

/// Result of recentering a spec at a base point.
#[derive(Clone, Debug, PartialEq)]
pub struct Expansion<T: Real> {
    pub nf: NormalForm<T>,
    /// `Σ_{|j| ≥ m} h_j I^j` with the scales already applied.
    pub tail: FourierTaylorSeries<T>,
    /// Shifted `P`; the Hamiltonian carries it as `ε·P`.
    pub pert: FourierTaylorSeries<T>,
    /// `majorant(tail, r, s) / ε`, the measured tail constant.
    pub tail_constant: T,
}

impl<T: Real> Expansion<T> {
    /// `tail + ε·pert`, the perturbation the KAM step sees.
    pub fn step_perturbation(&self) -> Result<FourierTaylorSeries<T>, ModelError> {
        Ok(self.tail.add(&self.pert.scale(self.nf.scales.eps_pert()))?)
    }

    /// `nf + tail + ε·pert`.
    pub fn reassemble(&self) -> Result<FourierTaylorSeries<T>, ModelError> {
        Ok(self.nf.to_series().add(&self.step_perturbation()?)?)
    }
}

/// Default initial radius `r = ε^{1/m}`.
pub fn default_radius<T: Real>(scales: &ScaleSet<T>, m_taylor: u32) -> T {
    scales.eps_pert().powf(T::one() / T::lit(m_taylor as f64))
}

/// Taylor-expands `spec` at `xi` into a normal form, a high-degree tail and the
/// shifted perturbation.
pub fn expand_at<T: Real>(
    spec: &HamiltonianSpec<T>,
    xi: &[T],
    window: &DomainWindow<T>,
) -> Result<Expansion<T>, ModelError> {
    let n = spec.n;
    if xi.len() != n {
        return Err(ModelError::Dimension(format!("base point has {} entries, n = {n}", xi.len())));
    }
    if let Some(domain) = &spec.domain {
        let dist = domain
            .iter()
            .zip(xi)
            .map(|(&(lo, hi), &x)| (x - lo).min(hi - x))
            .fold(T::infinity(), T::min);
        if dist < window.r {
            return Err(ModelError::BoundaryTooClose {
                distance: dist.to_f64_lossy(),
                r: window.r.to_f64_lossy(),
            });
        }
    }
    let m = spec.m_taylor;
    let mut nf = NormalForm::zero(n, spec.scales.clone(), m);
    let mut tail = FourierTaylorSeries::zero(n);
    for (i, part) in spec.integrable_parts.iter().enumerate() {
        let shifted = part.shift_actions(xi)?;
        nf.set_part_from_series(i, &shifted.select(|_, j| j.order() < m));
        let high = shifted.select(|_, j| j.order() >= m);
        tail = tail.add(&high.scale(spec.scales.epsilons()[i]))?;
    }
    let pert = spec.perturbation.shift_actions(xi)?;
    let tail_constant = tail.majorant_norm(window.r, window.s)? / spec.scales.eps_pert();
    Ok(Expansion {
        nf,
        tail,
        pert,
        tail_constant,
    })
}

/// `majorant(pert, r, s) < c·ε`, strictly.
pub fn perturbation_gate<T: Real>(
    pert: &FourierTaylorSeries<T>,
    window: &DomainWindow<T>,
    scales: &ScaleSet<T>,
    c: T,
) -> bool {
    match pert.majorant_norm(window.r, window.s) {
        Ok(v) => v < c * scales.eps_pert(),
        Err(_) => false,
    }
}

/// Builds `Σ_l c_l I_l^2`-style quadratic parts quickly: `coeffs[l]·I_l^2`.
pub fn diagonal_quadratic<T: Real>(n: usize, coeffs: &[T]) -> FourierTaylorSeries<T> {
    let terms = coeffs.iter().enumerate().map(|(l, &c)| {
        let mut j = vec![0u32; n];
        j[l] = 2;
        (vec![0i64; n], j, Complex::new(c, T::zero()))
    });
    FourierTaylorSeries::from_terms(n, terms, true).expect("real k = 0 terms")
}

/// Mode `k` with `|k|` as a float, for divisor formulas.
pub fn mode_norm<T: Real>(k: &FourierMode) -> T {
    T::lit(k.norm() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    type S = FourierTaylorSeries<f64>;

    fn win() -> DomainWindow<f64> {
        DomainWindow::new(0.1, 0.5, 1e-3).unwrap()
    }

    #[test]
    fn scale_set_invariants() {
        let s = ScaleSet::new(vec![0.5, 0.01, 0.2], 3.0).unwrap();
        assert_eq!(s.eps_min(), 0.01);
        assert_eq!(s.eps_max(), 0.5);
        assert_eq!(s.eps_pert(), 3.0 * 0.01);
        assert_eq!(s.argmax(), 0);
        assert!(ScaleSet::new(vec![0.5, 0.0], 1.0).is_err());
        assert!(ScaleSet::new(vec![1.5], 1.0).is_err());
        assert!(ScaleSet::new(vec![0.5], -1.0).is_err());
        assert!(ScaleSet::<f64>::new(vec![], 1.0).is_err());
    }

    #[test]
    fn quadratic_shift_identity() {
        // H_1 = I₁², ξ = (1, 0): e = ε, ω = 2ε e₁, A₁₁ = 2ε
        let eps = 0.3;
        let scales = ScaleSet::new(vec![eps], 1.0).unwrap();
        let spec = HamiltonianSpec::new(vec![diagonal_quadratic(2, &[1.0, 0.0])], S::zero(2), scales, 4).unwrap();
        let ex = expand_at(&spec, &[1.0, 0.0], &win()).unwrap();
        assert_eq!(ex.nf.e(), eps);
        assert_eq!(ex.nf.omega(), vec![2.0 * eps, 0.0]);
        assert_eq!(ex.nf.a()[(0, 0)], 2.0 * eps);
        assert_eq!(ex.nf.a()[(1, 1)], 0.0);
        assert!(ex.tail.is_empty());
    }

    #[test]
    fn zero_base_point_keeps_coefficients() {
        let n = 2;
        let mut terms = vec![
            (vec![0, 0], vec![0, 0], Complex::new(0.25, 0.0)),
            (vec![0, 0], vec![1, 0], Complex::new(-1.5, 0.0)),
            (vec![0, 0], vec![1, 1], Complex::new(0.75, 0.0)),
            (vec![0, 0], vec![2, 1], Complex::new(2.0, 0.0)),
        ];
        terms.push((vec![0, 0], vec![4, 0], Complex::new(1.0, 0.0)));
        let part = S::from_terms(n, terms, true).unwrap();
        let scales = ScaleSet::new(vec![1.0], 1.0).unwrap();
        let spec = HamiltonianSpec::new(vec![part], S::zero(n), scales, 4).unwrap();
        let ex = expand_at(&spec, &[0.0, 0.0], &win()).unwrap();
        assert_eq!(ex.nf.e(), 0.25);
        assert_eq!(ex.nf.omega(), vec![-1.5, 0.0]);
        assert_eq!(ex.nf.a()[(0, 1)], 0.75);
        assert_eq!(ex.nf.h()[&MultiIndex(vec![2, 1])], 2.0);
        assert_eq!(ex.tail.coeff(&[0, 0], &[4, 0]).re, 1.0);
    }

    #[test]
    fn rejects_bad_specs() {
        let scales = ScaleSet::new(vec![0.5], 1.0).unwrap();
        let angle = S::cos_term(vec![1], vec![0], 1.0);
        assert!(matches!(
            HamiltonianSpec::new(vec![angle], S::zero(1), scales.clone(), 4),
            Err(ModelError::NonPolynomial(1))
        ));
        let spec = HamiltonianSpec::new(vec![diagonal_quadratic(1, &[1.0])], S::zero(1), scales, 4)
            .unwrap()
            .with_domain(vec![(0.0, 1.0)])
            .unwrap();
        assert!(matches!(
            expand_at(&spec, &[0.95], &win()),
            Err(ModelError::BoundaryTooClose { .. })
        ));
        assert!(expand_at(&spec, &[0.5], &win()).is_ok());
    }

    #[test]
    fn gate_is_strict() {
        let scales = ScaleSet::new(vec![0.5], 0.1).unwrap();
        assert!(perturbation_gate(&S::zero(1), &win(), &scales, 1.0));
        let c = 2.0;
        let p = S::constant(1, c * scales.eps_pert());
        assert!(!perturbation_gate(&p, &win(), &scales, c));
    }

    #[test]
    fn translate_moves_frequencies() {
        let scales = ScaleSet::new(vec![0.5, 0.25], 1.0).unwrap();
        let spec = HamiltonianSpec::new(
            vec![diagonal_quadratic(2, &[1.0, 0.0]), diagonal_quadratic(2, &[0.0, 1.0])],
            S::zero(2),
            scales,
            4,
        )
        .unwrap();
        let ex = expand_at(&spec, &[1.0, 2.0], &win()).unwrap();
        let moved = ex.nf.translate(&[0.5, -1.0]).unwrap();
        let direct = expand_at(&spec, &[1.5, 1.0], &win()).unwrap();
        assert_eq!(moved.omega(), direct.nf.omega());
        assert_eq!(moved.e(), direct.nf.e());
        assert_eq!(ex.nf.gradient_at(&[0.5, -1.0]), direct.nf.omega());
    }
}
