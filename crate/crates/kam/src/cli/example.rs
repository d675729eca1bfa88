//! The six-scale co-orbital example: `H = Σ ε_i I_i²` with scales
//! `(1, ε², ε^a, ε³, ε^{a+1}, ε⁴)` and a small angle-dependent perturbation.

use crate::model::{HamiltonianSpec, ModelError, ScaleSet};
use crate::series::FourierTaylorSeries;
use num_complex::Complex;

pub const EXAMPLE_N: usize = 6;

/// Scale vector `(1, ε², ε^a, ε³, ε^{a+1}, ε⁴)`.
pub fn coorbital_scales(epsilon: f64, a: f64) -> Vec<f64> {
    vec![
        1.0,
        epsilon.powi(2),
        epsilon.powf(a),
        epsilon.powi(3),
        epsilon.powf(a + 1.0),
        epsilon.powi(4),
    ]
}

/// `ε^{a+2}`, the size of the perturbation.
pub fn perturbation_size(epsilon: f64, a: f64) -> f64 {
    epsilon.powf(a + 2.0)
}

/// Knobs of the example perturbation, all in units of `ε^{a+2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoorbitalParams {
    pub epsilon: f64,
    pub a: f64,
    /// Weight of `cos(θ₁+θ₂)`.
    pub amplitude: f64,
    /// `drift[l]·I_l`, empty for none.
    pub drift: Vec<f64>,
    /// Weight of `(I₆ − 1)^m`. Around a base point with `ξ₆ = 1` this is a
    /// pure degree-`m` term that no step removes, so the measured error
    /// shrinks with the window like `η^m`. Powers of two shift exactly.
    pub tail: f64,
    pub m_taylor: u32,
}

/// Builds the example. `override_pert` replaces the cosine when given.
pub fn example_coorbital(
    params: &CoorbitalParams,
    override_pert: Option<FourierTaylorSeries<f64>>,
) -> Result<HamiltonianSpec<f64>, ModelError> {
    let CoorbitalParams { epsilon, a, amplitude, ref drift, tail, m_taylor } = *params;
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(ModelError::Dimension(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    if !(a > 2.0) || !a.is_finite() {
        return Err(ModelError::Dimension(format!("a must be > 2, got {a}")));
    }
    if !drift.is_empty() && drift.len() != EXAMPLE_N {
        return Err(ModelError::Dimension(format!("drift needs {EXAMPLE_N} entries, got {}", drift.len())));
    }
    let n = EXAMPLE_N;
    let eps = coorbital_scales(epsilon, a);
    let emin = eps.iter().copied().fold(f64::INFINITY, f64::min);
    let unit = perturbation_size(epsilon, a);
    let scales = ScaleSet::new(eps, unit / emin)?;
    let parts = (0..n)
        .map(|l| {
            let mut c = vec![0.0; n];
            c[l] = 1.0;
            crate::model::diagonal_quadratic(n, &c)
        })
        .collect();
    let mut pert = match override_pert {
        Some(p) => p,
        None => {
            let mut k = vec![0i64; n];
            k[0] = 1;
            k[1] = 1;
            FourierTaylorSeries::cos_term(k, vec![0; n], amplitude)
        }
    };
    for (l, &d) in drift.iter().enumerate() {
        if d != 0.0 {
            let mut j = vec![0u32; n];
            j[l] = 1;
            pert = pert.add(&FourierTaylorSeries::monomial(vec![0; n], j, Complex::new(d, 0.0)))?;
        }
    }
    if tail != 0.0 {
        let mut j = vec![0u32; n];
        j[n - 1] = m_taylor;
        let mut centre = vec![0.0; n];
        centre[n - 1] = -1.0;
        let t = FourierTaylorSeries::monomial(vec![0; n], j, Complex::new(tail, 0.0)).shift_actions(&centre)?;
        pert = pert.add(&t)?;
    }
    HamiltonianSpec::new(parts, pert, scales, m_taylor)
}
