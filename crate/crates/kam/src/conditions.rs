//! Non-degeneracy checks (R), (K), (I) and the multi-scale eigenvalue bound.

use crate::model::{NormalForm, ScaleSet};
use crate::scalar::Real;
use crate::series::FourierTaylorSeries;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rank threshold for (R) used when the caller does not give one.
pub const DEFAULT_SVD_TOL: f64 = 1e-10;
/// Above this dimension the submatrix search is greedy.
pub const EXHAUSTIVE_LIMIT: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConditionError {
    #[error("empty sample grid")]
    EmptyGrid,
    #[error("frequency component {0} depends on the angles")]
    NonPolynomial(usize),
    #[error("n1 = {n1} out of range 1..={n}")]
    N1OutOfRange { n1: usize, n: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Witness {
    Submatrix { rows: Vec<usize>, cols: Vec<usize> },
    Sample { point: Vec<f64> },
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition_id: String,
    pub pass: bool,
    pub margin: f64,
    pub witness: Witness,
    pub threshold: f64,
}

impl ConditionReport {
    fn new(condition_id: &str, margin: f64, witness: Witness, threshold: f64) -> Self {
        ConditionReport {
            condition_id: condition_id.to_string(),
            pass: margin >= 1.0,
            margin,
            witness,
            threshold,
        }
    }
}

pub(crate) fn to_f64_matrix<T: Real>(m: &DMatrix<T>) -> DMatrix<f64> {
    m.map(|x| x.to_f64_lossy())
}

/// Singular values, descending, by one-sided Jacobi. Unlike bidiagonal
/// SVD this keeps small singular values of graded matrices (rows or
/// columns of wildly different size) to high relative accuracy.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    // Work on the orientation with at least as many rows as columns.
    let mut g = if m.nrows() >= m.ncols() { m.clone() } else { m.transpose() };
    let (rows, cols) = g.shape();
    let tol = rows as f64 * f64::EPSILON;
    for _sweep in 0..80 {
        let mut rotated = false;
        for i in 0..cols {
            for j in i + 1..cols {
                let alpha = g.column(i).norm_squared();
                let beta = g.column(j).norm_squared();
                let gamma = g.column(i).dot(&g.column(j));
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = c * t;
                for r in 0..rows {
                    let (a, b) = (g[(r, i)], g[(r, j)]);
                    g[(r, i)] = c * a - sn * b;
                    g[(r, j)] = sn * a + c * b;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut s: Vec<f64> = (0..cols).map(|c| g.column(c).norm()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

fn min_singular(m: &DMatrix<f64>) -> f64 {
    singular_values(m).last().copied().unwrap_or(0.0)
}

/// All multi-indices in `n` variables with `|α| ≤ order`, graded then lexicographic.
pub fn multi_indices(n: usize, order: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for d in 0..=order {
        let mut cur = vec![0u32; n];
        fill(&mut out, &mut cur, 0, d as u32);
    }
    out
}

fn fill(out: &mut Vec<Vec<u32>>, cur: &mut Vec<u32>, pos: usize, left: u32) {
    if pos + 1 == cur.len() {
        cur[pos] = left;
        out.push(cur.clone());
        cur[pos] = 0;
        return;
    }
    for v in (0..=left).rev() {
        cur[pos] = v;
        fill(out, cur, pos + 1, left - v);
    }
    cur[pos] = 0;
}

/// Columns `∂^α ω(ξ)` for `|α| ≤ order` at each grid point.
#[derive(Clone, Debug)]
pub struct DerivativeStack {
    pub base_points: Vec<Vec<f64>>,
    pub alphas: Vec<Vec<u32>>,
    pub matrices: Vec<DMatrix<f64>>,
    pub singular_values: Vec<Vec<f64>>,
}

/// Builds the derivative stack of a polynomial frequency field.
pub fn derivative_stack<T: Real>(
    field: &[FourierTaylorSeries<T>],
    grid: &[Vec<T>],
    order: usize,
) -> Result<DerivativeStack, ConditionError> {
    if grid.is_empty() {
        return Err(ConditionError::EmptyGrid);
    }
    let n = field.len();
    for (i, w) in field.iter().enumerate() {
        if w.terms().any(|(k, _, _)| !k.is_zero()) {
            return Err(ConditionError::NonPolynomial(i + 1));
        }
        if w.dim() != n {
            return Err(ConditionError::Dimension(format!("component {} has dimension {}", i + 1, w.dim())));
        }
    }
    let alphas = multi_indices(n, order);
    let derivs: Vec<Vec<FourierTaylorSeries<T>>> = alphas
        .iter()
        .map(|alpha| {
            field
                .iter()
                .map(|w| {
                    let mut d = w.clone();
                    for (l, &a) in alpha.iter().enumerate() {
                        for _ in 0..a {
                            d = d.d_action(l);
                        }
                    }
                    d
                })
                .collect()
        })
        .collect();
    let zeros = vec![T::zero(); n];
    let matrices: Vec<DMatrix<f64>> = grid
        .iter()
        .map(|xi| {
            DMatrix::from_fn(n, alphas.len(), |row, col| {
                derivs[col][row].eval_real(xi, &zeros).re.to_f64_lossy()
            })
        })
        .collect();
    let singular_values = matrices.par_iter().map(singular_values).collect();
    Ok(DerivativeStack {
        base_points: grid.iter().map(|p| p.iter().map(|x| x.to_f64_lossy()).collect()).collect(),
        alphas,
        matrices,
        singular_values,
    })
}

/// Frequency field `∂_I Σ ε_i H_i` of the integrable parts.
pub fn frequency_field<T: Real>(
    parts: &[FourierTaylorSeries<T>],
    scales: &ScaleSet<T>,
) -> Vec<FourierTaylorSeries<T>> {
    let n = parts.first().map_or(0, |p| p.dim());
    let mut h = FourierTaylorSeries::zero(n);
    for (p, &e) in parts.iter().zip(scales.epsilons()) {
        h = h.add(&p.scale(e)).expect("equal dimensions");
    }
    (0..n).map(|l| h.d_action(l)).collect()
}

/// Condition (R) at each grid point: the `n`-th singular value of the
/// stack must reach `svd_tol` (absolute). `order` defaults to `n − 1`.
pub fn check_r<T: Real>(
    field: &[FourierTaylorSeries<T>],
    grid: &[Vec<T>],
    svd_tol: Option<f64>,
    order: Option<usize>,
) -> Result<ConditionReport, ConditionError> {
    let n = field.len();
    let order = order.unwrap_or(n.saturating_sub(1));
    let stack = derivative_stack(field, grid, order)?;
    let tol = svd_tol.unwrap_or(DEFAULT_SVD_TOL);
    let mut worst = f64::INFINITY;
    let mut worst_point = 0;
    for (p, sv) in stack.singular_values.iter().enumerate() {
        let sn = sv.get(n - 1).copied().unwrap_or(0.0);
        let ratio = sn / tol;
        if ratio < worst {
            worst = ratio;
            worst_point = p;
        }
    }
    Ok(ConditionReport::new(
        "R",
        worst,
        Witness::Sample {
            point: stack.base_points[worst_point].clone(),
        },
        tol,
    ))
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

fn sub(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

/// Square `k×k` submatrix with the largest smallest singular value.
/// Ties keep the lexicographically first `(rows, cols)`.
pub fn best_submatrix(m: &DMatrix<f64>, k: usize) -> (f64, Vec<usize>, Vec<usize>) {
    let n = m.nrows().max(m.ncols());
    if n <= EXHAUSTIVE_LIMIT + 1 {
        let rows = combinations(m.nrows(), k);
        let cols = combinations(m.ncols(), k);
        let scored: Vec<(f64, usize, usize)> = rows
            .par_iter()
            .enumerate()
            .map(|(ri, r)| {
                let mut best = (f64::NEG_INFINITY, ri, 0);
                for (ci, c) in cols.iter().enumerate() {
                    let s = min_singular(&sub(m, r, c));
                    if s > best.0 {
                        best = (s, ri, ci);
                    }
                }
                best
            })
            .collect();
        let mut best = scored[0];
        for &cand in &scored[1..] {
            if cand.0 > best.0 {
                best = cand;
            }
        }
        (best.0, rows[best.1].clone(), cols[best.2].clone())
    } else {
        let cols = greedy_pivots(m, k);
        let picked = DMatrix::from_fn(m.nrows(), k, |i, j| m[(i, cols[j])]);
        let mut rows = greedy_pivots(&picked.transpose(), k);
        rows.sort_unstable();
        let mut cols = cols;
        cols.sort_unstable();
        (min_singular(&sub(m, &rows, &cols)), rows, cols)
    }
}

/// Column-pivoted Gram-Schmidt: indices of `k` columns chosen greedily by residual norm.
pub fn greedy_pivots(m: &DMatrix<f64>, k: usize) -> Vec<usize> {
    let mut work = m.clone();
    let mut chosen = Vec::with_capacity(k);
    for _ in 0..k.min(m.ncols()) {
        let mut best = None;
        let mut best_norm = -1.0;
        for c in 0..work.ncols() {
            if chosen.contains(&c) {
                continue;
            }
            let nrm = work.column(c).norm();
            if nrm > best_norm {
                best_norm = nrm;
                best = Some(c);
            }
        }
        let Some(p) = best else { break };
        chosen.push(p);
        if best_norm > 0.0 {
            let q = work.column(p) / best_norm;
            for c in 0..work.ncols() {
                let proj = q.dot(&work.column(c));
                let upd = work.column(c) - &q * proj;
                work.set_column(c, &upd);
            }
        }
    }
    chosen
}

fn submatrix_report(id: &str, m: &DMatrix<f64>, k: usize, c: f64, eps_min: f64) -> ConditionReport {
    let (s, rows, cols) = best_submatrix(m, k);
    let thr = c.sqrt() * eps_min;
    let margin = if thr > 0.0 { s / thr } else { f64::INFINITY };
    ConditionReport::new(id, margin, Witness::Submatrix { rows, cols }, c * eps_min * eps_min)
}

/// Condition (K): some `n1×n1` submatrix of `A` with `σ_min ≥ √c·ε̃`.
pub fn check_k<T: Real>(nf: &NormalForm<T>, n1: usize, c: f64) -> Result<ConditionReport, ConditionError> {
    let n = nf.n();
    if n1 < 1 || n1 > n {
        return Err(ConditionError::N1OutOfRange { n1, n });
    }
    let a = to_f64_matrix(&nf.a());
    Ok(submatrix_report("K", &a, n1, c, nf.scales.eps_min().to_f64_lossy()))
}

/// `((A, ωᵀ), (ω, 0))` with `ω` evaluated at the given action offset.
pub fn bordered_matrix<T: Real>(nf: &NormalForm<T>, actions: &[T]) -> DMatrix<f64> {
    let n = nf.n();
    let a = to_f64_matrix(&nf.a());
    let w = nf.gradient_at(actions);
    let mut b = DMatrix::zeros(n + 1, n + 1);
    for i in 0..n {
        for j in 0..n {
            b[(i, j)] = a[(i, j)];
        }
        b[(i, n)] = w[i].to_f64_lossy();
        b[(n, i)] = w[i].to_f64_lossy();
    }
    b
}

/// Condition (I) on the bordered matrix at the base point.
pub fn check_i<T: Real>(nf: &NormalForm<T>, n1: usize, c: f64) -> Result<ConditionReport, ConditionError> {
    let n = nf.n();
    if n1 < 1 || n1 > n {
        return Err(ConditionError::N1OutOfRange { n1, n });
    }
    let b = bordered_matrix(nf, &vec![T::zero(); n]);
    Ok(submatrix_report("I", &b, n1 + 1, c, nf.scales.eps_min().to_f64_lossy()))
}

/// Outcome of the eigenvalue lemma check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenBound {
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Constant from the construction, clamped at zero.
    pub c: f64,
    /// `c·ε̃²`, the bound the construction actually yields.
    pub bound: f64,
    /// `c·ε̃`, the bound as stated.
    pub bound_linear: f64,
    pub pass: bool,
    pub pass_linear: bool,
}

/// Relative size below which `λ_min` counts as a kernel.
pub const KERNEL_TOL: f64 = 1e-12;

/// `λ_min(AA*)` for `A = Σ ε_k A_k`, compared with `c·ε̃²` (and `c·ε̃`).
pub fn eigen_lower_bound<T: Real>(
    parts: &[DMatrix<T>],
    scales: &ScaleSet<T>,
) -> Result<EigenBound, ConditionError> {
    if parts.len() != scales.len() {
        return Err(ConditionError::Dimension(format!(
            "{} parts for {} scales",
            parts.len(),
            scales.len()
        )));
    }
    let n = parts.first().map_or(0, |p| p.nrows());
    if parts.iter().any(|p| p.nrows() != n || p.ncols() != n) {
        return Err(ConditionError::Dimension("parts must be square of equal size".into()));
    }
    let mut a = DMatrix::<f64>::zeros(n, n);
    for (p, &e) in parts.iter().zip(scales.epsilons()) {
        a += to_f64_matrix(p) * e.to_f64_lossy();
    }
    let aat = &a * a.transpose();
    // σ² from the Jacobi SVD keeps the small eigenvalues of graded sums.
    let sv = singular_values(&a);
    let lambda_min = sv.last().map_or(0.0, |s| s * s);
    let lambda_max = sv.first().map_or(0.0, |s| s * s);
    let emax = scales.eps_max().to_f64_lossy();
    let emin = scales.eps_min().to_f64_lossy();
    let p_eps = &aat - DMatrix::<f64>::identity(n, n) * (emax * emax);
    let c = ((emax * emax - p_eps.norm()) / (emin * emin)).max(0.0);
    let bound = c * emin * emin;
    let bound_linear = c * emin;
    let kernel = lambda_min <= KERNEL_TOL * lambda_max.max(0.0);
    Ok(EigenBound {
        lambda_min,
        lambda_max,
        c,
        bound,
        bound_linear,
        pass: !kernel && lambda_min > bound,
        pass_linear: !kernel && lambda_min > bound_linear,
    })
}

/// `det A` of the combined Hessian.
pub fn hessian_determinant<T: Real>(nf: &NormalForm<T>) -> f64 {
    to_f64_matrix(&nf.a()).determinant()
}

/// `det((A, ωᵀ), (ω, 0))` with `ω = ∇N(I0)`.
pub fn bordered_determinant<T: Real>(nf: &NormalForm<T>, i0: &[T]) -> f64 {
    bordered_matrix(nf, i0).determinant()
}
