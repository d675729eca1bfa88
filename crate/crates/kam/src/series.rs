//! Sparse Fourier-Taylor series over `n` actions `I` and `n` angles `θ`.
//!
//! A term is `c · I^j · e^{i⟨k,θ⟩}`. Coefficients live in a `BTreeMap` keyed by
//! `(k, j)`, so iteration order (and therefore rounding) is deterministic.

use crate::scalar::Real;
use num_complex::Complex;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

/// Default relative floor for the canonical sparse form.
pub const DEFAULT_FLOOR: f64 = 1e-15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SeriesError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("majorant overflow at k = {k:?}, j = {j:?}")]
    Overflow { k: Vec<i64>, j: Vec<u32> },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("reality violated at k = {k:?}, j = {j:?}")]
    RealityViolation { k: Vec<i64>, j: Vec<u32> },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Taylor multi-index `j` (non-negative exponents).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub struct MultiIndex(pub Vec<u32>);

impl MultiIndex {
    pub fn zero(n: usize) -> Self {
        MultiIndex(vec![0; n])
    }

    pub fn unit(n: usize, l: usize) -> Self {
        let mut v = vec![0; n];
        v[l] = 1;
        MultiIndex(v)
    }

    /// `|j|`, the entry sum.
    pub fn order(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn entries(&self) -> &[u32] {
        &self.0
    }

    pub fn add(&self, other: &MultiIndex) -> MultiIndex {
        MultiIndex(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }
}

/// Fourier mode `k`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub struct FourierMode(pub Vec<i64>);

impl FourierMode {
    pub fn zero(n: usize) -> Self {
        FourierMode(vec![0; n])
    }

    /// `|k| = Σ|k_i|`.
    pub fn norm(&self) -> u64 {
        self.0.iter().map(|k| k.unsigned_abs()).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&k| k == 0)
    }

    pub fn entries(&self) -> &[i64] {
        &self.0
    }

    pub fn neg(&self) -> FourierMode {
        FourierMode(self.0.iter().map(|k| -k).collect())
    }

    pub fn add(&self, other: &FourierMode) -> FourierMode {
        FourierMode(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn dot<T: Real>(&self, v: &[T]) -> T {
        self.0
            .iter()
            .zip(v)
            .fold(T::zero(), |acc, (&k, &x)| acc + T::lit(k as f64) * x)
    }
}

/// Action radius `r`, angle strip `s` and parameter width `h`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainWindow<T> {
    pub r: T,
    pub s: T,
    pub h: T,
}

impl<T: Real> DomainWindow<T> {
    pub fn new(r: T, s: T, h: T) -> Result<Self, SeriesError> {
        if !(r > T::zero() && s > T::zero() && h > T::zero()) {
            return Err(SeriesError::InvalidArgument(format!(
                "window must be strictly positive, got r = {r}, s = {s}, h = {h}"
            )));
        }
        Ok(DomainWindow { r, s, h })
    }
}

pub type Key = (FourierMode, MultiIndex);

#[derive(Clone, Debug)]
pub struct FourierTaylorSeries<T: Real> {
    dim: usize,
    coeffs: BTreeMap<Key, Complex<T>>,
    /// Per-coefficient sum of absolute contributions, a proxy for its rounding scale.
    mags: BTreeMap<Key, T>,
    taylor_cutoff: Option<u32>,
    fourier_cutoff: Option<u32>,
    real: bool,
    floor: T,
}

impl<T: Real> PartialEq for FourierTaylorSeries<T> {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.real == other.real
            && self.taylor_cutoff == other.taylor_cutoff
            && self.fourier_cutoff == other.fourier_cutoff
            && self.coeffs == other.coeffs
    }
}

fn tighter(a: Option<u32>, b: Option<u32>) -> Option<u32> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

/// Collects contributions with their absolute sizes, so a coefficient that
/// is pure cancellation residue can be told apart from a genuinely small one.
struct Acc<T: Real> {
    map: BTreeMap<Key, (Complex<T>, T)>,
}

impl<T: Real> Acc<T> {
    fn new() -> Self {
        Acc { map: BTreeMap::new() }
    }

    fn push(&mut self, key: Key, c: Complex<T>, mag: T) {
        let slot = self
            .map
            .entry(key)
            .or_insert_with(|| (Complex::new(T::zero(), T::zero()), T::zero()));
        slot.0 = slot.0 + c;
        slot.1 = slot.1 + mag;
    }

    fn push_plain(&mut self, key: Key, c: Complex<T>) {
        let m = c.norm();
        self.push(key, c, m);
    }
}

impl<T: Real> FourierTaylorSeries<T> {
    pub fn zero(dim: usize) -> Self {
        FourierTaylorSeries {
            dim,
            coeffs: BTreeMap::new(),
            mags: BTreeMap::new(),
            taylor_cutoff: None,
            fourier_cutoff: None,
            real: true,
            floor: T::lit(DEFAULT_FLOOR),
        }
    }

    /// Builds a series from raw terms. When `real` is set the terms must
    /// already satisfy `c(-k, j) = conj c(k, j)` up to rounding.
    pub fn from_terms<I>(dim: usize, terms: I, real: bool) -> Result<Self, SeriesError>
    where
        I: IntoIterator<Item = (Vec<i64>, Vec<u32>, Complex<T>)>,
    {
        let mut acc = Acc::new();
        for (k, j, c) in terms {
            if k.len() != dim || j.len() != dim {
                return Err(SeriesError::DimensionMismatch {
                    left: dim,
                    right: k.len().max(j.len()),
                });
            }
            acc.push_plain((FourierMode(k), MultiIndex(j)), c);
        }
        let mut base = Self::zero(dim);
        base.real = real;
        if real {
            let top = acc.map.values().fold(T::zero(), |m, v| m.max(v.0.norm()));
            let tol = T::lit(1e-12) * top;
            for ((k, j), (c, _)) in &acc.map {
                let partner = acc
                    .map
                    .get(&(k.neg(), j.clone()))
                    .map(|p| p.0)
                    .unwrap_or_else(|| Complex::new(T::zero(), T::zero()));
                if (*c - partner.conj()).norm() > tol {
                    return Err(SeriesError::RealityViolation {
                        k: k.0.clone(),
                        j: j.0.clone(),
                    });
                }
            }
        }
        Ok(base.finish(acc))
    }

    pub fn constant(dim: usize, c: T) -> Self {
        Self::zero(dim).with_term(FourierMode::zero(dim), MultiIndex::zero(dim), Complex::new(c, T::zero()))
    }

    /// The action variable `I_l`.
    pub fn action(dim: usize, l: usize) -> Self {
        Self::zero(dim).with_term(FourierMode::zero(dim), MultiIndex::unit(dim, l), Complex::new(T::one(), T::zero()))
    }

    /// A single complex term; the result is not flagged real unless `k = 0`
    /// and `c` is real.
    pub fn monomial(k: Vec<i64>, j: Vec<u32>, c: Complex<T>) -> Self {
        let dim = k.len();
        let mut s = Self::zero(dim);
        s.real = k.iter().all(|&x| x == 0) && c.im == T::zero();
        s.with_term(FourierMode(k), MultiIndex(j), c)
    }

    /// `amp · I^j · cos⟨k,θ⟩`, a real series.
    pub fn cos_term(k: Vec<i64>, j: Vec<u32>, amp: T) -> Self {
        let dim = k.len();
        let fk = FourierMode(k);
        if fk.is_zero() {
            return Self::zero(dim).with_term(fk, MultiIndex(j), Complex::new(amp, T::zero()));
        }
        let half = Complex::new(amp / T::lit(2.0), T::zero());
        let mut acc = Acc::new();
        acc.push_plain((fk.neg(), MultiIndex(j.clone())), half);
        acc.push_plain((fk, MultiIndex(j)), half);
        Self::zero(dim).finish(acc)
    }

    fn with_term(mut self, k: FourierMode, j: MultiIndex, c: Complex<T>) -> Self {
        let mut acc = self.drain();
        acc.push_plain((k, j), c);
        self.finish(acc)
    }

    pub fn with_taylor_cutoff(mut self, m: Option<u32>) -> Self {
        self.taylor_cutoff = m;
        let acc = self.drain();
        self.finish(acc)
    }

    pub fn with_fourier_cutoff(mut self, k: Option<u32>) -> Self {
        self.fourier_cutoff = k;
        let acc = self.drain();
        self.finish(acc)
    }

    /// Sets the relative floor of the canonical form.
    pub fn with_floor(mut self, floor: T) -> Self {
        self.floor = floor;
        let acc = self.drain();
        self.finish(acc)
    }

    /// Marks the series as real-valued and projects onto the conjugate-symmetric part.
    pub fn with_reality(mut self, real: bool) -> Self {
        self.real = real;
        let acc = self.drain();
        self.finish(acc)
    }

    fn drain(&mut self) -> Acc<T> {
        let mut acc = Acc::new();
        let mags = std::mem::take(&mut self.mags);
        for (key, v) in std::mem::take(&mut self.coeffs) {
            let m = mags.get(&key).copied().unwrap_or_else(|| v.norm());
            acc.push(key, v, m);
        }
        acc
    }

    /// An empty series with the same metadata.
    fn shell(&self) -> Self {
        FourierTaylorSeries {
            dim: self.dim,
            coeffs: BTreeMap::new(),
            mags: BTreeMap::new(),
            taylor_cutoff: self.taylor_cutoff,
            fourier_cutoff: self.fourier_cutoff,
            real: self.real,
            floor: self.floor,
        }
    }

    fn admits(&self, key: &Key) -> bool {
        self.taylor_cutoff.is_none_or(|m| key.1.order() <= m)
            && self.fourier_cutoff.is_none_or(|k| key.0.norm() <= k as u64)
    }

    fn mag(&self, key: &Key) -> T {
        self.mags.get(key).copied().unwrap_or(T::zero())
    }

    /// Applies cutoffs, the reality projection and the relative floor: a
    /// coefficient is dropped when it is below `floor` times its own
    /// pre-cancellation magnitude, i.e. when it is rounding residue, or
    /// when it has underflowed into the subnormal range.
    fn finish(mut self, acc: Acc<T>) -> Self {
        let mut map: BTreeMap<Key, (Complex<T>, T)> =
            acc.map.into_iter().filter(|(key, _)| self.admits(key)).collect();
        if self.real {
            let zero = Complex::new(T::zero(), T::zero());
            let two = T::lit(2.0);
            let keys: Vec<Key> = map.keys().cloned().collect();
            let mut out = BTreeMap::new();
            for key in keys {
                if out.contains_key(&key) {
                    continue;
                }
                let mirror = (key.0.neg(), key.1.clone());
                let (c, mc) = map.get(&key).copied().unwrap_or((zero, T::zero()));
                if mirror == key {
                    out.insert(key, (Complex::new(c.re, T::zero()), mc));
                    continue;
                }
                let (d, md) = map.get(&mirror).copied().unwrap_or((zero, T::zero()));
                let sym = if c == d.conj() { c } else { (c + d.conj()) / two };
                let m = mc.max(md);
                out.insert(mirror, (sym.conj(), m));
                out.insert(key, (sym, m));
            }
            map = out;
        }
        self.coeffs.clear();
        self.mags.clear();
        for (key, (c, m)) in map {
            let a = c.norm();
            if a < T::min_positive_value() || a < self.floor * m {
                continue;
            }
            self.mags.insert(key.clone(), m.max(a));
            self.coeffs.insert(key, c);
        }
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_real(&self) -> bool {
        self.real
    }

    pub fn taylor_cutoff(&self) -> Option<u32> {
        self.taylor_cutoff
    }

    pub fn fourier_cutoff(&self) -> Option<u32> {
        self.fourier_cutoff
    }

    pub fn floor(&self) -> T {
        self.floor
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&FourierMode, &MultiIndex, &Complex<T>)> {
        self.coeffs.iter().map(|((k, j), c)| (k, j, c))
    }

    pub fn coeff(&self, k: &[i64], j: &[u32]) -> Complex<T> {
        self.coeffs
            .get(&(FourierMode(k.to_vec()), MultiIndex(j.to_vec())))
            .copied()
            .unwrap_or_else(|| Complex::new(T::zero(), T::zero()))
    }

    /// Largest `|j|` present, or `None` for the empty series.
    pub fn taylor_degree(&self) -> Option<u32> {
        self.coeffs.keys().map(|(_, j)| j.order()).max()
    }

    pub fn max_fourier_order(&self) -> Option<u64> {
        self.coeffs.keys().map(|(k, _)| k.norm()).max()
    }

    pub fn max_abs(&self) -> T {
        self.coeffs.values().fold(T::zero(), |m, c| m.max(c.norm()))
    }

    /// Distinct nonzero Fourier modes present.
    pub fn modes(&self) -> Vec<FourierMode> {
        let mut v: Vec<FourierMode> = self
            .coeffs
            .keys()
            .map(|(k, _)| k.clone())
            .filter(|k| !k.is_zero())
            .collect();
        v.dedup();
        v
    }

    fn check_dim(&self, other: &Self) -> Result<(), SeriesError> {
        if self.dim != other.dim {
            return Err(SeriesError::DimensionMismatch {
                left: self.dim,
                right: other.dim,
            });
        }
        Ok(())
    }

    fn combined_shell(&self, other: &Self) -> Self {
        FourierTaylorSeries {
            dim: self.dim,
            coeffs: BTreeMap::new(),
            mags: BTreeMap::new(),
            taylor_cutoff: tighter(self.taylor_cutoff, other.taylor_cutoff),
            fourier_cutoff: tighter(self.fourier_cutoff, other.fourier_cutoff),
            real: self.real && other.real,
            floor: self.floor,
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self, SeriesError> {
        self.check_dim(other)?;
        let mut acc = Acc::new();
        for src in [self, other] {
            for (key, c) in &src.coeffs {
                acc.push(key.clone(), *c, src.mag(key));
            }
        }
        Ok(self.combined_shell(other).finish(acc))
    }

    pub fn sub(&self, other: &Self) -> Result<Self, SeriesError> {
        self.add(&other.neg())
    }

    pub fn neg(&self) -> Self {
        let mut out = self.clone();
        for c in out.coeffs.values_mut() {
            *c = -*c;
        }
        out
    }

    /// Multiplies by a real factor.
    pub fn scale(&self, a: T) -> Self {
        let mut acc = Acc::new();
        for (key, c) in &self.coeffs {
            acc.push(key.clone(), *c * a, self.mag(key) * a.abs());
        }
        self.shell().finish(acc)
    }

    /// Multiplies by a complex factor; drops the reality flag unless the factor is real.
    pub fn scale_complex(&self, a: Complex<T>) -> Self {
        let mut acc = Acc::new();
        for (key, c) in &self.coeffs {
            acc.push(key.clone(), *c * a, self.mag(key) * a.norm());
        }
        let mut shell = self.shell();
        shell.real = self.real && a.im == T::zero();
        shell.finish(acc)
    }

    pub fn mul(&self, other: &Self) -> Result<Self, SeriesError> {
        self.check_dim(other)?;
        let shell = self.combined_shell(other);
        let mut acc = Acc::new();
        for (ka_key, ca) in &self.coeffs {
            let ma = self.mag(ka_key);
            for (kb_key, cb) in &other.coeffs {
                let key = (ka_key.0.add(&kb_key.0), ka_key.1.add(&kb_key.1));
                if shell.admits(&key) {
                    acc.push(key, *ca * *cb, ma * other.mag(kb_key));
                }
            }
        }
        Ok(shell.finish(acc))
    }

    /// `{f, g} = ∂f/∂θ·∂g/∂I − ∂f/∂I·∂g/∂θ`.
    pub fn poisson(&self, other: &Self) -> Result<Self, SeriesError> {
        self.check_dim(other)?;
        let shell = self.combined_shell(other);
        let n = self.dim;
        let mut acc = Acc::new();
        for (a_key, ca) in &self.coeffs {
            let (ka, ja) = a_key;
            let ma = self.mag(a_key);
            for (b_key, cb) in &other.coeffs {
                let (kb, jb) = b_key;
                let k = ka.add(kb);
                let prod = *ca * *cb;
                let mprod = ma * other.mag(b_key);
                for l in 0..n {
                    let w = ka.0[l] * jb.0[l] as i64 - ja.0[l] as i64 * kb.0[l];
                    if w == 0 {
                        continue;
                    }
                    let mut j = ja.add(jb);
                    j.0[l] -= 1;
                    let key = (k.clone(), j);
                    if shell.admits(&key) {
                        let wt = T::lit(w as f64);
                        acc.push(key, prod * Complex::new(T::zero(), wt), mprod * wt.abs());
                    }
                }
            }
        }
        Ok(shell.finish(acc))
    }

    /// `∂/∂I_l`.
    pub fn d_action(&self, l: usize) -> Self {
        let mut acc = Acc::new();
        for (key, c) in &self.coeffs {
            let e = key.1 .0[l];
            if e == 0 {
                continue;
            }
            let mut jj = key.1.clone();
            jj.0[l] -= 1;
            let f = T::lit(e as f64);
            acc.push((key.0.clone(), jj), *c * f, self.mag(key) * f);
        }
        self.shell().finish(acc)
    }

    /// `∂/∂θ_l`.
    pub fn d_angle(&self, l: usize) -> Self {
        let mut acc = Acc::new();
        for (key, c) in &self.coeffs {
            let kl = key.0 .0[l];
            if kl == 0 {
                continue;
            }
            let f = T::lit(kl as f64);
            acc.push(key.clone(), *c * Complex::new(T::zero(), f), self.mag(key) * f.abs());
        }
        self.shell().finish(acc)
    }

    /// Splits into `(q, r)`: `q` keeps `|j| ≤ m−1`, `r` further keeps `|k| ≤ K`.
    pub fn truncate(&self, big_k: u32, m: u32) -> Result<(Self, Self), SeriesError> {
        if big_k < 1 || m < 3 {
            return Err(SeriesError::InvalidArgument(format!(
                "truncate needs K >= 1 and m >= 3, got K = {big_k}, m = {m}"
            )));
        }
        let q = self.select(|_, j| j.order() < m);
        let r = q.select(|k, _| k.norm() <= big_k as u64);
        Ok((q, r))
    }

    /// Keeps the terms accepted by `keep`, preserving metadata.
    pub fn select<F: Fn(&FourierMode, &MultiIndex) -> bool>(&self, keep: F) -> Self {
        let mut out = self.shell();
        for (key, c) in &self.coeffs {
            if keep(&key.0, &key.1) {
                out.coeffs.insert(key.clone(), *c);
                out.mags.insert(key.clone(), self.mag(key));
            }
        }
        out
    }

    /// `[R]`: the `k = 0` part.
    pub fn average(&self) -> Self {
        self.select(|k, _| k.is_zero())
    }

    /// Terms of Taylor degree exactly `d`.
    pub fn degree_part(&self, d: u32) -> Self {
        self.select(|_, j| j.order() == d)
    }

    /// `Σ |c_{kj}| r^{|j|} e^{|k| s}`.
    pub fn majorant_norm(&self, r: T, s: T) -> Result<T, SeriesError> {
        let mut total = T::zero();
        for ((k, j), c) in &self.coeffs {
            let term = c.norm() * r.powi(j.order() as i32) * (T::lit(k.norm() as f64) * s).exp();
            if !term.is_finite() {
                return Err(SeriesError::Overflow {
                    k: k.0.clone(),
                    j: j.0.clone(),
                });
            }
            total = total + term;
        }
        if !total.is_finite() {
            return Err(SeriesError::Overflow {
                k: Vec::new(),
                j: Vec::new(),
            });
        }
        Ok(total)
    }

    /// Drops terms whose majorant weight on `(r, s)` is below `threshold`.
    /// Returns the kept series and the total dropped weight.
    pub fn trim_on_window(&self, r: T, s: T, threshold: T) -> (Self, T) {
        let mut out = self.shell();
        let mut dropped = T::zero();
        for (key, c) in &self.coeffs {
            let w = c.norm() * r.powi(key.1.order() as i32) * (T::lit(key.0.norm() as f64) * s).exp();
            if w < threshold {
                dropped = dropped + w;
            } else {
                out.coeffs.insert(key.clone(), *c);
                out.mags.insert(key.clone(), self.mag(key));
            }
        }
        (out, dropped)
    }

    /// Evaluates at complex actions and angles.
    pub fn eval(&self, actions: &[Complex<T>], angles: &[Complex<T>]) -> Complex<T> {
        let i = Complex::new(T::zero(), T::one());
        let mut sum = Complex::new(T::zero(), T::zero());
        for ((k, j), c) in &self.coeffs {
            let mut phase = Complex::new(T::zero(), T::zero());
            let mut mono = Complex::new(T::one(), T::zero());
            for l in 0..self.dim {
                phase = phase + angles[l] * T::lit(k.0[l] as f64);
                mono = mono * actions[l].powu(j.0[l]);
            }
            sum = sum + *c * mono * (i * phase).exp();
        }
        sum
    }

    /// Evaluates at real `(I, θ)`.
    pub fn eval_real(&self, actions: &[T], angles: &[T]) -> Complex<T> {
        let a: Vec<Complex<T>> = actions.iter().map(|&x| Complex::new(x, T::zero())).collect();
        let b: Vec<Complex<T>> = angles.iter().map(|&x| Complex::new(x, T::zero())).collect();
        self.eval(&a, &b)
    }

    /// Exact Taylor recentering `I ↦ xi + I`.
    pub fn shift_actions(&self, xi: &[T]) -> Result<Self, SeriesError> {
        if xi.len() != self.dim {
            return Err(SeriesError::DimensionMismatch {
                left: self.dim,
                right: xi.len(),
            });
        }
        let mut acc = Acc::new();
        for (key, c) in &self.coeffs {
            let (k, j) = key;
            let m = self.mag(key);
            let mut t = vec![0u32; self.dim];
            loop {
                let mut w = T::one();
                for l in 0..self.dim {
                    w = w * binomial::<T>(j.0[l], t[l]) * xi[l].powi((j.0[l] - t[l]) as i32);
                }
                acc.push((k.clone(), MultiIndex(t.clone())), *c * w, m * w.abs());
                let mut l = 0;
                while l < self.dim {
                    if t[l] < j.0[l] {
                        t[l] += 1;
                        break;
                    }
                    t[l] = 0;
                    l += 1;
                }
                if l == self.dim {
                    break;
                }
            }
        }
        Ok(self.shell().finish(acc))
    }

    /// `ad_F^ℓ(h)` for ℓ = 0..=order, with `ad_F(g) = {g, F}`.
    pub fn lie_brackets(&self, f: &Self, order: usize) -> Result<Vec<Self>, SeriesError> {
        self.check_dim(f)?;
        let mut out = Vec::with_capacity(order + 1);
        out.push(self.clone());
        for _ in 0..order {
            let next = out.last().unwrap().poisson(f)?.with_limits_of(self);
            out.push(next);
        }
        Ok(out)
    }

    fn with_limits_of(mut self, other: &Self) -> Self {
        self.taylor_cutoff = other.taylor_cutoff;
        self.fourier_cutoff = other.fourier_cutoff;
        let acc = self.drain();
        self.finish(acc)
    }

    /// Lie series `Σ_{ℓ=0}^{L} ad_F^ℓ(h)/ℓ!`, truncated to `h`'s cutoffs.
    pub fn lie_transform(&self, f: &Self, order: usize) -> Result<Self, SeriesError> {
        Ok(self.lie_transform_with_remainder(f, order)?.0)
    }

    /// Lie series plus the first dropped term `ad_F^{L+1}(h)/(L+1)!`.
    pub fn lie_transform_with_remainder(&self, f: &Self, order: usize) -> Result<(Self, Self), SeriesError> {
        if order < 1 {
            return Err(SeriesError::InvalidArgument("Lie order must be >= 1".into()));
        }
        let brackets = self.lie_brackets(f, order + 1)?;
        let mut sum = self.shell();
        let mut fact = T::one();
        for (l, b) in brackets.iter().take(order + 1).enumerate() {
            if l > 0 {
                fact = fact * T::lit(l as f64);
            }
            sum = sum.add(&b.scale(T::one() / fact))?;
        }
        let rem = brackets[order + 1].scale(T::one() / (fact * T::lit((order + 1) as f64)));
        Ok((sum.with_limits_of(self), rem))
    }

    /// One line per coefficient: `k_1 … k_n | j_1 … j_n | re im`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for ((k, j), c) in &self.coeffs {
            let ks: Vec<String> = k.0.iter().map(|x| x.to_string()).collect();
            let js: Vec<String> = j.0.iter().map(|x| x.to_string()).collect();
            let _ = writeln!(s, "{} | {} | {:e} {:e}", ks.join(" "), js.join(" "), c.re, c.im);
        }
        s
    }

    /// Parses the line format. Blank lines and `#` comments are skipped.
    pub fn from_text(text: &str, dim: usize, real: bool) -> Result<Self, SeriesError> {
        let mut terms = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let perr = |msg: String| SeriesError::Parse { line: no + 1, msg };
            let parts: Vec<&str> = line.split('|').collect();
            if parts.len() != 3 {
                return Err(perr("expected `k… | j… | re im`".into()));
            }
            let k = parts[0]
                .split_whitespace()
                .map(|x| x.parse::<i64>().map_err(|e| perr(format!("bad mode entry `{x}`: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            let j = parts[1]
                .split_whitespace()
                .map(|x| x.parse::<u32>().map_err(|e| perr(format!("bad exponent `{x}`: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            let c: Vec<T> = parts[2]
                .split_whitespace()
                .map(|x| x.parse::<T>().map_err(|_| perr(format!("bad coefficient `{x}`"))))
                .collect::<Result<Vec<_>, _>>()?;
            if k.len() != dim || j.len() != dim {
                return Err(perr(format!("expected {dim} mode and exponent entries")));
            }
            if c.len() != 2 {
                return Err(perr("expected `re im`".into()));
            }
            terms.push((k, j, Complex::new(c[0], c[1])));
        }
        Self::from_terms(dim, terms, real)
    }
}

pub(crate) fn binomial<T: Real>(n: u32, k: u32) -> T {
    let mut r = T::one();
    for i in 0..k {
        r = r * T::lit((n - i) as f64) / T::lit((i + 1) as f64);
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    type S = FourierTaylorSeries<f64>;

    fn c(re: f64, im: f64) -> Complex<f64> {
        Complex::new(re, im)
    }

    #[test]
    fn additive_inverse_is_empty() {
        let a = S::constant(2, 1.0);
        let b = S::constant(2, -1.0);
        assert!(a.add(&b).unwrap().is_empty());
        assert_eq!(a.add(&S::zero(2)).unwrap(), a);
    }

    #[test]
    fn products_of_basics() {
        let i1 = S::action(2, 0);
        let sq = i1.mul(&i1).unwrap();
        assert_eq!(sq.len(), 1);
        assert_eq!(sq.coeff(&[0, 0], &[2, 0]), c(1.0, 0.0));
        let e = S::monomial(vec![1, 0], vec![0, 0], c(1.0, 0.0));
        let ebar = S::monomial(vec![-1, 0], vec![0, 0], c(1.0, 0.0));
        let p = e.mul(&ebar).unwrap();
        assert_eq!(p, S::constant(2, 1.0).with_reality(false));
    }

    #[test]
    fn canonical_pair_sign() {
        // {I₁, g(θ₁)} = −g'(θ₁), i.e. {I₁, θ₁} = −1 under this convention
        let i1 = S::action(2, 0);
        let e = S::monomial(vec![1, 0], vec![0, 0], c(1.0, 0.0));
        let b = i1.poisson(&e).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b.coeff(&[1, 0], &[0, 0]), c(0.0, -1.0));
        let f = S::cos_term(vec![1, 1], vec![1, 0], 0.7);
        assert!(f.poisson(&f).unwrap().is_empty());
    }

    #[test]
    fn truncation_examples() {
        let p = S::monomial(vec![0, 0], vec![2, 2], c(1.0, 0.0));
        let (q, r) = p.truncate(3, 4).unwrap();
        assert!(q.is_empty() && r.is_empty());
        let p = S::monomial(vec![3, 1], vec![0, 0], c(1.0, 0.0));
        let (q, r) = p.truncate(3, 4).unwrap();
        assert_eq!(q, p);
        assert!(r.is_empty());
        assert!(p.truncate(0, 4).is_err());
    }

    #[test]
    fn averaging() {
        let e = S::monomial(vec![1, 0], vec![0, 0], c(1.0, 0.0));
        assert!(e.average().is_empty());
        let s = e.add(&S::constant(2, 2.5)).unwrap();
        assert_eq!(s.average().coeff(&[0, 0], &[0, 0]), c(2.5, 0.0));
        assert_eq!(s.average().len(), 1);
    }

    #[test]
    fn majorant_values() {
        assert_eq!(S::constant(3, 1.0).majorant_norm(0.2, 5.0).unwrap(), 1.0);
        assert_eq!(S::action(3, 1).majorant_norm(0.5, 1.0).unwrap(), 0.5);
        let two = S::monomial(vec![1, 0], vec![0, 0], c(2.0, 0.0));
        // 2·e^{0.3}
        assert!((two.majorant_norm(1.0, 0.3).unwrap() - 2.699_717_615_152_007).abs() < 1e-14);
        let big = S::monomial(vec![400, 0], vec![0, 0], c(1.0, 0.0));
        assert!(matches!(big.majorant_norm(1.0, 2.0), Err(SeriesError::Overflow { .. })));
    }

    #[test]
    fn lie_identity_cases() {
        let h = S::action(2, 0).add(&S::cos_term(vec![1, 0], vec![1, 0], 0.3)).unwrap();
        assert_eq!(h.lie_transform(&S::zero(2), 4).unwrap(), h);
        let f = S::action(2, 1).scale(3.0);
        assert_eq!(S::action(2, 0).lie_transform(&f, 4).unwrap(), S::action(2, 0));
        assert!(h.lie_transform(&f, 0).is_err());
    }

    #[test]
    fn reality_checks() {
        let bad = S::from_terms(1, vec![(vec![1], vec![0], c(1.0, 0.0))], true);
        assert!(matches!(bad, Err(SeriesError::RealityViolation { .. })));
        let ok = S::from_terms(
            1,
            vec![(vec![1], vec![0], c(1.0, 2.0)), (vec![-1], vec![0], c(1.0, -2.0))],
            true,
        )
        .unwrap();
        assert!(ok.is_real());
    }

    #[test]
    fn text_round_trip() {
        let s = S::cos_term(vec![1, -2], vec![0, 3], 0.1)
            .add(&S::constant(2, 1.0 / 3.0))
            .unwrap();
        let t = s.to_text();
        let back = S::from_text(&t, 2, true).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_text(), t);
        assert!(matches!(S::from_text("1 0 | 0 0 | 1.0", 2, false), Err(SeriesError::Parse { line: 1, .. })));
    }

    #[test]
    fn dimension_mismatch() {
        assert!(S::zero(2).add(&S::zero(3)).is_err());
        assert!(S::zero(2).mul(&S::zero(3)).is_err());
        assert!(S::zero(2).poisson(&S::zero(3)).is_err());
    }

    #[test]
    fn shift_is_exact_for_square() {
        // (1 + I)^2 = 1 + 2I + I²
        let sq = S::action(1, 0).mul(&S::action(1, 0)).unwrap();
        let sh = sq.shift_actions(&[1.0]).unwrap();
        assert_eq!(sh.coeff(&[0], &[0]), c(1.0, 0.0));
        assert_eq!(sh.coeff(&[0], &[1]), c(2.0, 0.0));
        assert_eq!(sh.coeff(&[0], &[2]), c(1.0, 0.0));
    }

    #[test]
    fn works_in_single_precision() {
        let a = FourierTaylorSeries::<f32>::cos_term(vec![1], vec![1], 0.5);
        let b = a.poisson(&FourierTaylorSeries::<f32>::action(1, 0)).unwrap();
        assert!(b.is_real());
        assert!(b.majorant_norm(1.0, 0.1).unwrap() > 0.0);
    }
}
