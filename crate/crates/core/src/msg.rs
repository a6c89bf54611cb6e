//! Probabilistic message types and their combination rules.
//!
//! Three families are used by the receiver: complex Gaussian vectors for the
//! channel weights, Gamma densities for the noise precision, and discrete
//! messages over bits and constellation points.
//!
//! Discrete messages are stored as linear probabilities; every product is
//! evaluated in the log domain on probabilities clamped to
//! `[PROB_CLAMP, 1 - PROB_CLAMP]`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use num_complex::Complex64;

use crate::error::{invalid, Error, Result};

pub type C64 = Complex64;

/// Lower clamp for bit probabilities before taking logarithms.
pub const PROB_CLAMP: f64 = 1e-12;

/// Precision assigned to zero-variance diagonal entries when they enter a
/// matrix solve.
pub const MAX_PRECISION: f64 = 1e15;

/// Initial diagonal loading for a Cholesky factorization that fails.
pub const DIAGONAL_LOADING: f64 = 1e-12;

/// Covariance of a [`GaussianVectorMessage`].
#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    /// Independent entries. Variances may be `f64::INFINITY` (zero precision).
    Diagonal(DVector<f64>),
    /// Dense Hermitian matrix.
    Full(DMatrix<C64>),
    /// Dense Hermitian matrix held as a factor `G` with `Σ = G Gᴴ`.
    Factored(DMatrix<C64>),
}

impl Covariance {
    pub fn len(&self) -> usize {
        match self {
            Covariance::Diagonal(v) => v.len(),
            Covariance::Full(m) => m.nrows(),
            Covariance::Factored(g) => g.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Diagonal of the covariance matrix.
    pub fn variances(&self) -> DVector<f64> {
        match self {
            Covariance::Diagonal(v) => v.clone(),
            Covariance::Full(m) => DVector::from_iterator(m.nrows(), m.diagonal().iter().map(|z| z.re)),
            Covariance::Factored(g) => {
                DVector::from_iterator(g.nrows(), g.row_iter().map(|row| row.iter().map(|z| z.norm_sqr()).sum()))
            }
        }
    }

    /// Dense form. Infinite diagonal variances are carried over as-is.
    pub fn to_full(&self) -> DMatrix<C64> {
        match self {
            Covariance::Diagonal(v) => DMatrix::from_diagonal(&v.map(|x| C64::new(x, 0.0))),
            Covariance::Full(m) => m.clone(),
            Covariance::Factored(g) => g * g.adjoint(),
        }
    }
}

/// Complex Gaussian message `CN(mean, cov)` over a vector of channel weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianVectorMessage {
    mean: DVector<C64>,
    cov: Covariance,
}

impl GaussianVectorMessage {
    pub fn new(mean: DVector<C64>, cov: Covariance) -> Result<Self> {
        if mean.len() != cov.len() {
            return Err(invalid(format!("mean has length {} but covariance has dimension {}", mean.len(), cov.len())));
        }
        match &cov {
            Covariance::Diagonal(v) => {
                if v.iter().any(|x| x.is_nan() || *x < 0.0) {
                    return Err(invalid("diagonal variances must be nonnegative"));
                }
            }
            Covariance::Full(m) => {
                if !m.is_square() {
                    return Err(invalid("covariance matrix must be square"));
                }
                let scale = m.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1.0);
                let asym = (m - m.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max);
                if asym > 1e-9 * scale {
                    return Err(invalid("covariance matrix is not Hermitian"));
                }
                if m.diagonal().iter().any(|z| z.re < 0.0 || z.re.is_nan()) {
                    return Err(invalid("covariance matrix has a negative diagonal entry"));
                }
            }
            Covariance::Factored(_) => {}
        }
        Ok(Self { mean, cov })
    }

    pub fn diagonal(mean: DVector<C64>, variances: DVector<f64>) -> Result<Self> {
        Self::new(mean, Covariance::Diagonal(variances))
    }

    /// Message with zero precision everywhere; neutral under [`gaussian_product`].
    pub fn non_informative(n: usize) -> Self {
        Self { mean: DVector::zeros(n), cov: Covariance::Diagonal(DVector::from_element(n, f64::INFINITY)) }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn mean(&self) -> &DVector<C64> {
        &self.mean
    }

    pub fn covariance(&self) -> &Covariance {
        &self.cov
    }

    pub fn variances(&self) -> DVector<f64> {
        self.cov.variances()
    }

    /// Marginal over the entries at `indices`.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(invalid(format!("index {bad} out of range for length {}", self.len())));
        }
        let mean = DVector::from_iterator(indices.len(), indices.iter().map(|&i| self.mean[i]));
        let cov = match &self.cov {
            Covariance::Diagonal(v) => Covariance::Diagonal(DVector::from_iterator(indices.len(), indices.iter().map(|&i| v[i]))),
            Covariance::Full(m) => Covariance::Full(m.select_rows(indices).select_columns(indices)),
            Covariance::Factored(g) => Covariance::Factored(g.select_rows(indices)),
        };
        Ok(Self { mean, cov })
    }
}

fn precision_of(variance: f64) -> f64 {
    if variance.is_infinite() {
        0.0
    } else if variance <= 1.0 / MAX_PRECISION {
        MAX_PRECISION
    } else {
        1.0 / variance
    }
}

/// Cholesky factorization of a Hermitian PSD matrix, loading the diagonal
/// progressively when the plain factorization fails.
pub(crate) fn cholesky_loaded(m: DMatrix<C64>) -> Result<Cholesky<C64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let n = m.nrows();
    let mut load = DIAGONAL_LOADING;
    while load <= 1e-4 {
        let mut loaded = m.clone();
        for i in 0..n {
            loaded[(i, i)] += C64::new(load, 0.0);
        }
        if let Some(c) = Cholesky::new(loaded) {
            return Ok(c);
        }
        load *= 100.0;
    }
    Err(Error::DegenerateMessage("covariance solve failed even after diagonal loading".into()))
}

fn scalar_product(ma: C64, va: f64, mb: C64, vb: f64) -> (C64, f64) {
    match (va.is_infinite(), vb.is_infinite()) {
        (true, true) => (C64::new(0.0, 0.0), f64::INFINITY),
        (true, false) => (mb, vb),
        (false, true) => (ma, va),
        (false, false) => {
            let sum = va + vb;
            if sum == 0.0 {
                ((ma + mb) * 0.5, 0.0)
            } else {
                ((ma * vb + mb * va) / sum, va * vb / sum)
            }
        }
    }
}

/// Combines a prior `CN(mean_a, G Gᴴ)` with independent per-entry observations
/// of precision `precision_b` and mean `mean_b`. Returns the posterior mean and
/// a factor of the posterior covariance.
///
/// Works in the column space of `G`, so the cost is `O(n r²)` for a rank-`r`
/// factor and a singular prior is fine.
pub(crate) fn factored_update(
    mean_a: &DVector<C64>,
    factor: &DMatrix<C64>,
    precision_b: &[f64],
    mean_b: &DVector<C64>,
) -> Result<(DVector<C64>, DMatrix<C64>)> {
    let n = factor.nrows();
    let r = factor.ncols();
    let f = factor.as_slice(); // column-major: f[i + a·n] = G(i, a)
    let mut system = DMatrix::<C64>::identity(r, r);
    for a in 0..r {
        for b in a..r {
            let mut acc = C64::new(0.0, 0.0);
            for i in 0..n {
                if precision_b[i] > 0.0 {
                    acc += f[i + a * n].conj() * f[i + b * n] * precision_b[i];
                }
            }
            system[(a, b)] += acc;
            if a != b {
                system[(b, a)] += acc.conj();
            }
        }
    }
    let chol = cholesky_loaded(system)?;

    let mut projected = DVector::<C64>::zeros(r);
    for i in 0..n {
        if precision_b[i] > 0.0 {
            let innovation = (mean_b[i] - mean_a[i]) * precision_b[i];
            for a in 0..r {
                projected[a] += f[i + a * n].conj() * innovation;
            }
        }
    }
    let z = chol.solve(&projected);
    let mut mean = mean_a.clone();
    for a in 0..r {
        for i in 0..n {
            mean[i] += f[i + a * n] * z[a];
        }
    }

    // Σ = G A⁻¹ Gᴴ = (G L⁻ᴴ)(G L⁻ᴴ)ᴴ; row i of G L⁻ᴴ is conj(L⁻¹ conj(gᵢ)).
    let l = chol.l();
    let mut out = DMatrix::<C64>::zeros(n, r);
    let mut x = vec![C64::new(0.0, 0.0); r];
    for i in 0..n {
        for a in 0..r {
            let mut v = f[i + a * n].conj();
            for (b, xb) in x.iter().enumerate().take(a) {
                v -= l[(a, b)] * xb;
            }
            x[a] = v / l[(a, a)];
        }
        for a in 0..r {
            out[(i, a)] = x[a].conj();
        }
    }
    Ok((mean, out))
}

fn full_times_diagonal(
    mean_a: &DVector<C64>,
    cov_a: &DMatrix<C64>,
    mean_b: &DVector<C64>,
    var_b: &DVector<f64>,
) -> Result<GaussianVectorMessage> {
    let n = mean_a.len();
    let s: Vec<f64> = var_b.iter().map(|&v| precision_of(v).sqrt()).collect();
    // Woodbury: Σ = Σa − Σa S (I + S Σa S)⁻¹ S Σa with S = diag(√precision_b).
    let mut cov_s = cov_a.clone();
    for (j, mut col) in cov_s.column_iter_mut().enumerate() {
        col *= C64::new(s[j], 0.0);
    }
    let mut system = cov_s.clone();
    for (i, mut row) in system.row_iter_mut().enumerate() {
        row *= C64::new(s[i], 0.0);
    }
    for i in 0..n {
        system[(i, i)] += C64::new(1.0, 0.0);
    }
    let chol = cholesky_loaded(system)?;
    let rhs = DVector::from_iterator(n, (0..n).map(|i| if s[i] > 0.0 { (mean_b[i] - mean_a[i]) * s[i] } else { C64::new(0.0, 0.0) }));
    let mean = mean_a + &cov_s * chol.solve(&rhs);
    let correction = &cov_s * chol.solve(&cov_s.adjoint());
    let mut cov = cov_a - correction;
    hermitize(&mut cov);
    GaussianVectorMessage::new(mean, Covariance::Full(cov))
}

fn full_times_full(
    mean_a: &DVector<C64>,
    cov_a: &DMatrix<C64>,
    mean_b: &DVector<C64>,
    cov_b: &DMatrix<C64>,
) -> Result<GaussianVectorMessage> {
    let chol = cholesky_loaded(cov_a + cov_b)?;
    // Σ = Σa (Σa + Σb)⁻¹ Σb,  μ = Σb (Σa + Σb)⁻¹ μa + Σa (Σa + Σb)⁻¹ μb
    let mut cov = cov_a * chol.solve(cov_b);
    hermitize(&mut cov);
    let mean = cov_b * chol.solve(mean_a) + cov_a * chol.solve(mean_b);
    GaussianVectorMessage::new(mean, Covariance::Full(cov))
}

fn hermitize(m: &mut DMatrix<C64>) {
    let h = (&*m + m.adjoint()) * C64::new(0.5, 0.0);
    *m = h;
}

/// Normalized product of two Gaussian messages: precisions add and the mean
/// is the precision-weighted average.
pub fn gaussian_product(a: &GaussianVectorMessage, b: &GaussianVectorMessage) -> Result<GaussianVectorMessage> {
    if a.len() != b.len() {
        return Err(invalid(format!("gaussian_product: lengths {} and {} differ", a.len(), b.len())));
    }
    use Covariance::*;
    match (&a.cov, &b.cov) {
        (Diagonal(va), Diagonal(vb)) => {
            let n = a.len();
            if n > 0 && va.iter().chain(vb.iter()).all(|v| v.is_infinite()) {
                return Err(Error::DegenerateMessage("both messages have zero precision".into()));
            }
            let mut mean = DVector::zeros(n);
            let mut var = DVector::zeros(n);
            for i in 0..n {
                let (m, v) = scalar_product(a.mean[i], va[i], b.mean[i], vb[i]);
                mean[i] = m;
                var[i] = v;
            }
            GaussianVectorMessage::new(mean, Diagonal(var))
        }
        (Factored(g), Diagonal(vb)) => {
            let precision: Vec<f64> = vb.iter().map(|&v| precision_of(v)).collect();
            let (mean, factor) = factored_update(&a.mean, g, &precision, &b.mean)?;
            GaussianVectorMessage::new(mean, Factored(factor))
        }
        (Full(ca), Diagonal(vb)) => full_times_diagonal(&a.mean, ca, &b.mean, vb),
        (Diagonal(_), Full(_) | Factored(_)) => gaussian_product(b, a),
        _ => full_times_full(&a.mean, &a.cov.to_full(), &b.mean, &b.cov.to_full()),
    }
}

/// Gamma density `Ga(shape, rate)` over a noise precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaMessage {
    pub shape: f64,
    pub rate: f64,
}

impl GammaMessage {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape >= 0.0 && rate >= 0.0) {
            return Err(invalid(format!("gamma parameters must be nonnegative, got ({shape}, {rate})")));
        }
        Ok(Self { shape, rate })
    }

    /// `Ga(0, 0)`, the improper flat prior.
    pub fn non_informative() -> Self {
        Self { shape: 0.0, rate: 0.0 }
    }

    pub fn mean(&self) -> Result<f64> {
        if self.rate > 0.0 {
            Ok(self.shape / self.rate)
        } else {
            Err(Error::DivisionGuard(format!("gamma mean undefined for rate {}", self.rate)))
        }
    }

    /// Product with another Gamma-shaped message given in the same
    /// (shape, rate) convention: shapes and rates add.
    pub fn combine(&self, other: &GammaMessage) -> GammaMessage {
        GammaMessage { shape: self.shape + other.shape, rate: self.rate + other.rate }
    }
}

pub fn gamma_mean(g: &GammaMessage) -> Result<f64> {
    g.mean()
}

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `ln(p1 / p0)` of a clamped bit probability.
#[inline]
pub fn log_odds(p1: f64) -> f64 {
    let p = clamp_prob(p1);
    p.ln() - (-p).ln_1p()
}

/// Inverse of [`log_odds`].
#[inline]
pub fn from_log_odds(l: f64) -> f64 {
    if l >= 0.0 {
        1.0 / (1.0 + (-l).exp())
    } else {
        let e = l.exp();
        e / (1.0 + e)
    }
}

/// Per-bit probability of a one.
#[derive(Debug, Clone, PartialEq)]
pub struct BitSoftMessage {
    p1: Vec<f64>,
}

impl BitSoftMessage {
    pub fn new(p1: Vec<f64>) -> Result<Self> {
        if let Some(bad) = p1.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(invalid(format!("bit probability {bad} outside [0, 1]")));
        }
        Ok(Self { p1 })
    }

    /// All bits at 0.5.
    pub fn neutral(n: usize) -> Self {
        Self { p1: vec![0.5; n] }
    }

    pub fn from_log_odds(llr: &[f64]) -> Self {
        Self { p1: llr.iter().map(|&l| from_log_odds(l)).collect() }
    }

    pub fn log_odds(&self) -> Vec<f64> {
        self.p1.iter().map(|&p| log_odds(p)).collect()
    }

    pub fn p1(&self) -> &[f64] {
        &self.p1
    }

    pub fn len(&self) -> usize {
        self.p1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p1.is_empty()
    }

    /// Each entry rounded to single precision, as carried on the wire.
    pub fn to_f32_precision(&self) -> Self {
        Self { p1: self.p1.iter().map(|&p| p as f32 as f64).collect() }
    }
}

/// Per-symbol weights over the points of a constellation of size `order`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolSoftMessage {
    order: usize,
    weights: Vec<f64>,
}

impl SymbolSoftMessage {
    pub fn new(order: usize, weights: Vec<f64>) -> Result<Self> {
        if order == 0 || weights.len() % order != 0 {
            return Err(invalid(format!("{} weights do not split into rows of {order}", weights.len())));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(invalid("symbol weights must be finite and nonnegative"));
        }
        Ok(Self { order, weights })
    }

    pub fn uniform(symbols: usize, order: usize) -> Self {
        Self { order, weights: vec![1.0 / order as f64; symbols * order] }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn symbols(&self) -> usize {
        self.weights.len() / self.order
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.order..(i + 1) * self.order]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

pub trait Normalize: Sized {
    fn normalize(&self) -> Result<Self>;
}

impl Normalize for SymbolSoftMessage {
    fn normalize(&self) -> Result<Self> {
        let mut weights = self.weights.clone();
        for (i, row) in weights.chunks_mut(self.order).enumerate() {
            let total: f64 = row.iter().sum();
            if total <= 0.0 {
                return Err(Error::DegenerateMessage(format!("symbol {i} has all-zero weights")));
            }
            row.iter_mut().for_each(|w| *w /= total);
        }
        Ok(Self { order: self.order, weights })
    }
}

impl Normalize for BitSoftMessage {
    /// A bit message is always normalized; this only revalidates it.
    fn normalize(&self) -> Result<Self> {
        BitSoftMessage::new(self.p1.clone())
    }
}

/// Normalized per-bit product of bit messages, computed on log-odds.
///
/// A bit where one input is certain of `1` and another certain of `0`
/// resolves to 0.5; the number of such bits is returned alongside.
pub fn bit_message_product(msgs: &[&BitSoftMessage]) -> Result<(BitSoftMessage, usize)> {
    let Some(first) = msgs.first() else {
        return Err(invalid("bit_message_product needs at least one message"));
    };
    let n = first.len();
    if msgs.iter().any(|m| m.len() != n) {
        return Err(invalid("bit_message_product: lengths differ"));
    }
    let mut conflicts = 0;
    let p1 = (0..n)
        .map(|i| {
            let mut sure_one = false;
            let mut sure_zero = false;
            let mut llr = 0.0;
            for m in msgs {
                let p = m.p1[i];
                sure_one |= p >= 1.0 - PROB_CLAMP;
                sure_zero |= p <= PROB_CLAMP;
                llr += log_odds(p);
            }
            if sure_one && sure_zero {
                conflicts += 1;
                0.5
            } else {
                from_log_odds(llr)
            }
        })
        .collect();
    Ok((BitSoftMessage { p1 }, conflicts))
}
