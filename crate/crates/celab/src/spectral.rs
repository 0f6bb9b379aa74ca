//! Complex spectral kernel: unitary DFT, circulant covariance algebra, and
//! the conditioned LMMSE solve shared by every estimator.
//!
//! Covariances of uniform linear arrays are Toeplitz and asymptotically
//! circulant, so a circulant covariance is represented by its real
//! eigenvalue vector (the "spectrum") and all heavy solves run diagonally in
//! the Fourier domain at O(M log M + M). Dense Hermitian matrices are kept
//! around for exact conditional covariances and as test oracles.
//!
//! The DFT is unitary (`1/sqrt(M)` normalization), so transforming channels
//! and white noise into the Fourier domain preserves covariances.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::f64::consts::PI;
use std::sync::Arc;

/// Errors produced by the spectral kernel.
#[derive(Debug, Clone, thiserror::Error)]
pub enum SpectralError {
    /// A transform or matrix of size zero was requested.
    #[error("transform size must be at least 1")]
    ZeroSize,
    /// Vector/matrix sizes disagree.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    /// `C + noise` cannot be inverted (zero noise with rank-deficient `C`).
    #[error("singular system: covariance plus noise is not invertible")]
    SingularSystem,
    /// An input violated a positivity requirement.
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, SpectralError>;

/// Unitary DFT of a fixed size, backed by FFT plans. Immutable after
/// construction and cheap to clone; safe to share across threads.
#[derive(Clone)]
pub struct UnitaryDft {
    size: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for UnitaryDft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UnitaryDft").field("size", &self.size).finish()
    }
}

impl UnitaryDft {
    /// Plans a unitary DFT of size `m`.
    pub fn new(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(SpectralError::ZeroSize);
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            size: m,
            fwd: planner.plan_fft_forward(m),
            inv: planner.plan_fft_inverse(m),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.size {
            return Err(SpectralError::DimensionMismatch {
                expected: self.size,
                got: len,
            });
        }
        Ok(())
    }

    /// Applies `F` (forward unitary DFT) to a vector.
    pub fn forward(&self, x: &[Complex64]) -> Result<Vec<Complex64>> {
        self.check_len(x.len())?;
        let mut buf = x.to_vec();
        self.fwd.process(&mut buf);
        let s = 1.0 / (self.size as f64).sqrt();
        for v in &mut buf {
            *v *= s;
        }
        Ok(buf)
    }

    /// Applies `F^H` (inverse unitary DFT) to a vector.
    pub fn inverse(&self, x: &[Complex64]) -> Result<Vec<Complex64>> {
        self.check_len(x.len())?;
        let mut buf = x.to_vec();
        self.inv.process(&mut buf);
        let s = 1.0 / (self.size as f64).sqrt();
        for v in &mut buf {
            *v *= s;
        }
        Ok(buf)
    }

    /// Materializes the dense matrix `F[k, n] = exp(-2*pi*i*k*n/M) / sqrt(M)`.
    /// Only used by non-hot paths and oracles; solves go through the plans.
    pub fn matrix(&self) -> DMatrix<Complex64> {
        let m = self.size;
        let s = 1.0 / (m as f64).sqrt();
        DMatrix::from_fn(m, m, |k, n| {
            let phase = -2.0 * PI * (k as f64) * (n as f64) / (m as f64);
            Complex64::from_polar(s, phase)
        })
    }
}

/// Real, nonnegative eigenvalue vector of a circulant covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSpectrum {
    values: Vec<f64>,
}

impl CovarianceSpectrum {
    /// Validates that every entry is finite and nonnegative.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(SpectralError::ZeroSize);
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(SpectralError::InvalidInput(format!(
                    "spectrum entry {i} is {v}, must be finite and nonnegative"
                )));
            }
        }
        Ok(Self { values })
    }

    /// Builds a spectrum from arbitrary real values, clamping negatives to
    /// zero (PSD projection for non-circulant inputs).
    pub fn from_clamped(values: Vec<f64>) -> Self {
        Self {
            values: values.into_iter().map(|v| v.max(0.0)).collect(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Trace of the induced circulant matrix (sum of eigenvalues).
    pub fn trace(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Dense Hermitian covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianCovariance {
    matrix: DMatrix<Complex64>,
}

/// Maximum allowed Hermitian asymmetry `max |C - C^H|`.
const HERMITIAN_TOL: f64 = 1e-12;
/// Eigenvalues above this (negative) floor count as PSD roundoff.
pub const PSD_EIG_TOL: f64 = -1e-10;

impl HermitianCovariance {
    /// Validates Hermitian symmetry to `1e-12` (entrywise, relative to the
    /// largest magnitude) and stores the matrix. PSD-ness is enforced by the
    /// operations that decompose it.
    pub fn new(matrix: DMatrix<Complex64>) -> Result<Self> {
        if matrix.nrows() == 0 {
            return Err(SpectralError::ZeroSize);
        }
        if matrix.nrows() != matrix.ncols() {
            return Err(SpectralError::DimensionMismatch {
                expected: matrix.nrows(),
                got: matrix.ncols(),
            });
        }
        let scale = matrix.iter().map(|v| v.norm()).fold(0.0f64, f64::max).max(1.0);
        for i in 0..matrix.nrows() {
            for j in i..matrix.ncols() {
                let asym = (matrix[(i, j)] - matrix[(j, i)].conj()).norm();
                if asym > HERMITIAN_TOL * scale {
                    return Err(SpectralError::InvalidInput(format!(
                        "matrix is not Hermitian at ({i},{j}): asymmetry {asym:.3e}"
                    )));
                }
            }
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.matrix[(i, i)].re).sum()
    }

    /// Eigenvalues (ascending is not guaranteed) and unitary eigenvectors.
    /// Fails if any eigenvalue lies below the PSD roundoff floor.
    pub fn psd_eigen(&self) -> Result<(Vec<f64>, DMatrix<Complex64>)> {
        let eig = SymmetricEigen::new(self.matrix.clone());
        let mut vals = Vec::with_capacity(self.dim());
        for &l in eig.eigenvalues.iter() {
            if l < PSD_EIG_TOL * self.trace().abs().max(1.0) {
                return Err(SpectralError::InvalidInput(format!(
                    "covariance has negative eigenvalue {l:.3e}"
                )));
            }
            vals.push(l.max(0.0));
        }
        Ok((vals, eig.eigenvectors))
    }
}

/// White-noise model `Sigma = variance * I`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    variance: f64,
}

impl NoiseModel {
    /// Strictly positive noise variance, as required by estimation.
    pub fn new(variance: f64) -> Result<Self> {
        if !variance.is_finite() || variance <= 0.0 {
            return Err(SpectralError::InvalidInput(format!(
                "noise variance must be positive, got {variance}"
            )));
        }
        Ok(Self { variance })
    }

    /// Zero noise; only meaningful in limit tests.
    pub fn noiseless() -> Self {
        Self { variance: 0.0 }
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }
}

/// Covariance operand for the LMMSE solve: either a dense Hermitian matrix
/// or a circulant spectrum diagonalized by the given DFT.
#[derive(Debug, Clone, Copy)]
pub enum Covariance<'a> {
    Dense(&'a HermitianCovariance),
    Spectrum {
        spectrum: &'a CovarianceSpectrum,
        dft: &'a UnitaryDft,
    },
}

impl Covariance<'_> {
    fn dim(&self) -> usize {
        match self {
            Covariance::Dense(c) => c.dim(),
            Covariance::Spectrum { spectrum, .. } => spectrum.len(),
        }
    }
}

/// Builds the circulant matrix `C = F^H diag(c) F`.
///
/// Only the first column is transformed; the rest of the matrix follows from
/// the cyclic structure `C[i, j] = gamma[(i - j) mod M]`.
pub fn circulant_from_spectrum(
    c: &CovarianceSpectrum,
    dft: &UnitaryDft,
) -> Result<HermitianCovariance> {
    let m = dft.size();
    if c.len() != m {
        return Err(SpectralError::DimensionMismatch {
            expected: m,
            got: c.len(),
        });
    }
    let spec: Vec<Complex64> = c.values().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    // First column of C: F^H (c .* F e_0) = F^H c / sqrt(M).
    let col = dft.inverse(&spec)?;
    let s = 1.0 / (m as f64).sqrt();
    let gamma: Vec<Complex64> = col.into_iter().map(|v| v * s).collect();
    let matrix = DMatrix::from_fn(m, m, |i, j| {
        if i >= j {
            gamma[i - j]
        } else {
            gamma[j - i].conj()
        }
    });
    HermitianCovariance::new(matrix)
}

/// Projects a Hermitian covariance onto the circulant family: the real parts
/// of `diag(F C F^H)`, with negative entries clamped to zero. Exact inverse
/// of [`circulant_from_spectrum`] when `C` is circulant.
pub fn spectrum_from_covariance(
    cov: &HermitianCovariance,
    dft: &UnitaryDft,
) -> Result<CovarianceSpectrum> {
    let m = dft.size();
    if cov.dim() != m {
        return Err(SpectralError::DimensionMismatch {
            expected: m,
            got: cov.dim(),
        });
    }
    // B = F C (transform each column), then d_k = (B F^H)[k, k], which is the
    // k-th entry of F^H applied to the k-th row of B.
    let mat = cov.matrix();
    let mut b = DMatrix::<Complex64>::zeros(m, m);
    let mut col = vec![Complex64::default(); m];
    for j in 0..m {
        for i in 0..m {
            col[i] = mat[(i, j)];
        }
        let t = dft.forward(&col)?;
        for i in 0..m {
            b[(i, j)] = t[i];
        }
    }
    let mut diag = Vec::with_capacity(m);
    let mut row = vec![Complex64::default(); m];
    for k in 0..m {
        for j in 0..m {
            row[j] = b[(k, j)];
        }
        let t = dft.inverse(&row)?;
        diag.push(t[k].re);
    }
    Ok(CovarianceSpectrum::from_clamped(diag))
}

fn check_same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(SpectralError::DimensionMismatch { expected: a, got: b });
    }
    Ok(())
}

/// Per-bin LMMSE filter gains `c_i / (c_i + variance)`.
///
/// With zero noise, a zero spectrum entry makes the system singular.
fn diagonal_filter(spectrum: &CovarianceSpectrum, noise: &NoiseModel) -> Result<Vec<f64>> {
    let v = noise.variance();
    spectrum
        .values()
        .iter()
        .map(|&c| {
            let d = c + v;
            if d <= 0.0 {
                if c == 0.0 && v == 0.0 {
                    Err(SpectralError::SingularSystem)
                } else {
                    Err(SpectralError::InvalidInput(format!(
                        "nonpositive filter denominator {d}"
                    )))
                }
            } else {
                Ok(c / d)
            }
        })
        .collect()
}

/// LMMSE estimate entirely in the Fourier domain: both `mean` and `y` are
/// already transformed, and the returned estimate stays transformed.
pub fn lmmse_apply_diagonal(
    mean: &[Complex64],
    spectrum: &CovarianceSpectrum,
    noise: &NoiseModel,
    y: &[Complex64],
) -> Result<Vec<Complex64>> {
    check_same_len(spectrum.len(), mean.len())?;
    check_same_len(spectrum.len(), y.len())?;
    let gains = diagonal_filter(spectrum, noise)?;
    Ok(mean
        .iter()
        .zip(y)
        .zip(&gains)
        .map(|((&mu, &yi), &g)| mu + (yi - mu) * g)
        .collect())
}

/// The conditioned LMMSE estimate `mu + C (C + variance I)^{-1} (y - mu)`.
///
/// The spectrum path performs the solve diagonally in the Fourier domain
/// (O(M log M)); the dense path factorizes `C + variance I` and exists mainly
/// as the exact route for non-circulant covariances and test oracles.
pub fn lmmse_apply(
    mean: &[Complex64],
    cov: Covariance<'_>,
    noise: &NoiseModel,
    y: &[Complex64],
) -> Result<Vec<Complex64>> {
    let m = cov.dim();
    check_same_len(m, mean.len())?;
    check_same_len(m, y.len())?;
    match cov {
        Covariance::Spectrum { spectrum, dft } => {
            check_same_len(m, dft.size())?;
            let innovation: Vec<Complex64> =
                y.iter().zip(mean).map(|(&yi, &mu)| yi - mu).collect();
            let gains = diagonal_filter(spectrum, noise)?;
            let mut t = dft.forward(&innovation)?;
            for (v, &g) in t.iter_mut().zip(&gains) {
                *v *= g;
            }
            let filtered = dft.inverse(&t)?;
            Ok(mean.iter().zip(filtered).map(|(&mu, f)| mu + f).collect())
        }
        Covariance::Dense(c) => {
            let v = noise.variance();
            if v == 0.0 {
                // C (C)^{-1} (y - mu) + mu = y when C is invertible.
                return match Cholesky::new(c.matrix().clone()) {
                    Some(_) => Ok(y.to_vec()),
                    None => Err(SpectralError::SingularSystem),
                };
            }
            let mut a = c.matrix().clone();
            for i in 0..m {
                a[(i, i)] += Complex64::new(v, 0.0);
            }
            let chol = Cholesky::new(a).ok_or(SpectralError::SingularSystem)?;
            let innovation = DVector::from_fn(m, |i, _| y[i] - mean[i]);
            let sol = chol.solve(&innovation);
            let filtered = c.matrix() * sol;
            Ok((0..m).map(|i| mean[i] + filtered[i]).collect())
        }
    }
}

/// Analytic conditional MSE of the LMMSE estimator:
/// `tr(C - C (C + variance I)^{-1} C) = sum_i lambda_i * variance / (lambda_i + variance)`.
pub fn lmmse_mse_trace(cov: &HermitianCovariance, noise: &NoiseModel) -> Result<f64> {
    if noise.variance() <= 0.0 {
        return Err(SpectralError::InvalidInput(
            "lmmse_mse_trace requires positive noise variance".into(),
        ));
    }
    let (eigvals, _) = cov.psd_eigen()?;
    let v = noise.variance();
    Ok(eigvals.iter().map(|&l| l * v / (l + v)).sum())
}
