//! Conditionally Gaussian SIMO channel model.
//!
//! Channels live on a half-wavelength uniform linear array with `M` antennas.
//! Each sample draws fresh cluster parameters `delta` (per-cluster powers and
//! angles of arrival), forms the covariance
//! `C_delta = integral g(theta; delta) a(theta) a(theta)^H dtheta` by midpoint
//! quadrature with a Laplacian power angular spectrum per cluster, rescales it
//! to `tr(C_delta) = M`, and draws `h | delta ~ CN(0, C_delta)`. Observations
//! add white noise at a per-sample variance fixed by the target SNR:
//! `variance_i = ||h_i||^2 / (M * 10^(snr_db/10))`.
//!
//! Generation is deterministic given `(config, N, seed)`: every sample owns
//! its own RNG substream, so parallel generation is order-independent.

mod io;

pub use io::{load_dataset, save_dataset};

use crate::rng::{domain, substream};
use crate::spectral::{HermitianCovariance, SpectralError};
use nalgebra::DMatrix;
use num_complex::{Complex32, Complex64};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use std::f64::consts::PI;

/// Errors produced by channel generation and persistence.
#[derive(Debug, thiserror::Error)]
pub enum ChannelError {
    #[error("angle {angle} rad outside [-pi/2, pi/2]")]
    AngleOutOfRange { angle: f64 },
    #[error("{clusters} clusters cannot satisfy the 1-degree separation constraint")]
    InfeasibleSeparation { clusters: usize },
    #[error("rejection sampling failed to satisfy cluster constraints after {attempts} attempts")]
    ConstraintSampling { attempts: usize },
    #[error("invalid cluster parameters: {0}")]
    InvalidClusterParams(String),
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error("quadrature weights underflowed; increase quadrature_points or angular_spread")]
    QuadratureUnderflow,
    #[error("sample {index} has zero norm")]
    DegenerateSample { index: usize },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("unsupported dataset format version {version}")]
    UnsupportedVersion { version: u16 },
}

pub type Result<T> = std::result::Result<T, ChannelError>;

/// Minimum pairwise angle separation between clusters (1 degree).
pub const MIN_ANGLE_SEPARATION: f64 = PI / 180.0;
/// Maximum spread between cluster powers (9 dB).
pub const MAX_GAIN_RATIO_DB: f64 = 9.0;

fn max_gain_ratio() -> f64 {
    10f64.powf(MAX_GAIN_RATIO_DB / 10.0)
}

/// Per-cluster path powers and angles of arrival defining one channel
/// covariance. Validated on construction: powers sum to one with at most
/// 9 dB spread, angles lie in `[-pi/2, pi/2]` with at least 1 degree of
/// pairwise separation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterParams {
    gains: Vec<f64>,
    angles: Vec<f64>,
}

impl ClusterParams {
    pub fn new(gains: Vec<f64>, angles: Vec<f64>) -> Result<Self> {
        if gains.is_empty() || gains.len() != angles.len() {
            return Err(ChannelError::InvalidClusterParams(format!(
                "need matching nonempty gains/angles, got {}/{}",
                gains.len(),
                angles.len()
            )));
        }
        let sum: f64 = gains.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ChannelError::InvalidClusterParams(format!(
                "gains sum to {sum}, expected 1"
            )));
        }
        let min = gains.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = gains.iter().cloned().fold(0.0f64, f64::max);
        if min <= 0.0 {
            return Err(ChannelError::InvalidClusterParams(
                "gains must be strictly positive".into(),
            ));
        }
        if max / min > max_gain_ratio() * (1.0 + 1e-12) {
            return Err(ChannelError::InvalidClusterParams(format!(
                "gain ratio {:.3} exceeds the 9 dB constraint",
                max / min
            )));
        }
        for &a in &angles {
            if !(-PI / 2.0..=PI / 2.0).contains(&a) {
                return Err(ChannelError::AngleOutOfRange { angle: a });
            }
        }
        for i in 0..angles.len() {
            for j in (i + 1)..angles.len() {
                if (angles[i] - angles[j]).abs() < MIN_ANGLE_SEPARATION {
                    return Err(ChannelError::InvalidClusterParams(format!(
                        "angles {i} and {j} are closer than 1 degree"
                    )));
                }
            }
        }
        Ok(Self { gains, angles })
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn clusters(&self) -> usize {
        self.gains.len()
    }
}

/// Scenario geometry and generation knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioConfig {
    /// Array size M.
    pub antennas: usize,
    /// Propagation clusters P.
    pub clusters: usize,
    /// Per-cluster angular spread (Laplacian scale), radians.
    pub angular_spread: f64,
    /// Midpoint quadrature nodes over [-pi, pi]; at least `8 * antennas`.
    pub quadrature_points: usize,
    /// Experiment seed; all sample substreams derive from it.
    pub seed: u64,
}

/// Default angular spread: 2 degrees.
pub const DEFAULT_ANGULAR_SPREAD: f64 = 2.0 * PI / 180.0;

impl ScenarioConfig {
    /// Config with the documented defaults: 2-degree spread and `16 * M`
    /// quadrature nodes.
    pub fn new(antennas: usize, clusters: usize, seed: u64) -> Self {
        Self {
            antennas,
            clusters,
            angular_spread: DEFAULT_ANGULAR_SPREAD,
            quadrature_points: 16 * antennas,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.antennas == 0 {
            return Err(ChannelError::InvalidConfig("antennas must be positive".into()));
        }
        if self.clusters == 0 {
            return Err(ChannelError::InvalidConfig("clusters must be positive".into()));
        }
        if !(self.angular_spread > 0.0) || !self.angular_spread.is_finite() {
            return Err(ChannelError::InvalidConfig(
                "angular_spread must be positive and finite".into(),
            ));
        }
        if self.quadrature_points < 8 * self.antennas {
            return Err(ChannelError::InvalidConfig(format!(
                "quadrature_points {} below 8 * antennas = {}",
                self.quadrature_points,
                8 * self.antennas
            )));
        }
        Ok(())
    }
}

/// ULA steering vector `a_m = exp(j * pi * m * sin(angle))`, `||a||^2 = M`.
pub fn steering_vector(angle: f64, m: usize) -> Result<Vec<Complex64>> {
    if !(-PI / 2.0..=PI / 2.0).contains(&angle) {
        return Err(ChannelError::AngleOutOfRange { angle });
    }
    let s = angle.sin();
    Ok((0..m)
        .map(|k| Complex64::from_polar(1.0, PI * (k as f64) * s))
        .collect())
}

/// Draws cluster parameters: powers uniform on [0,1] normalized to sum one,
/// resampled until the 9 dB spread constraint holds; angles uniform on
/// `[-pi/2, pi/2]`, resampled until every pair is at least 1 degree apart.
pub fn sample_delta<R: Rng>(rng: &mut R, clusters: usize) -> Result<ClusterParams> {
    if clusters == 0 {
        return Err(ChannelError::InvalidClusterParams(
            "cluster count must be positive".into(),
        ));
    }
    if clusters > 180 {
        return Err(ChannelError::InfeasibleSeparation { clusters });
    }
    const MAX_ATTEMPTS: usize = 1_000_000;

    let ratio_cap = max_gain_ratio();
    let mut gains = vec![0.0; clusters];
    let mut ok = false;
    for _ in 0..MAX_ATTEMPTS {
        let mut sum = 0.0;
        for g in &mut gains {
            *g = rng.random::<f64>();
            sum += *g;
        }
        let min = gains.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = gains.iter().cloned().fold(0.0f64, f64::max);
        if min > 0.0 && max / min <= ratio_cap {
            for g in &mut gains {
                *g /= sum;
            }
            ok = true;
            break;
        }
    }
    if !ok {
        return Err(ChannelError::ConstraintSampling { attempts: MAX_ATTEMPTS });
    }

    let mut angles = vec![0.0; clusters];
    ok = false;
    'outer: for _ in 0..MAX_ATTEMPTS {
        for a in &mut angles {
            *a = (rng.random::<f64>() - 0.5) * PI;
        }
        for i in 0..clusters {
            for j in (i + 1)..clusters {
                if (angles[i] - angles[j]).abs() < MIN_ANGLE_SEPARATION {
                    continue 'outer;
                }
            }
        }
        ok = true;
        break;
    }
    if !ok {
        return Err(ChannelError::ConstraintSampling { attempts: MAX_ATTEMPTS });
    }

    ClusterParams::new(gains, angles)
}

use rand::RngExt as _;

/// Precomputed midpoint quadrature of the covariance integral: nodes over
/// `[-pi, pi]` and their steering vectors. Shared across all samples of a
/// scenario; immutable after construction.
pub struct SteeringGrid {
    antennas: usize,
    nodes: Vec<f64>,
    /// Row-major node-by-antenna steering values.
    steering: Vec<Complex64>,
}

impl SteeringGrid {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.quadrature_points;
        let m = cfg.antennas;
        let step = 2.0 * PI / n as f64;
        let mut nodes = Vec::with_capacity(n);
        let mut steering = Vec::with_capacity(n * m);
        for k in 0..n {
            let theta = -PI + (k as f64 + 0.5) * step;
            nodes.push(theta);
            let s = theta.sin();
            for a in 0..m {
                steering.push(Complex64::from_polar(1.0, PI * (a as f64) * s));
            }
        }
        Ok(Self { antennas: m, nodes, steering })
    }

    /// Quadrature covariance for one cluster draw, trace-normalized to `M`.
    pub fn covariance(&self, delta: &ClusterParams, angular_spread: f64) -> Result<HermitianCovariance> {
        let m = self.antennas;
        let n = self.nodes.len();
        // Mixture of Laplacian spectra; constants cancel in the trace
        // normalization but are kept for clarity.
        let mut weights = Vec::with_capacity(n);
        let mut total = 0.0;
        for &theta in &self.nodes {
            let mut g = 0.0;
            for (&p, &mu) in delta.gains().iter().zip(delta.angles()) {
                g += p * (-(theta - mu).abs() / angular_spread).exp() / (2.0 * angular_spread);
            }
            weights.push(g);
            total += g;
        }
        if !(total > 0.0) || !total.is_finite() {
            return Err(ChannelError::QuadratureUnderflow);
        }
        // tr(a a^H) = M, so weights summing to one give tr(C) = M exactly.
        for w in &mut weights {
            *w /= total;
        }
        let mut mat = DMatrix::<Complex64>::zeros(m, m);
        for (k, &w) in weights.iter().enumerate() {
            let a = &self.steering[k * m..(k + 1) * m];
            for i in 0..m {
                let wi = a[i] * w;
                for j in i..m {
                    mat[(i, j)] += wi * a[j].conj();
                }
            }
        }
        for i in 0..m {
            mat[(i, i)] = Complex64::new(mat[(i, i)].re, 0.0);
            for j in (i + 1)..m {
                mat[(j, i)] = mat[(i, j)].conj();
            }
        }
        Ok(HermitianCovariance::new(mat)?)
    }
}

/// Covariance of one cluster draw under the given scenario.
pub fn covariance_from_delta(delta: &ClusterParams, cfg: &ScenarioConfig) -> Result<HermitianCovariance> {
    SteeringGrid::new(cfg)?.covariance(delta, cfg.angular_spread)
}

/// Draws `h ~ CN(0, C)` through the eigendecomposition `C = V diag(l) V^H`,
/// clamping eigenvalues in `[-1e-10, 0)` to zero. Quadrature covariances are
/// often numerically rank-deficient, which rules out Cholesky here.
pub fn sample_channel<R: Rng>(cov: &HermitianCovariance, rng: &mut R) -> Result<Vec<Complex64>> {
    let (vals, vecs) = cov.psd_eigen()?;
    let m = cov.dim();
    let scale = (0.5f64).sqrt();
    let mut h = vec![Complex64::default(); m];
    for (k, &l) in vals.iter().enumerate() {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        let w = Complex64::new(re, im) * scale * l.sqrt();
        for i in 0..m {
            h[i] += vecs[(i, k)] * w;
        }
    }
    Ok(h)
}

/// Train/test marker carried by datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
}

/// A generated channel dataset: `N` complex `M`-vectors stored at the wire
/// precision (complex64, i.e. f32 pairs), the generating scenario, and
/// optionally the per-sample cluster draws for genie baselines.
#[derive(Debug, Clone)]
pub struct ChannelDataset {
    samples: Vec<Complex32>,
    config: ScenarioConfig,
    deltas: Option<Vec<ClusterParams>>,
    split: SplitTag,
}

impl ChannelDataset {
    pub(crate) fn from_parts(
        samples: Vec<Complex32>,
        config: ScenarioConfig,
        deltas: Option<Vec<ClusterParams>>,
        split: SplitTag,
    ) -> Result<Self> {
        if samples.is_empty() || config.antennas == 0 || samples.len() % config.antennas != 0 {
            return Err(ChannelError::InvalidConfig(
                "samples must be a nonempty multiple of the antenna count".into(),
            ));
        }
        let n = samples.len() / config.antennas;
        if let Some(d) = &deltas {
            if d.len() != n {
                return Err(ChannelError::InvalidConfig(format!(
                    "got {} cluster draws for {} samples",
                    d.len(),
                    n
                )));
            }
        }
        Ok(Self { samples, config, deltas, split })
    }

    pub fn len(&self) -> usize {
        self.samples.len() / self.config.antennas
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn antennas(&self) -> usize {
        self.config.antennas
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn deltas(&self) -> Option<&[ClusterParams]> {
        self.deltas.as_deref()
    }

    /// Sample `i` upcast to f64 precision.
    pub fn sample(&self, i: usize) -> Vec<Complex64> {
        let m = self.config.antennas;
        self.samples[i * m..(i + 1) * m]
            .iter()
            .map(|v| Complex64::new(v.re as f64, v.im as f64))
            .collect()
    }

    pub(crate) fn raw_samples(&self) -> &[Complex32] {
        &self.samples
    }
}

/// Generates `n` independent `(delta_i, h_i)` pairs. Sample `i` uses the
/// substreams `(seed, CLUSTER, i)` and `(seed, CHANNEL, i)`, so the result is
/// a pure function of `(cfg, n, seed)` no matter how the work is scheduled.
pub fn generate_dataset(
    cfg: &ScenarioConfig,
    n: usize,
    keep_deltas: bool,
    split: SplitTag,
) -> Result<ChannelDataset> {
    if n == 0 {
        return Err(ChannelError::InvalidConfig("sample count must be positive".into()));
    }
    let grid = SteeringGrid::new(cfg)?;
    let m = cfg.antennas;
    let results: Vec<Result<(Vec<Complex32>, Option<ClusterParams>)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng_delta = substream(cfg.seed, domain::CLUSTER, i as u64);
            let delta = sample_delta(&mut rng_delta, cfg.clusters)?;
            let cov = grid.covariance(&delta, cfg.angular_spread)?;
            let mut rng_h = substream(cfg.seed, domain::CHANNEL, i as u64);
            let h = sample_channel(&cov, &mut rng_h)?;
            let quantized: Vec<Complex32> = h
                .iter()
                .map(|v| Complex32::new(v.re as f32, v.im as f32))
                .collect();
            Ok((quantized, keep_deltas.then_some(delta)))
        })
        .collect();

    let mut samples = Vec::with_capacity(n * m);
    let mut deltas = keep_deltas.then(|| Vec::with_capacity(n));
    for r in results {
        let (h, d) = r?;
        samples.extend_from_slice(&h);
        if let (Some(list), Some(d)) = (deltas.as_mut(), d) {
            list.push(d);
        }
    }
    ChannelDataset::from_parts(samples, *cfg, deltas, split)
}

/// Noisy observations of a dataset at one target SNR, with the per-sample
/// noise variances that realized it.
#[derive(Debug, Clone)]
pub struct ObservationBatch {
    observations: Vec<Complex64>,
    noise_variances: Vec<f64>,
    snr_db: f64,
    antennas: usize,
}

impl ObservationBatch {
    pub fn len(&self) -> usize {
        self.noise_variances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noise_variances.is_empty()
    }

    pub fn snr_db(&self) -> f64 {
        self.snr_db
    }

    pub fn observation(&self, i: usize) -> &[Complex64] {
        &self.observations[i * self.antennas..(i + 1) * self.antennas]
    }

    pub fn noise_variance(&self, i: usize) -> f64 {
        self.noise_variances[i]
    }
}

/// Observes every channel in the dataset at the target SNR:
/// `variance_i = ||h_i||^2 / (M * 10^(snr_db/10))` and
/// `y_i = h_i + n_i` with circularly-symmetric white noise. Sample `i` draws
/// from substream `(seed, OBSERVE, i)`. `snr_db = +inf` forces zero noise.
pub fn observe(dataset: &ChannelDataset, snr_db: f64, seed: u64) -> Result<ObservationBatch> {
    if snr_db.is_nan() {
        return Err(ChannelError::InvalidConfig("snr_db must not be NaN".into()));
    }
    let m = dataset.antennas();
    let n = dataset.len();
    let linear = 10f64.powf(snr_db / 10.0);
    let mut observations = Vec::with_capacity(n * m);
    let mut noise_variances = Vec::with_capacity(n);
    for i in 0..n {
        let h = dataset.sample(i);
        let energy: f64 = h.iter().map(|v| v.norm_sqr()).sum();
        if energy == 0.0 {
            return Err(ChannelError::DegenerateSample { index: i });
        }
        let variance = energy / (m as f64 * linear);
        let std = (variance / 2.0).sqrt();
        let mut rng = substream(seed, domain::OBSERVE, i as u64);
        for &hv in &h {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            observations.push(hv + Complex64::new(re * std, im * std));
        }
        noise_variances.push(variance);
    }
    Ok(ObservationBatch { observations, noise_variances, snr_db, antennas: m })
}
