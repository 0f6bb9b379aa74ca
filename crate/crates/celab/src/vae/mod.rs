//! Variational autoencoder over Fourier-transformed channels.
//!
//! The encoder maps a channel (stacked real/imaginary parts, `2M` reals) to a
//! diagonal Gaussian over the latent space; the decoder maps a latent vector
//! to the conditional moments of a complex Gaussian: a mean `m(z)` and a
//! positive covariance spectrum `c(z)`. Training maximizes the ELBO
//! (complex-Gaussian reconstruction likelihood plus closed-form KL to the
//! standard normal prior) with Adam and per-dimension free bits.
//!
//! Three training variants differ only in what feeds the encoder and the
//! likelihood:
//!
//! * `genie`  - encoder and likelihood both see the true channel `F h`.
//! * `noisy`  - encoder sees the observation `F y`, likelihood sees `F h`.
//! * `real`   - encoder and likelihood both see `F y`; the likelihood runs on
//!   `c(z) + noise_variance` so the decoder is forced to learn the channel
//!   covariance while never seeing a clean channel.

mod adam;
mod net;
mod network;

pub use network::Architecture;

use crate::channel::ChannelDataset;
use crate::container::{self, Container, ContainerError, TensorEntry};
use crate::rng::{domain, substream};
use crate::spectral::UnitaryDft;
use adam::Adam;
use net::Feat;
use network::Network;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::f64::consts::PI;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum VaeError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid variance: {0}")]
    InvalidVariance(String),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("numerical failure in {term}")]
    NumericalFailure { term: String },
    #[error("training diverged at epoch {epoch}")]
    TrainingFailure { epoch: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Spectral(#[from] crate::spectral::SpectralError),
}

pub type Result<T> = std::result::Result<T, VaeError>;

/// Which data the VAE sees during training and estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Genie,
    Noisy,
    Real,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Genie => "genie",
            Variant::Noisy => "noisy",
            Variant::Real => "real",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "genie" => Ok(Variant::Genie),
            "noisy" => Ok(Variant::Noisy),
            "real" => Ok(Variant::Real),
            other => Err(format!("unknown variant '{other}' (expected genie|noisy|real)")),
        }
    }
}

/// Training hyperparameters. Defaults: learning rate 1e-4, free bits 0.1
/// nats per latent dimension, one Monte-Carlo sample, latent dimension 16.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Training SNR for the noisy/real variants; ignored by genie.
    pub snr_db: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub free_bits_lambda: f64,
    /// Monte-Carlo samples K per ELBO evaluation.
    pub mc_samples: usize,
    pub seed: u64,
    pub latent_dim: usize,
}

impl TrainConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            snr_db: 10.0,
            learning_rate: 1e-4,
            epochs: 50,
            batch_size: 128,
            free_bits_lambda: 0.1,
            mc_samples: 1,
            seed: 0,
            latent_dim: 16,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(VaeError::Configuration("learning_rate must be positive".into()));
        }
        if self.mc_samples == 0 {
            return Err(VaeError::Configuration("mc_samples must be at least 1".into()));
        }
        if self.free_bits_lambda < 0.0 {
            return Err(VaeError::Configuration("free_bits_lambda must be nonnegative".into()));
        }
        if self.latent_dim == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(VaeError::Configuration(
                "latent_dim, batch_size and epochs must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Decoder outputs: Fourier-domain conditional mean and covariance spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMoments {
    pub mean: Vec<Complex64>,
    pub spectrum: Vec<f64>,
}

/// A reparameterized latent draw together with the noise that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z: Vec<f64>,
    pub epsilon: Vec<f64>,
}

/// Loss decomposition: reconstruction negative log-likelihood and raw
/// (unclamped) KL.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub nll: f64,
    pub kl: f64,
}

/// Clamp bounds for the encoder standard deviation and decoder spectrum.
pub const CLAMP_MIN: f64 = 1e-6;
pub const CLAMP_MAX: f64 = 1e6;

/// `clamp(exp(v))` and its derivative w.r.t. `v` (zero outside the clamp).
fn clamp_exp(v: f64) -> (f64, f64) {
    let e = v.exp();
    if e <= CLAMP_MIN {
        (CLAMP_MIN, 0.0)
    } else if e >= CLAMP_MAX {
        (CLAMP_MAX, 0.0)
    } else {
        (e, e)
    }
}

fn stack_complex(x: &[Complex64], out: &mut Vec<f64>) {
    for v in x {
        out.push(v.re);
    }
    for v in x {
        out.push(v.im);
    }
}

fn all_finite(x: &[Complex64]) -> bool {
    x.iter().all(|v| v.re.is_finite() && v.im.is_finite())
}

/// The trained (or trainable) model: network parameters, the configuration
/// they were trained under, and the per-epoch held-out ELBO history.
#[derive(Debug, Clone)]
pub struct VaeModel {
    net: Network,
    config: TrainConfig,
    arch: Architecture,
    antennas: usize,
    history: Vec<f64>,
    dft: UnitaryDft,
}

impl VaeModel {
    /// Freshly initialized model (fan-in-scaled uniform weights drawn from
    /// the config seed).
    pub fn new(antennas: usize, arch: Architecture, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if antennas == 0 {
            return Err(VaeError::Configuration("antennas must be positive".into()));
        }
        let net = Network::new(antennas, config.latent_dim, &arch, config.seed)
            .map_err(VaeError::Configuration)?;
        let dft = UnitaryDft::new(antennas)?;
        Ok(Self { net, config, arch, antennas, history: Vec::new(), dft })
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    /// Per-epoch held-out ELBO recorded by [`train`].
    pub fn history(&self) -> &[f64] {
        &self.history
    }

    pub fn dft(&self) -> &UnitaryDft {
        &self.dft
    }

    /// Total trainable parameter count.
    pub fn param_count(&self) -> usize {
        self.net.clone().param_count()
    }

    /// All trainable parameters flattened in visitation order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.net.clone().flat_params()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        self.net.set_flat_params(flat);
    }

    /// Encoder pass in inference mode: `x` is the Fourier-domain input,
    /// returned are the latent mean and the clamped standard deviation.
    pub fn encode(&self, x: &[Complex64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != self.antennas {
            return Err(VaeError::DimensionMismatch { expected: self.antennas, got: x.len() });
        }
        if !all_finite(x) {
            return Err(VaeError::InvalidInput("non-finite encoder input".into()));
        }
        let mut row = Vec::with_capacity(2 * self.antennas);
        stack_complex(x, &mut row);
        let feat = Feat::from_rows(&[row]);
        let (mu, ls) = self.net.encode_infer(&feat);
        let sigma: Vec<f64> = ls.data.iter().map(|&v| clamp_exp(v).0).collect();
        Ok((mu.data, sigma))
    }

    /// Decoder pass in inference mode (running batch-norm statistics).
    pub fn decode(&self, z: &[f64]) -> Result<ConditionalMoments> {
        if z.len() != self.config.latent_dim {
            return Err(VaeError::DimensionMismatch {
                expected: self.config.latent_dim,
                got: z.len(),
            });
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(VaeError::InvalidInput("non-finite latent input".into()));
        }
        let feat = Feat { data: z.to_vec(), batch: 1, ch: z.len(), len: 1 };
        let (mh, lc) = self.net.decode_infer(&feat);
        let m = self.antennas;
        let mean: Vec<Complex64> =
            (0..m).map(|i| Complex64::new(mh.data[i], mh.data[m + i])).collect();
        let spectrum: Vec<f64> = lc.data.iter().map(|&v| clamp_exp(v).0).collect();
        Ok(ConditionalMoments { mean, spectrum })
    }
}

/// `z = mu + sigma .* epsilon`, elementwise.
pub fn reparameterize(mu: &[f64], sigma: &[f64], epsilon: &[f64]) -> Result<LatentSample> {
    if mu.len() != sigma.len() || mu.len() != epsilon.len() {
        return Err(VaeError::DimensionMismatch { expected: mu.len(), got: sigma.len().max(epsilon.len()) });
    }
    let z = mu
        .iter()
        .zip(sigma)
        .zip(epsilon)
        .map(|((&m, &s), &e)| m + s * e)
        .collect();
    Ok(LatentSample { z, epsilon: epsilon.to_vec() })
}

/// Complex-Gaussian negative log-likelihood with diagonal covariance:
/// `sum_i [log pi + log c_i + |x_i - m_i|^2 / c_i]`.
pub fn gaussian_nll(x: &[Complex64], m: &[Complex64], c: &[f64]) -> Result<f64> {
    if x.len() != m.len() || x.len() != c.len() {
        return Err(VaeError::DimensionMismatch { expected: x.len(), got: m.len().min(c.len()) });
    }
    let mut acc = 0.0;
    for ((xi, mi), &ci) in x.iter().zip(m).zip(c) {
        if !(ci > 0.0) {
            return Err(VaeError::InvalidVariance(format!("spectrum entry {ci} not positive")));
        }
        acc += PI.ln() + ci.ln() + (xi - mi).norm_sqr() / ci;
    }
    Ok(acc)
}

/// KL divergence from `N(mu, diag(sigma_sq))` to `N(0, I)`:
/// `0.5 * (sum_l [-log sigma_sq_l + mu_l^2 + sigma_sq_l] - L)`.
pub fn kl_diag_standard(mu: &[f64], sigma_sq: &[f64]) -> Result<f64> {
    if mu.len() != sigma_sq.len() {
        return Err(VaeError::DimensionMismatch { expected: mu.len(), got: sigma_sq.len() });
    }
    let mut acc = 0.0;
    for (&m, &s2) in mu.iter().zip(sigma_sq) {
        if !(s2 > 0.0) {
            return Err(VaeError::InvalidVariance(format!("variance {s2} not positive")));
        }
        acc += -s2.ln() + m * m + s2;
    }
    Ok(0.5 * (acc - mu.len() as f64))
}

/// Free-bits objective: `sum_l max(kl_l, lambda)` (per-dimension clamp).
pub fn free_bits(kl_per_dim: &[f64], lambda: f64) -> f64 {
    kl_per_dim.iter().map(|&k| k.max(lambda)).sum()
}

/// One training example, in the antenna domain. Which fields are required
/// depends on the variant: genie needs `channel`, noisy needs `channel` and
/// `observation`, real needs `observation` and `noise_variance`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ElboSample<'a> {
    pub channel: Option<&'a [Complex64]>,
    pub observation: Option<&'a [Complex64]>,
    pub noise_variance: Option<f64>,
}

/// A batch of training examples (parallel slices).
#[derive(Debug, Clone, Copy, Default)]
pub struct ElboBatch<'a> {
    pub channels: Option<&'a [Vec<Complex64>]>,
    pub observations: Option<&'a [Vec<Complex64>]>,
    pub noise_variances: Option<&'a [f64]>,
}

/// Encoder input, likelihood target and per-sample spectrum offset for one
/// assembled batch, all in the Fourier domain.
struct BatchData {
    enc_in: Feat,
    /// Flattened `B x M` Fourier-domain targets.
    target: Vec<Complex64>,
    /// Added to `c(z)` in the likelihood (the real variant's noise floor).
    extra_var: Vec<f64>,
}

fn require<'a, T: ?Sized>(opt: Option<&'a T>, what: &str, variant: Variant) -> Result<&'a T> {
    opt.ok_or_else(|| {
        VaeError::Configuration(format!("variant {variant} requires {what}"))
    })
}

fn assemble_batch(
    variant: Variant,
    batch: &ElboBatch<'_>,
    dft: &UnitaryDft,
    m: usize,
) -> Result<BatchData> {
    let (enc_src, target_src): (&[Vec<Complex64>], &[Vec<Complex64>]) = match variant {
        Variant::Genie => {
            let h = require(batch.channels, "true channels", variant)?;
            (h, h)
        }
        Variant::Noisy => {
            let h = require(batch.channels, "true channels", variant)?;
            let y = require(batch.observations, "observations", variant)?;
            if h.len() != y.len() {
                return Err(VaeError::DimensionMismatch { expected: h.len(), got: y.len() });
            }
            (y, h)
        }
        Variant::Real => {
            let y = require(batch.observations, "observations", variant)?;
            (y, y)
        }
    };
    let b = enc_src.len();
    if b == 0 {
        return Err(VaeError::InvalidInput("empty batch".into()));
    }
    let extra_var: Vec<f64> = match variant {
        Variant::Real => {
            let v = require(batch.noise_variances, "noise variances", variant)?;
            if v.len() != b {
                return Err(VaeError::DimensionMismatch { expected: b, got: v.len() });
            }
            if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(VaeError::InvalidVariance("negative noise variance".into()));
            }
            v.to_vec()
        }
        _ => vec![0.0; b],
    };

    let mut rows = Vec::with_capacity(b);
    let mut target = Vec::with_capacity(b * m);
    for i in 0..b {
        if enc_src[i].len() != m || target_src[i].len() != m {
            return Err(VaeError::DimensionMismatch { expected: m, got: enc_src[i].len() });
        }
        if !all_finite(&enc_src[i]) || !all_finite(&target_src[i]) {
            return Err(VaeError::InvalidInput(format!("non-finite input in sample {i}")));
        }
        let xe = dft.forward(&enc_src[i])?;
        let mut row = Vec::with_capacity(2 * m);
        stack_complex(&xe, &mut row);
        rows.push(row);
        if std::ptr::eq(enc_src, target_src) {
            target.extend(xe);
        } else {
            target.extend(dft.forward(&target_src[i])?);
        }
    }
    Ok(BatchData { enc_in: Feat::from_rows(&rows), target, extra_var })
}

/// Forward (and optionally backward) pass over an assembled batch.
///
/// `eps` supplies the reparameterization draws, laid out `[k][b][l]`. With
/// `with_grads`, gradients of the mean batch loss are accumulated into the
/// network (after zeroing). `training` selects batch-statistics mode for the
/// normalization layers.
fn batch_pass(
    net: &mut Network,
    m: usize,
    latent: usize,
    mc_samples: usize,
    lambda: f64,
    data: &BatchData,
    eps: &[f64],
    training: bool,
    with_grads: bool,
) -> Result<(f64, LossParts)> {
    let b = data.enc_in.batch;
    let k_total = mc_samples;
    if eps.len() != k_total * b * latent {
        return Err(VaeError::DimensionMismatch {
            expected: k_total * b * latent,
            got: eps.len(),
        });
    }
    if with_grads {
        net.zero_grads();
    }
    let inv_b = 1.0 / b as f64;
    let inv_k = 1.0 / k_total as f64;

    let (mu, ls) = net.encode_forward(&data.enc_in, training);
    let mut sigma = vec![0.0; b * latent];
    let mut dsigma_dv = vec![0.0; b * latent];
    for i in 0..b * latent {
        let (s, ds) = clamp_exp(ls.data[i]);
        sigma[i] = s;
        dsigma_dv[i] = ds;
    }

    let mut d_mu = Feat::zeros(b, latent, 1);
    let mut d_ls = Feat::zeros(b, latent, 1);
    let mut nll_total = 0.0;

    for k in 0..k_total {
        let eps_k = &eps[k * b * latent..(k + 1) * b * latent];
        let mut z = Feat::zeros(b, latent, 1);
        for i in 0..b * latent {
            z.data[i] = mu.data[i] + sigma[i] * eps_k[i];
        }
        let (mh, lc) = net.decode_forward(&z, training);

        let mut d_mh = Feat::zeros(b, 2 * m, 1);
        let mut d_lc = Feat::zeros(b, m, 1);
        for bi in 0..b {
            let mrow = mh.sample(bi);
            let crow = lc.sample(bi);
            let extra = data.extra_var[bi];
            let x = &data.target[bi * m..(bi + 1) * m];
            let mut nll = 0.0;
            for i in 0..m {
                let (c_raw, dc_dv) = clamp_exp(crow[i]);
                let c = c_raw + extra;
                let d = x[i] - Complex64::new(mrow[i], mrow[m + i]);
                let q = d.norm_sqr();
                nll += PI.ln() + c.ln() + q / c;
                if with_grads {
                    let scale = inv_k * inv_b;
                    d_mh.sample_mut(bi)[i] = -2.0 * d.re / c * scale;
                    d_mh.sample_mut(bi)[m + i] = -2.0 * d.im / c * scale;
                    d_lc.sample_mut(bi)[i] = (1.0 / c - q / (c * c)) * dc_dv * scale;
                }
            }
            nll_total += nll * inv_k;
        }
        if with_grads {
            let dz = net.decoder_backward(&d_mh, &d_lc);
            for i in 0..b * latent {
                d_mu.data[i] += dz.data[i];
                d_ls.data[i] += dz.data[i] * eps_k[i] * dsigma_dv[i];
            }
        }
    }

    let mut kl_raw_total = 0.0;
    let mut kl_fb_total = 0.0;
    for bi in 0..b {
        for l in 0..latent {
            let i = bi * latent + l;
            let mv = mu.data[i];
            let s = sigma[i];
            let s2 = s * s;
            let kl = 0.5 * (-s2.ln() + mv * mv + s2 - 1.0);
            kl_raw_total += kl;
            kl_fb_total += kl.max(lambda);
            if with_grads && kl > lambda {
                d_mu.data[i] += mv * inv_b;
                d_ls.data[i] += (s2 - 1.0) * if dsigma_dv[i] > 0.0 { 1.0 } else { 0.0 } * inv_b;
            }
        }
    }
    if with_grads {
        net.encoder_backward(&d_mu, &d_ls);
    }

    let nll = nll_total * inv_b;
    let kl_raw = kl_raw_total * inv_b;
    let loss = nll + kl_fb_total * inv_b;
    if !loss.is_finite() {
        let term = if nll.is_finite() { "kl" } else { "nll" };
        return Err(VaeError::NumericalFailure { term: term.into() });
    }
    Ok((loss, LossParts { nll, kl: kl_raw }))
}

fn draw_eps<R: Rng>(rng: &mut R, count: usize) -> Vec<f64> {
    (0..count).map(|_| StandardNormal.sample(rng)).collect()
}

/// ELBO-based loss for a single example under the model's variant, evaluated
/// with frozen normalization statistics. The reparameterization draws come
/// from `rng` (K per evaluation). Returns the loss (negative ELBO with free
/// bits) and its parts; `parts.kl` is the raw, unclamped KL.
pub fn elbo_loss<R: Rng>(
    model: &VaeModel,
    sample: &ElboSample<'_>,
    rng: &mut R,
) -> Result<(f64, LossParts)> {
    let cfg = &model.config;
    let m = model.antennas;
    let channels_store;
    let obs_store;
    let batch = ElboBatch {
        channels: match sample.channel {
            Some(h) => {
                channels_store = [h.to_vec()];
                Some(&channels_store[..])
            }
            None => None,
        },
        observations: match sample.observation {
            Some(y) => {
                obs_store = [y.to_vec()];
                Some(&obs_store[..])
            }
            None => None,
        },
        noise_variances: sample.noise_variance.as_ref().map(std::slice::from_ref),
    };
    let data = assemble_batch(cfg.variant, &batch, &model.dft, m)?;
    let eps = draw_eps(rng, cfg.mc_samples * cfg.latent_dim);
    let mut net = model.net.clone();
    batch_pass(
        &mut net,
        m,
        cfg.latent_dim,
        cfg.mc_samples,
        cfg.free_bits_lambda,
        &data,
        &eps,
        false,
        false,
    )
}

/// Mean batch loss with explicit reparameterization draws (`[k][b][l]`) and
/// frozen normalization statistics. This is the finite-difference target for
/// [`gradients`].
pub fn batch_loss(model: &mut VaeModel, batch: &ElboBatch<'_>, eps: &[f64]) -> Result<f64> {
    let cfg = model.config.clone();
    let data = assemble_batch(cfg.variant, batch, &model.dft, model.antennas)?;
    let (loss, _) = batch_pass(
        &mut model.net,
        model.antennas,
        cfg.latent_dim,
        cfg.mc_samples,
        cfg.free_bits_lambda,
        &data,
        eps,
        false,
        false,
    )?;
    Ok(loss)
}

/// Gradient of the mean batch loss for every trainable parameter, flattened
/// in the model's visitation order. Normalization statistics are frozen and
/// the reparameterization draws are supplied explicitly, so the result is
/// exactly the derivative of [`batch_loss`] at fixed `eps`.
pub fn gradients(model: &mut VaeModel, batch: &ElboBatch<'_>, eps: &[f64]) -> Result<Vec<f64>> {
    let cfg = model.config.clone();
    let data = assemble_batch(cfg.variant, batch, &model.dft, model.antennas)?;
    batch_pass(
        &mut model.net,
        model.antennas,
        cfg.latent_dim,
        cfg.mc_samples,
        cfg.free_bits_lambda,
        &data,
        eps,
        false,
        true,
    )?;
    Ok(model.net.flat_grads())
}

/// Summary of a training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Held-out ELBO after each epoch.
    pub history: Vec<f64>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

/// Trains the model on the dataset with Adam, shuffled mini-batches and a 5%
/// held-out slice for model selection; the parameters with the highest
/// held-out ELBO are kept. For the noisy/real variants, fresh observations
/// are drawn every epoch at `config.snr_db`. Deterministic given the config
/// seed.
pub fn train(model: &mut VaeModel, dataset: &ChannelDataset) -> Result<TrainReport> {
    let cfg = model.config.clone();
    cfg.validate()?;
    let m = model.antennas;
    if dataset.antennas() != m {
        return Err(VaeError::DimensionMismatch { expected: m, got: dataset.antennas() });
    }
    let n = dataset.len();
    if n == 0 {
        return Err(VaeError::InvalidInput("empty training dataset".into()));
    }

    let channels: Vec<Vec<Complex64>> = (0..n).map(|i| dataset.sample(i)).collect();
    let linear = 10f64.powf(cfg.snr_db / 10.0);
    let noise_vars: Vec<f64> = channels
        .iter()
        .map(|h| h.iter().map(|v| v.norm_sqr()).sum::<f64>() / (m as f64 * linear))
        .collect();

    let n_hold = if n >= 2 { ((n as f64) * 0.05).round().max(1.0) as usize } else { 0 };
    let n_hold = n_hold.min(n - 1);
    let n_train = n - n_hold;
    let train_idx: Vec<usize> = (0..n_train).collect();
    let hold_idx: Vec<usize> = if n_hold > 0 { (n_train..n).collect() } else { vec![0] };

    // Fixed held-out inputs: one observation draw and one epsilon set, reused
    // every epoch so the selection metric is comparable across epochs.
    let needs_obs = cfg.variant != Variant::Genie;
    let hold_channels: Vec<Vec<Complex64>> =
        hold_idx.iter().map(|&i| channels[i].clone()).collect();
    let hold_vars: Vec<f64> = hold_idx.iter().map(|&i| noise_vars[i]).collect();
    let hold_obs: Option<Vec<Vec<Complex64>>> = needs_obs.then(|| {
        let mut rng = substream(cfg.seed, domain::EVAL, 0);
        hold_idx
            .iter()
            .map(|&i| {
                let std = (noise_vars[i] / 2.0).sqrt();
                channels[i]
                    .iter()
                    .map(|&hv| {
                        let re: f64 = StandardNormal.sample(&mut rng);
                        let im: f64 = StandardNormal.sample(&mut rng);
                        hv + Complex64::new(re * std, im * std)
                    })
                    .collect()
            })
            .collect()
    });
    let hold_eps = {
        let mut rng = substream(cfg.seed, domain::EVAL, 1);
        draw_eps(&mut rng, cfg.mc_samples * hold_idx.len() * cfg.latent_dim)
    };
    let hold_batch_data = assemble_batch(
        cfg.variant,
        &ElboBatch {
            channels: Some(&hold_channels),
            observations: hold_obs.as_deref(),
            noise_variances: Some(&hold_vars),
        },
        &model.dft,
        m,
    )?;

    let mut adam = Adam::new(cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Vec<f64>, Vec<f64>, usize)> = None;

    let mut order = train_idx.clone();
    for epoch in 0..cfg.epochs {
        // Fresh observations for this epoch (noisy/real variants).
        let epoch_obs: Option<Vec<Vec<Complex64>>> = needs_obs.then(|| {
            let mut rng = substream(cfg.seed, domain::TRAIN_NOISE, epoch as u64);
            train_idx
                .iter()
                .map(|&i| {
                    let std = (noise_vars[i] / 2.0).sqrt();
                    channels[i]
                        .iter()
                        .map(|&hv| {
                            let re: f64 = StandardNormal.sample(&mut rng);
                            let im: f64 = StandardNormal.sample(&mut rng);
                            hv + Complex64::new(re * std, im * std)
                        })
                        .collect()
                })
                .collect()
        });

        let mut shuffle_rng = substream(cfg.seed, domain::SHUFFLE, epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut eps_rng = substream(cfg.seed, domain::EPSILON, epoch as u64);

        for chunk in order.chunks(cfg.batch_size) {
            let batch_channels: Vec<Vec<Complex64>> =
                chunk.iter().map(|&i| channels[i].clone()).collect();
            let batch_obs: Option<Vec<Vec<Complex64>>> = epoch_obs
                .as_ref()
                .map(|obs| chunk.iter().map(|&i| obs[i].clone()).collect());
            let batch_vars: Vec<f64> = chunk.iter().map(|&i| noise_vars[i]).collect();
            let data = assemble_batch(
                cfg.variant,
                &ElboBatch {
                    channels: Some(&batch_channels),
                    observations: batch_obs.as_deref(),
                    noise_variances: Some(&batch_vars),
                },
                &model.dft,
                m,
            )?;
            let eps = draw_eps(&mut eps_rng, cfg.mc_samples * chunk.len() * cfg.latent_dim);
            let pass = batch_pass(
                &mut model.net,
                m,
                cfg.latent_dim,
                cfg.mc_samples,
                cfg.free_bits_lambda,
                &data,
                &eps,
                true,
                true,
            );
            match pass {
                Ok(_) => adam.step(&mut model.net),
                Err(VaeError::NumericalFailure { .. }) => {
                    return Err(VaeError::TrainingFailure { epoch })
                }
                Err(e) => return Err(e),
            }
        }

        let (_, parts) = batch_pass(
            &mut model.net,
            m,
            cfg.latent_dim,
            cfg.mc_samples,
            cfg.free_bits_lambda,
            &hold_batch_data,
            &hold_eps,
            false,
            false,
        )?;
        let elbo = -(parts.nll + parts.kl);
        history.push(elbo);
        if best.as_ref().is_none_or(|(b, _, _, _)| elbo > *b) {
            best = Some((elbo, model.net.flat_params(), model.net.flat_state(), epoch));
        }
    }

    let (_, params, state, best_epoch) = best.expect("at least one epoch ran");
    model.net.set_flat_params(&params);
    model.net.set_flat_state(&state);
    model.history = history.clone();
    Ok(TrainReport { history, best_epoch })
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

const VAE_MAGIC: &[u8; 4] = b"CVAE";

/// Config block layout (within the `"CVAE"` container): variant u8,
/// snr_db f64, learning_rate f64, epochs u32, batch_size u32, free_bits f64,
/// mc_samples u32, seed u64, latent u32, antennas u32, arch tag u8
/// (0 = dense, 1 = conv), then `hidden u32` for dense or
/// `c0 u32, c1 u32, c2 u32, kernel u32` for conv. Little-endian.
fn encode_config(cfg: &TrainConfig, arch: &Architecture, antennas: usize) -> Vec<u8> {
    let mut out = Vec::new();
    out.push(match cfg.variant {
        Variant::Genie => 0u8,
        Variant::Noisy => 1,
        Variant::Real => 2,
    });
    out.extend_from_slice(&cfg.snr_db.to_le_bytes());
    out.extend_from_slice(&cfg.learning_rate.to_le_bytes());
    out.extend_from_slice(&(cfg.epochs as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.batch_size as u32).to_le_bytes());
    out.extend_from_slice(&cfg.free_bits_lambda.to_le_bytes());
    out.extend_from_slice(&(cfg.mc_samples as u32).to_le_bytes());
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    out.extend_from_slice(&(cfg.latent_dim as u32).to_le_bytes());
    out.extend_from_slice(&(antennas as u32).to_le_bytes());
    match arch {
        Architecture::Dense { hidden } => {
            out.push(0);
            out.extend_from_slice(&(*hidden as u32).to_le_bytes());
        }
        Architecture::Conv { channels, kernel } => {
            out.push(1);
            for c in channels {
                out.extend_from_slice(&(*c as u32).to_le_bytes());
            }
            out.extend_from_slice(&(*kernel as u32).to_le_bytes());
        }
    }
    out
}

struct ConfigReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl ConfigReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.data.len() {
            return Err(VaeError::Checkpoint("config block truncated".into()));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8v(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32v(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64v(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64v(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_config(data: &[u8]) -> Result<(TrainConfig, Architecture, usize)> {
    let mut r = ConfigReader { data, pos: 0 };
    let variant = match r.u8v()? {
        0 => Variant::Genie,
        1 => Variant::Noisy,
        2 => Variant::Real,
        other => return Err(VaeError::Checkpoint(format!("unknown variant tag {other}"))),
    };
    let snr_db = r.f64v()?;
    let learning_rate = r.f64v()?;
    let epochs = r.u32v()? as usize;
    let batch_size = r.u32v()? as usize;
    let free_bits_lambda = r.f64v()?;
    let mc_samples = r.u32v()? as usize;
    let seed = r.u64v()?;
    let latent_dim = r.u32v()? as usize;
    let antennas = r.u32v()? as usize;
    let arch = match r.u8v()? {
        0 => Architecture::Dense { hidden: r.u32v()? as usize },
        1 => {
            let c0 = r.u32v()? as usize;
            let c1 = r.u32v()? as usize;
            let c2 = r.u32v()? as usize;
            let kernel = r.u32v()? as usize;
            Architecture::Conv { channels: [c0, c1, c2], kernel }
        }
        other => return Err(VaeError::Checkpoint(format!("unknown architecture tag {other}"))),
    };
    if r.pos != data.len() {
        return Err(VaeError::Checkpoint("trailing bytes in config block".into()));
    }
    Ok((
        TrainConfig {
            variant,
            snr_db,
            learning_rate,
            epochs,
            batch_size,
            free_bits_lambda,
            mc_samples,
            seed,
            latent_dim,
        },
        arch,
        antennas,
    ))
}

/// Writes a bit-exact checkpoint: config, all parameters, batch-norm running
/// statistics, and the training history.
pub fn save_model<P: AsRef<Path>>(model: &VaeModel, path: P) -> Result<()> {
    let mut tensors = model.net.export_tensors();
    tensors.push(TensorEntry::new(
        "history.elbo",
        vec![model.history.len() as u32],
        model.history.clone(),
    ));
    let c = Container {
        config: encode_config(&model.config, &model.arch, model.antennas),
        tensors,
    };
    container::write_container(path, VAE_MAGIC, &c)?;
    Ok(())
}

/// Loads a checkpoint written by [`save_model`].
pub fn load_model<P: AsRef<Path>>(path: P) -> Result<VaeModel> {
    let c = container::read_container(path, VAE_MAGIC)?;
    let (config, arch, antennas) = decode_config(&c.config)?;
    let mut model = VaeModel::new(antennas, arch, config)?;
    model.net.import_tensors(&c).map_err(VaeError::Checkpoint)?;
    model.history = c
        .tensor("history.elbo")
        .ok_or_else(|| VaeError::Checkpoint("missing tensor history.elbo".into()))?
        .data
        .clone();
    Ok(model)
}

#[cfg(test)]
mod tests;
