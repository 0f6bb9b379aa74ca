use super::*;
use crate::channel::{generate_dataset, ScenarioConfig, SplitTag};
use crate::rng::{domain, substream};
use approx::assert_relative_eq;
use proptest::prelude::*;

fn tiny_dense_model(m: usize, latent: usize, variant: Variant, seed: u64) -> VaeModel {
    let mut cfg = TrainConfig::new(variant);
    cfg.latent_dim = latent;
    cfg.seed = seed;
    VaeModel::new(m, Architecture::Dense { hidden: 6 }, cfg).unwrap()
}

fn random_complex(m: usize, seed: u64, idx: u64) -> Vec<Complex64> {
    use rand::RngExt;
    let mut rng = substream(seed, domain::CHANNEL, idx);
    (0..m)
        .map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
        .collect()
}

#[test]
fn reparameterize_arithmetic() {
    let z = reparameterize(&[1.0, -2.0], &[3.0, 0.5], &[0.0, 0.0]).unwrap();
    assert_eq!(z.z, vec![1.0, -2.0]);
    let z = reparameterize(&[1.0], &[0.0], &[7.5]).unwrap();
    assert_eq!(z.z, vec![1.0]);
    let z = reparameterize(&[1.0], &[2.0], &[0.5]).unwrap();
    assert_eq!(z.z, vec![2.0]);
    assert!(reparameterize(&[1.0], &[1.0, 2.0], &[0.0]).is_err());
}

#[test]
fn nll_closed_form_values() {
    let x = [Complex64::new(0.3, -0.4)];
    let v = gaussian_nll(&x, &x, &[1.0]).unwrap();
    assert_relative_eq!(v, PI.ln(), epsilon = 1e-12);
    assert_relative_eq!(v, 1.1447298858, epsilon = 1e-9);

    let m = [Complex64::new(-0.7, -0.4)];
    let v = gaussian_nll(&x, &m, &[1.0]).unwrap();
    assert_relative_eq!(v, PI.ln() + 1.0, epsilon = 1e-12);

    // Large spectrum: the log term dominates, the quadratic term vanishes.
    let big = gaussian_nll(&x, &m, &[1e9]).unwrap();
    assert_relative_eq!(big, PI.ln() + (1e9f64).ln() + 1e-9, epsilon = 1e-9);
    assert!(gaussian_nll(&x, &m, &[0.0]).is_err());
}

#[test]
fn kl_closed_form_values() {
    assert_relative_eq!(kl_diag_standard(&[0.0; 5], &[1.0; 5]).unwrap(), 0.0, epsilon = 1e-15);
    assert_relative_eq!(kl_diag_standard(&[1.0], &[1.0]).unwrap(), 0.5, epsilon = 1e-15);
    assert_relative_eq!(
        kl_diag_standard(&[0.0], &[4.0]).unwrap(),
        0.5 * (-(4.0f64).ln() + 4.0 - 1.0),
        epsilon = 1e-12
    );
    assert_relative_eq!(kl_diag_standard(&[0.0], &[4.0]).unwrap(), 0.806853, epsilon = 1e-6);
    assert!(kl_diag_standard(&[0.0], &[0.0]).is_err());
}

#[test]
fn free_bits_clamping() {
    assert_relative_eq!(free_bits(&[0.2, 0.7], 0.0), 0.9, epsilon = 1e-15);
    assert_relative_eq!(free_bits(&[0.2], 0.5), 0.5, epsilon = 1e-15);
    assert_relative_eq!(free_bits(&[0.9], 0.5), 0.9, epsilon = 1e-15);
}

proptest! {
    #[test]
    fn kl_is_nonnegative_and_zero_only_at_prior(
        mu in proptest::collection::vec(-3.0f64..3.0, 1..8),
        logs2 in proptest::collection::vec(-3.0f64..3.0, 1..8),
    ) {
        let n = mu.len().min(logs2.len());
        let mu = &mu[..n];
        let s2: Vec<f64> = logs2[..n].iter().map(|v| v.exp()).collect();
        let kl = kl_diag_standard(mu, &s2).unwrap();
        prop_assert!(kl >= -1e-12);
        let at_prior = mu.iter().all(|&m| m == 0.0) && s2.iter().all(|&s| s == 1.0);
        if !at_prior {
            let deviation: f64 = mu.iter().map(|m| m.abs()).sum::<f64>()
                + s2.iter().map(|s| (s - 1.0).abs()).sum::<f64>();
            if deviation > 1e-3 {
                prop_assert!(kl > 0.0);
            }
        }
    }
}

#[test]
fn encode_is_deterministic_and_clamped() {
    let model = tiny_dense_model(4, 3, Variant::Genie, 1);
    let x = random_complex(4, 5, 0);
    let (mu1, s1) = model.encode(&x).unwrap();
    let (mu2, s2) = model.encode(&x).unwrap();
    assert_eq!(mu1, mu2);
    assert_eq!(s1, s2);
    for &s in &s1 {
        assert!((CLAMP_MIN..=CLAMP_MAX).contains(&s));
    }
    // Non-constant map: perturbing one coordinate moves the output.
    let mut x2 = x.clone();
    x2[1] += Complex64::new(1.0, 0.0);
    let (mu3, _) = model.encode(&x2).unwrap();
    assert_ne!(mu1, mu3);
}

#[test]
fn encode_rejects_non_finite() {
    let model = tiny_dense_model(4, 3, Variant::Genie, 1);
    let mut x = random_complex(4, 5, 0);
    x[2] = Complex64::new(f64::NAN, 0.0);
    assert!(matches!(model.encode(&x), Err(VaeError::InvalidInput(_))));
}

#[test]
fn decode_is_deterministic_and_clamped() {
    let model = tiny_dense_model(4, 3, Variant::Genie, 2);
    let z = [0.3, -1.0, 0.7];
    let a = model.decode(&z).unwrap();
    let b = model.decode(&z).unwrap();
    assert_eq!(a, b);
    for &c in &a.spectrum {
        assert!((CLAMP_MIN..=CLAMP_MAX).contains(&c));
    }
    let far = model.decode(&[50.0, -50.0, 20.0]).unwrap();
    assert_ne!(a.mean, far.mean);
    assert!(matches!(model.decode(&[f64::INFINITY, 0.0, 0.0]), Err(VaeError::InvalidInput(_))));
}

#[test]
fn elbo_matches_hand_composition_for_genie() {
    let m = 2;
    let model = tiny_dense_model(m, 3, Variant::Genie, 7);
    let h = random_complex(m, 9, 0);

    let mut rng = substream(33, domain::EPSILON, 0);
    let mut rng_clone = rng.clone();
    let (loss, parts) =
        elbo_loss(&model, &ElboSample { channel: Some(&h), ..Default::default() }, &mut rng)
            .unwrap();

    // Hand composition of the same quantities.
    let eps = draw_eps(&mut rng_clone, 3);
    let x = model.dft().forward(&h).unwrap();
    let (mu, sigma) = model.encode(&x).unwrap();
    let z = reparameterize(&mu, &sigma, &eps).unwrap();
    let moments = model.decode(&z.z).unwrap();
    let nll = gaussian_nll(&x, &moments.mean, &moments.spectrum).unwrap();
    let kls: Vec<f64> = mu
        .iter()
        .zip(&sigma)
        .map(|(&m, &s)| 0.5 * (-(s * s).ln() + m * m + s * s - 1.0))
        .collect();
    let kl_raw: f64 = kls.iter().sum();
    let expected_loss = nll + free_bits(&kls, model.config().free_bits_lambda);

    assert_relative_eq!(loss, expected_loss, epsilon = 1e-10);
    assert_relative_eq!(parts.nll, nll, epsilon = 1e-10);
    assert_relative_eq!(parts.kl, kl_raw, epsilon = 1e-10);
    assert_relative_eq!(
        kl_raw,
        kl_diag_standard(&mu, &sigma.iter().map(|s| s * s).collect::<Vec<_>>()).unwrap(),
        epsilon = 1e-12
    );
}

#[test]
fn real_variant_with_zero_noise_reduces_to_noisy_on_observations() {
    let m = 4;
    let real = tiny_dense_model(m, 3, Variant::Real, 21);
    let noisy = tiny_dense_model(m, 3, Variant::Noisy, 21);
    let y = random_complex(m, 10, 0);

    let mut r1 = substream(40, domain::EPSILON, 0);
    let mut r2 = r1.clone();
    let (l_real, _) = elbo_loss(
        &real,
        &ElboSample { observation: Some(&y), noise_variance: Some(0.0), ..Default::default() },
        &mut r1,
    )
    .unwrap();
    let (l_noisy, _) = elbo_loss(
        &noisy,
        &ElboSample { channel: Some(&y), observation: Some(&y), ..Default::default() },
        &mut r2,
    )
    .unwrap();
    assert_relative_eq!(l_real, l_noisy, epsilon = 1e-12);
}

#[test]
fn real_variant_uses_spectrum_plus_noise_in_likelihood_only() {
    let m = 4;
    let model = tiny_dense_model(m, 3, Variant::Real, 22);
    let y = random_complex(m, 11, 0);
    let noise_var = 0.7;

    let mut rng = substream(41, domain::EPSILON, 0);
    let mut rng_clone = rng.clone();
    let (loss, _) = elbo_loss(
        &model,
        &ElboSample { observation: Some(&y), noise_variance: Some(noise_var), ..Default::default() },
        &mut rng,
    )
    .unwrap();

    let eps = draw_eps(&mut rng_clone, 3);
    let x = model.dft().forward(&y).unwrap();
    let (mu, sigma) = model.encode(&x).unwrap();
    let z = reparameterize(&mu, &sigma, &eps).unwrap();
    // The decoder's reported spectrum has no noise floor added...
    let moments = model.decode(&z.z).unwrap();
    // ...while the likelihood runs on c(z) + noise variance.
    let shifted: Vec<f64> = moments.spectrum.iter().map(|c| c + noise_var).collect();
    let nll = gaussian_nll(&x, &moments.mean, &shifted).unwrap();
    let kls: Vec<f64> = mu
        .iter()
        .zip(&sigma)
        .map(|(&m, &s)| 0.5 * (-(s * s).ln() + m * m + s * s - 1.0))
        .collect();
    let expected = nll + free_bits(&kls, model.config().free_bits_lambda);
    assert_relative_eq!(loss, expected, epsilon = 1e-10);
}

#[test]
fn zero_free_bits_leaves_kl_unclamped() {
    let m = 4;
    let mut cfg = TrainConfig::new(Variant::Genie);
    cfg.latent_dim = 3;
    cfg.free_bits_lambda = 0.0;
    cfg.seed = 5;
    let model = VaeModel::new(m, Architecture::Dense { hidden: 6 }, cfg).unwrap();
    let h = random_complex(m, 12, 0);
    let mut rng = substream(42, domain::EPSILON, 0);
    let (loss, parts) =
        elbo_loss(&model, &ElboSample { channel: Some(&h), ..Default::default() }, &mut rng)
            .unwrap();
    assert_relative_eq!(loss, parts.nll + parts.kl, epsilon = 1e-12);
}

#[test]
fn variant_input_requirements_are_enforced() {
    let model = tiny_dense_model(4, 3, Variant::Genie, 1);
    let y = random_complex(4, 13, 0);
    let mut rng = substream(43, domain::EPSILON, 0);
    let res = elbo_loss(
        &model,
        &ElboSample { observation: Some(&y), ..Default::default() },
        &mut rng,
    );
    assert!(matches!(res, Err(VaeError::Configuration(_))));

    let real = tiny_dense_model(4, 3, Variant::Real, 1);
    let res = elbo_loss(
        &real,
        &ElboSample { observation: Some(&y), ..Default::default() },
        &mut rng,
    );
    assert!(matches!(res, Err(VaeError::Configuration(_))));
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

fn finite_difference_check(model: &mut VaeModel, batch: &ElboBatch<'_>, eps: &[f64]) {
    let grads = gradients(model, batch, eps).unwrap();
    let params = model.flat_params();
    assert_eq!(grads.len(), params.len());
    let h = 1e-5;
    let mut worst: (f64, usize) = (0.0, 0);
    for i in 0..params.len() {
        let mut plus = params.clone();
        plus[i] += h;
        model.set_flat_params(&plus);
        let lp = batch_loss(model, batch, eps).unwrap();
        let mut minus = params.clone();
        minus[i] -= h;
        model.set_flat_params(&minus);
        let lm = batch_loss(model, batch, eps).unwrap();
        let fd = (lp - lm) / (2.0 * h);
        let denom = fd.abs().max(grads[i].abs()).max(1e-6);
        let rel = (fd - grads[i]).abs() / denom;
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    model.set_flat_params(&params);
    assert!(
        worst.0 < 1e-4,
        "worst relative gradient error {:.3e} at parameter {}",
        worst.0,
        worst.1
    );
}

#[test]
fn gradients_match_finite_differences_dense() {
    let m = 4;
    let mut cfg = TrainConfig::new(Variant::Genie);
    cfg.latent_dim = 3;
    cfg.mc_samples = 2;
    cfg.seed = 3;
    let mut model = VaeModel::new(m, Architecture::Dense { hidden: 5 }, cfg).unwrap();
    assert!(model.param_count() <= 1000, "keep the FD model small");

    let channels: Vec<Vec<Complex64>> = (0..3).map(|i| random_complex(m, 20, i)).collect();
    let batch = ElboBatch { channels: Some(&channels), ..Default::default() };
    let mut rng = substream(50, domain::EPSILON, 0);
    let eps = draw_eps(&mut rng, 2 * 3 * 3);
    finite_difference_check(&mut model, &batch, &eps);
}

#[test]
fn gradients_match_finite_differences_conv_real_variant() {
    // Tiny convolutional model with batch norm (frozen statistics, per the
    // gradient contract) under the real variant's shifted spectrum.
    let m = 4;
    let mut cfg = TrainConfig::new(Variant::Real);
    cfg.latent_dim = 2;
    cfg.seed = 4;
    let arch = Architecture::Conv { channels: [2, 3, 4], kernel: 3 };
    let mut model = VaeModel::new(m, arch, cfg).unwrap();
    assert!(model.param_count() <= 1000, "model has {} params", model.param_count());

    let observations: Vec<Vec<Complex64>> = (0..2).map(|i| random_complex(m, 21, i)).collect();
    let vars = [0.4, 0.9];
    let batch = ElboBatch {
        observations: Some(&observations),
        noise_variances: Some(&vars),
        ..Default::default()
    };
    let mut rng = substream(51, domain::EPSILON, 0);
    let eps = draw_eps(&mut rng, 2 * 2);
    finite_difference_check(&mut model, &batch, &eps);
}

#[test]
fn gradients_match_finite_differences_noisy() {
    let m = 4;
    let mut cfg = TrainConfig::new(Variant::Noisy);
    cfg.latent_dim = 2;
    cfg.seed = 6;
    let mut model = VaeModel::new(m, Architecture::Dense { hidden: 4 }, cfg).unwrap();
    let channels: Vec<Vec<Complex64>> = (0..2).map(|i| random_complex(m, 22, i)).collect();
    let observations: Vec<Vec<Complex64>> = (0..2).map(|i| random_complex(m, 23, i)).collect();
    let batch = ElboBatch {
        channels: Some(&channels),
        observations: Some(&observations),
        ..Default::default()
    };
    let mut rng = substream(52, domain::EPSILON, 0);
    let eps = draw_eps(&mut rng, 2 * 2);
    finite_difference_check(&mut model, &batch, &eps);
}

#[test]
fn head_bias_gradients_match_hand_derivation() {
    // Minimal configuration: the decoder head biases have closed-form
    // gradients independent of the trunk. For the spectrum head,
    // d loss / d b_i = 1 - |x_i - m_i|^2 / c_i; for the mean head,
    // d loss / d b = -2 (x - m) / c, split into real and imaginary parts.
    let m = 1;
    let mut cfg = TrainConfig::new(Variant::Genie);
    cfg.latent_dim = 1;
    cfg.free_bits_lambda = 0.0;
    cfg.seed = 9;
    let mut model = VaeModel::new(m, Architecture::Dense { hidden: 1 }, cfg).unwrap();

    let h = vec![Complex64::new(0.8, -0.3)];
    let x = model.dft().forward(&h).unwrap();
    let channels = [h.clone()];
    let batch = ElboBatch { channels: Some(&channels), ..Default::default() };
    let eps = vec![0.0]; // z = mu(x)

    let (mu, _) = model.encode(&x).unwrap();
    let moments = model.decode(&mu).unwrap();
    let d = x[0] - moments.mean[0];
    let c = moments.spectrum[0];

    let grads = gradients(&mut model, &batch, &eps).unwrap();
    // Flat layout for Dense{hidden:1}, M=1, L=1:
    //   enc.w(2) enc.b(1) mu.w(1) mu.b(1) sig.w(1) sig.b(1)
    //   dec.w(1) dec.b(1) mean.w(2) mean.b(2) spec.w(1) spec.b(1)
    let n = grads.len();
    assert_eq!(n, 15);
    let spec_bias = grads[n - 1];
    let mean_bias_re = grads[n - 4];
    let mean_bias_im = grads[n - 3];
    assert_relative_eq!(spec_bias, 1.0 - d.norm_sqr() / c, epsilon = 1e-10);
    assert_relative_eq!(mean_bias_re, -2.0 * d.re / c, epsilon = 1e-10);
    assert_relative_eq!(mean_bias_im, -2.0 * d.im / c, epsilon = 1e-10);
}

#[test]
fn zeroed_mean_head_gradient_is_the_quadratic_term_derivative() {
    let m = 3;
    let mut cfg = TrainConfig::new(Variant::Genie);
    cfg.latent_dim = 2;
    cfg.free_bits_lambda = 0.0;
    cfg.seed = 10;
    let mut model = VaeModel::new(m, Architecture::Dense { hidden: 4 }, cfg).unwrap();

    // Zero the decoder mean head so m(z) = 0 identically.
    let mut params = model.flat_params();
    let n = params.len();
    // Layout tail: mean.w (2m * 4), mean.b (2m), spec.w (m * 4), spec.b (m).
    let spec_len = m * 4 + m;
    let mean_len = 2 * m * 4 + 2 * m;
    let mean_start = n - spec_len - mean_len;
    for p in &mut params[mean_start..mean_start + mean_len] {
        *p = 0.0;
    }
    model.set_flat_params(&params);

    let h = random_complex(m, 30, 0);
    let x = model.dft().forward(&h).unwrap();
    let channels = [h.clone()];
    let batch = ElboBatch { channels: Some(&channels), ..Default::default() };
    let eps = vec![0.0; 2];

    let (mu, _) = model.encode(&x).unwrap();
    let moments = model.decode(&mu).unwrap();
    assert!(moments.mean.iter().all(|v| v.norm() == 0.0));

    let grads = gradients(&mut model, &batch, &eps).unwrap();
    // With m(z) = 0, the mean-head bias gradient is exactly the derivative of
    // the |x|^2 / c term: -2 x / c.
    let bias_start = mean_start + 2 * m * 4;
    for i in 0..m {
        assert_relative_eq!(
            grads[bias_start + i],
            -2.0 * x[i].re / moments.spectrum[i],
            epsilon = 1e-10
        );
        assert_relative_eq!(
            grads[bias_start + m + i],
            -2.0 * x[i].im / moments.spectrum[i],
            epsilon = 1e-10
        );
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[test]
fn training_improves_the_elbo() {
    let cfg = ScenarioConfig::new(4, 2, 60);
    let ds = generate_dataset(&cfg, 32, false, SplitTag::Train).unwrap();
    let mut tc = TrainConfig::new(Variant::Genie);
    tc.latent_dim = 4;
    tc.epochs = 200;
    tc.batch_size = 8;
    tc.learning_rate = 1e-2;
    tc.seed = 61;
    let mut model = VaeModel::new(4, Architecture::Dense { hidden: 16 }, tc).unwrap();
    let report = train(&mut model, &ds).unwrap();
    assert_eq!(report.history.len(), 200);
    assert!(
        report.history.last().unwrap() > report.history.first().unwrap(),
        "ELBO did not improve: {:?} -> {:?}",
        report.history.first(),
        report.history.last()
    );
}

#[test]
fn training_is_bitwise_deterministic() {
    let cfg = ScenarioConfig::new(4, 2, 62);
    let ds = generate_dataset(&cfg, 24, false, SplitTag::Train).unwrap();
    let mut tc = TrainConfig::new(Variant::Noisy);
    tc.latent_dim = 3;
    tc.epochs = 5;
    tc.batch_size = 8;
    tc.learning_rate = 1e-3;
    tc.seed = 63;
    let mut m1 = VaeModel::new(4, Architecture::Dense { hidden: 8 }, tc.clone()).unwrap();
    let mut m2 = VaeModel::new(4, Architecture::Dense { hidden: 8 }, tc).unwrap();
    train(&mut m1, &ds).unwrap();
    train(&mut m2, &ds).unwrap();
    assert_eq!(m1.flat_params(), m2.flat_params());
    assert_eq!(m1.history(), m2.history());
}

#[test]
fn nll_spread_shrinks_with_more_mc_samples() {
    // Sample standard deviation of the reconstruction term over repeated
    // epsilon draws shrinks like 1/sqrt(K).
    let m = 4;
    let build = |k: usize| {
        let mut cfg = TrainConfig::new(Variant::Genie);
        cfg.latent_dim = 3;
        cfg.mc_samples = k;
        cfg.seed = 70;
        VaeModel::new(m, Architecture::Dense { hidden: 8 }, cfg).unwrap()
    };
    let m1 = build(1);
    let m16 = build(16);
    let h = random_complex(m, 71, 0);
    let sample = ElboSample { channel: Some(&h), ..Default::default() };

    let spread = |model: &VaeModel, idx: u64| {
        let reps = 400;
        let mut vals = Vec::with_capacity(reps);
        for r in 0..reps {
            let mut rng = substream(72, idx, r as u64);
            let (_, parts) = elbo_loss(model, &sample, &mut rng).unwrap();
            vals.push(parts.nll);
        }
        let mean: f64 = vals.iter().sum::<f64>() / reps as f64;
        (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (reps - 1) as f64).sqrt()
    };
    let s1 = spread(&m1, 1);
    let s16 = spread(&m16, 2);
    let ratio = s1 / s16;
    assert!(
        (2.4..=6.8).contains(&ratio),
        "std ratio {ratio:.2}, expected about sqrt(16) = 4"
    );
}

#[test]
fn checkpoint_roundtrip_preserves_behavior() {
    let dir = std::env::temp_dir().join("celab-test-vae-ckpt");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.cvae");

    let cfg = ScenarioConfig::new(4, 2, 80);
    let ds = generate_dataset(&cfg, 16, false, SplitTag::Train).unwrap();
    let mut tc = TrainConfig::new(Variant::Real);
    tc.latent_dim = 3;
    tc.epochs = 3;
    tc.batch_size = 8;
    tc.seed = 81;
    let mut model = VaeModel::new(4, Architecture::Dense { hidden: 8 }, tc).unwrap();
    train(&mut model, &ds).unwrap();
    save_model(&model, &path).unwrap();

    let loaded = load_model(&path).unwrap();
    assert_eq!(loaded.config().variant, Variant::Real);
    assert_eq!(loaded.history(), model.history());
    assert_eq!(loaded.flat_params(), model.flat_params());

    let x = random_complex(4, 82, 0);
    let (mu_a, s_a) = model.encode(&x).unwrap();
    let (mu_b, s_b) = loaded.encode(&x).unwrap();
    assert_eq!(mu_a, mu_b);
    assert_eq!(s_a, s_b);
    let z = [0.1, -0.2, 0.3];
    assert_eq!(model.decode(&z).unwrap(), loaded.decode(&z).unwrap());
    std::fs::remove_file(&path).unwrap();
}

#[test]
fn truncated_checkpoint_errors_cleanly() {
    let dir = std::env::temp_dir().join("celab-test-vae-trunc");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.cvae");
    let model = tiny_dense_model(4, 3, Variant::Genie, 90);
    save_model(&model, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_model(&path).is_err());
    std::fs::remove_file(&path).unwrap();
}
