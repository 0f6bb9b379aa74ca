//! Encoder/decoder assembly for both supported architectures, plus flat
//! parameter access and checkpoint tensor export/import.

use super::net::{BatchNorm1d, Conv1d, ConvT1d, Dense, Feat, Layer, Relu, Stack};
use crate::container::{Container, TensorEntry};
use crate::rng::{domain, substream};

/// Network architecture. The convolutional variant follows the benchmark
/// recipe (three stride-2 blocks, mirrored decoder); the dense variant exists
/// for fast unit tests and for array sizes the conv layout cannot divide.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Architecture {
    /// One hidden affine layer of the given width on each side.
    Dense { hidden: usize },
    /// Three conv blocks with these channel counts and an odd kernel size,
    /// stride fixed at 2. Requires `2M` divisible by 8.
    Conv { channels: [usize; 3], kernel: usize },
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::Conv { channels: [8, 32, 128], kernel: 7 }
    }
}

impl Architecture {
    pub(crate) fn validate(&self, antennas: usize) -> Result<(), String> {
        match self {
            Architecture::Dense { hidden } => {
                if *hidden == 0 {
                    return Err("dense hidden width must be positive".into());
                }
            }
            Architecture::Conv { channels, kernel } => {
                if channels.iter().any(|&c| c == 0) {
                    return Err("conv channel counts must be positive".into());
                }
                if *kernel == 0 || kernel % 2 == 0 {
                    return Err("conv kernel must be odd".into());
                }
                if (2 * antennas) % 8 != 0 {
                    return Err(format!(
                        "conv architecture needs 2M divisible by 8, got M = {antennas}"
                    ));
                }
            }
        }
        Ok(())
    }
}

/// The trainable network: encoder trunk with (mu, log sigma) heads and
/// decoder trunk with (mean, log spectrum) heads.
#[derive(Debug, Clone)]
pub(crate) struct Network {
    pub enc: Stack,
    pub enc_mu: Dense,
    pub enc_logsigma: Dense,
    pub dec: Stack,
    pub dec_mean: Dense,
    pub dec_logspec: Dense,
}

impl Network {
    pub fn new(antennas: usize, latent: usize, arch: &Architecture, seed: u64) -> Result<Self, String> {
        arch.validate(antennas)?;
        if latent == 0 {
            return Err("latent dimension must be positive".into());
        }
        let width = 2 * antennas;
        let mut slot = 0u64;
        let mut rng = |s: &mut u64| {
            let r = substream(seed, domain::INIT, *s);
            *s += 1;
            r
        };
        match arch {
            Architecture::Dense { hidden } => {
                let h = *hidden;
                let enc = Stack {
                    layers: vec![
                        Layer::Dense(Dense::new(width, h, &mut rng(&mut slot))),
                        Layer::Relu(Relu::default()),
                    ],
                };
                let enc_mu = Dense::new(h, latent, &mut rng(&mut slot));
                let enc_logsigma = Dense::new(h, latent, &mut rng(&mut slot));
                let dec = Stack {
                    layers: vec![
                        Layer::Dense(Dense::new(latent, h, &mut rng(&mut slot))),
                        Layer::Relu(Relu::default()),
                    ],
                };
                let dec_mean = Dense::new(h, width, &mut rng(&mut slot));
                let dec_logspec = Dense::new(h, antennas, &mut rng(&mut slot));
                Ok(Self { enc, enc_mu, enc_logsigma, dec, dec_mean, dec_logspec })
            }
            Architecture::Conv { channels, kernel } => {
                let [c0, c1, c2] = *channels;
                let k = *kernel;
                let len3 = width / 8;
                let feat = c2 * len3;
                let enc = Stack {
                    layers: vec![
                        Layer::Conv(Conv1d::new(1, c0, k, 2, &mut rng(&mut slot))),
                        Layer::Bn(BatchNorm1d::new(c0)),
                        Layer::Relu(Relu::default()),
                        Layer::Conv(Conv1d::new(c0, c1, k, 2, &mut rng(&mut slot))),
                        Layer::Bn(BatchNorm1d::new(c1)),
                        Layer::Relu(Relu::default()),
                        Layer::Conv(Conv1d::new(c1, c2, k, 2, &mut rng(&mut slot))),
                        Layer::Bn(BatchNorm1d::new(c2)),
                        Layer::Relu(Relu::default()),
                    ],
                };
                let enc_mu = Dense::new(feat, latent, &mut rng(&mut slot));
                let enc_logsigma = Dense::new(feat, latent, &mut rng(&mut slot));
                let dec = Stack {
                    layers: vec![
                        Layer::Dense(Dense::new(latent, feat, &mut rng(&mut slot))),
                        Layer::Reshape { ch: c2, len: len3, cached: (0, 0) },
                        Layer::ConvT(ConvT1d::new(c2, c1, k, 2, &mut rng(&mut slot))),
                        Layer::Bn(BatchNorm1d::new(c1)),
                        Layer::Relu(Relu::default()),
                        Layer::ConvT(ConvT1d::new(c1, c0, k, 2, &mut rng(&mut slot))),
                        Layer::Bn(BatchNorm1d::new(c0)),
                        Layer::Relu(Relu::default()),
                        Layer::ConvT(ConvT1d::new(c0, 1, k, 2, &mut rng(&mut slot))),
                        Layer::Bn(BatchNorm1d::new(1)),
                        Layer::Relu(Relu::default()),
                    ],
                };
                let dec_mean = Dense::new(width, width, &mut rng(&mut slot));
                let dec_logspec = Dense::new(width, antennas, &mut rng(&mut slot));
                Ok(Self { enc, enc_mu, enc_logsigma, dec, dec_mean, dec_logspec })
            }
        }
    }

    pub fn encode_forward(&mut self, x: &Feat, training: bool) -> (Feat, Feat) {
        let t = self.enc.forward(x, training);
        (self.enc_mu.forward(&t), self.enc_logsigma.forward(&t))
    }

    pub fn encode_infer(&self, x: &Feat) -> (Feat, Feat) {
        let t = self.enc.forward_infer(x);
        (self.enc_mu.forward_infer(&t), self.enc_logsigma.forward_infer(&t))
    }

    pub fn encoder_backward(&mut self, d_mu: &Feat, d_logsigma: &Feat) {
        let mut dt = self.enc_mu.backward(d_mu);
        let dt2 = self.enc_logsigma.backward(d_logsigma);
        for (a, b) in dt.data.iter_mut().zip(&dt2.data) {
            *a += b;
        }
        self.enc.backward(&dt);
    }

    pub fn decode_forward(&mut self, z: &Feat, training: bool) -> (Feat, Feat) {
        let t = self.dec.forward(z, training);
        (self.dec_mean.forward(&t), self.dec_logspec.forward(&t))
    }

    pub fn decode_infer(&self, z: &Feat) -> (Feat, Feat) {
        let t = self.dec.forward_infer(z);
        (self.dec_mean.forward_infer(&t), self.dec_logspec.forward_infer(&t))
    }

    /// Backpropagates through the decoder, returning the latent gradient.
    pub fn decoder_backward(&mut self, d_mean: &Feat, d_logspec: &Feat) -> Feat {
        let mut dt = self.dec_mean.backward(d_mean);
        let dt2 = self.dec_logspec.backward(d_logspec);
        for (a, b) in dt.data.iter_mut().zip(&dt2.data) {
            *a += b;
        }
        self.dec.backward(&dt)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Vec<f64>, &mut Vec<f64>)) {
        self.enc.visit_params(f);
        self.enc_mu.visit(f);
        self.enc_logsigma.visit(f);
        self.dec.visit_params(f);
        self.dec_mean.visit(f);
        self.dec_logspec.visit(f);
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |_, g| g.iter_mut().for_each(|v| *v = 0.0));
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p, _| n += p.len());
        n
    }

    pub fn flat_params(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params(&mut |p, _| out.extend_from_slice(p));
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut pos = 0;
        self.visit_params(&mut |p, _| {
            p.copy_from_slice(&flat[pos..pos + p.len()]);
            pos += p.len();
        });
        assert_eq!(pos, flat.len(), "flat parameter length mismatch");
    }

    pub fn flat_grads(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params(&mut |_, g| out.extend_from_slice(g));
        out
    }

    /// Batch-norm running statistics, in layer order.
    pub fn flat_state(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_state(&mut |s| out.extend_from_slice(s));
        out
    }

    pub fn set_flat_state(&mut self, flat: &[f64]) {
        let mut pos = 0;
        self.visit_state(&mut |s| {
            s.copy_from_slice(&flat[pos..pos + s.len()]);
            pos += s.len();
        });
        assert_eq!(pos, flat.len(), "flat state length mismatch");
    }

    fn visit_state(&mut self, f: &mut dyn FnMut(&mut Vec<f64>)) {
        for stack in [&mut self.enc, &mut self.dec] {
            for l in &mut stack.layers {
                if let Layer::Bn(bn) = l {
                    f(&mut bn.running_mean);
                    f(&mut bn.running_var);
                }
            }
        }
    }

    pub fn export_tensors(&self) -> Vec<TensorEntry> {
        let mut out = Vec::new();
        export_stack(&self.enc, "enc", &mut out);
        export_dense(&self.enc_mu, "enc.mu", &mut out);
        export_dense(&self.enc_logsigma, "enc.sigma", &mut out);
        export_stack(&self.dec, "dec", &mut out);
        export_dense(&self.dec_mean, "dec.mean", &mut out);
        export_dense(&self.dec_logspec, "dec.spec", &mut out);
        out
    }

    pub fn import_tensors(&mut self, c: &Container) -> Result<(), String> {
        import_stack(&mut self.enc, "enc", c)?;
        import_dense(&mut self.enc_mu, "enc.mu", c)?;
        import_dense(&mut self.enc_logsigma, "enc.sigma", c)?;
        import_stack(&mut self.dec, "dec", c)?;
        import_dense(&mut self.dec_mean, "dec.mean", c)?;
        import_dense(&mut self.dec_logspec, "dec.spec", c)?;
        Ok(())
    }
}

impl Dense {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Vec<f64>, &mut Vec<f64>)) {
        f(&mut self.w, &mut self.gw);
        f(&mut self.b, &mut self.gb);
    }
}

fn export_dense(d: &Dense, prefix: &str, out: &mut Vec<TensorEntry>) {
    out.push(TensorEntry::new(
        format!("{prefix}.w"),
        vec![d.out_f as u32, d.in_f as u32],
        d.w.clone(),
    ));
    out.push(TensorEntry::new(format!("{prefix}.b"), vec![d.out_f as u32], d.b.clone()));
}

fn export_stack(stack: &Stack, prefix: &str, out: &mut Vec<TensorEntry>) {
    for (i, l) in stack.layers.iter().enumerate() {
        let p = format!("{prefix}.{i}");
        match l {
            Layer::Conv(c) => {
                out.push(TensorEntry::new(
                    format!("{p}.conv.w"),
                    vec![c.out_ch as u32, c.in_ch as u32, c.k as u32],
                    c.w.clone(),
                ));
                out.push(TensorEntry::new(format!("{p}.conv.b"), vec![c.out_ch as u32], c.b.clone()));
            }
            Layer::ConvT(c) => {
                out.push(TensorEntry::new(
                    format!("{p}.tconv.w"),
                    vec![c.in_ch as u32, c.out_ch as u32, c.k as u32],
                    c.w.clone(),
                ));
                out.push(TensorEntry::new(format!("{p}.tconv.b"), vec![c.out_ch as u32], c.b.clone()));
            }
            Layer::Bn(bn) => {
                let ch = bn.ch as u32;
                out.push(TensorEntry::new(format!("{p}.bn.gamma"), vec![ch], bn.gamma.clone()));
                out.push(TensorEntry::new(format!("{p}.bn.beta"), vec![ch], bn.beta.clone()));
                out.push(TensorEntry::new(format!("{p}.bn.mean"), vec![ch], bn.running_mean.clone()));
                out.push(TensorEntry::new(format!("{p}.bn.var"), vec![ch], bn.running_var.clone()));
            }
            Layer::Dense(d) => export_dense(d, &format!("{p}.dense"), out),
            Layer::Relu(_) | Layer::Reshape { .. } => {}
        }
    }
}

fn pull(c: &Container, name: &str, expect_len: usize) -> Result<Vec<f64>, String> {
    let t = c.tensor(name).ok_or_else(|| format!("missing tensor {name}"))?;
    if t.data.len() != expect_len {
        return Err(format!(
            "tensor {name} has {} values, expected {expect_len}",
            t.data.len()
        ));
    }
    Ok(t.data.clone())
}

fn import_dense(d: &mut Dense, prefix: &str, c: &Container) -> Result<(), String> {
    d.w = pull(c, &format!("{prefix}.w"), d.w.len())?;
    d.b = pull(c, &format!("{prefix}.b"), d.b.len())?;
    Ok(())
}

fn import_stack(stack: &mut Stack, prefix: &str, c: &Container) -> Result<(), String> {
    for (i, l) in stack.layers.iter_mut().enumerate() {
        let p = format!("{prefix}.{i}");
        match l {
            Layer::Conv(conv) => {
                conv.w = pull(c, &format!("{p}.conv.w"), conv.w.len())?;
                conv.b = pull(c, &format!("{p}.conv.b"), conv.b.len())?;
            }
            Layer::ConvT(conv) => {
                conv.w = pull(c, &format!("{p}.tconv.w"), conv.w.len())?;
                conv.b = pull(c, &format!("{p}.tconv.b"), conv.b.len())?;
            }
            Layer::Bn(bn) => {
                bn.gamma = pull(c, &format!("{p}.bn.gamma"), bn.ch)?;
                bn.beta = pull(c, &format!("{p}.bn.beta"), bn.ch)?;
                bn.running_mean = pull(c, &format!("{p}.bn.mean"), bn.ch)?;
                bn.running_var = pull(c, &format!("{p}.bn.var"), bn.ch)?;
            }
            Layer::Dense(d) => import_dense(d, &format!("{p}.dense"), c)?,
            Layer::Relu(_) | Layer::Reshape { .. } => {}
        }
    }
    Ok(())
}
