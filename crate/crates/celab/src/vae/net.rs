//! Network internals: batched feature maps, layers with manual
//! backpropagation, and the encoder/decoder pair.
//!
//! Layers store their forward caches inline, so a training step is
//! `forward(.., training=true)` followed by `backward(..)` on the same
//! object. Inference uses the cache-free `*_infer` paths, which take `&self`
//! and are safe to call concurrently. All batch-parallel work either writes
//! disjoint per-sample slices or reduces fixed-size chunks in a fixed order,
//! so results are bitwise independent of scheduling.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

/// Batched feature map, contiguous `[batch][channel][position]`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Feat {
    pub data: Vec<f64>,
    pub batch: usize,
    pub ch: usize,
    pub len: usize,
}

impl Feat {
    pub fn zeros(batch: usize, ch: usize, len: usize) -> Self {
        Self { data: vec![0.0; batch * ch * len], batch, ch, len }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let batch = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(batch * width);
        for r in rows {
            debug_assert_eq!(r.len(), width);
            data.extend_from_slice(r);
        }
        Self { data, batch, ch: 1, len: width }
    }

    pub fn features(&self) -> usize {
        self.ch * self.len
    }

    pub fn sample(&self, b: usize) -> &[f64] {
        let w = self.features();
        &self.data[b * w..(b + 1) * w]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [f64] {
        let w = self.features();
        &mut self.data[b * w..(b + 1) * w]
    }
}

/// Uniform init in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
fn fan_in_uniform(rng: &mut ChaCha12Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound).collect()
}

fn pad_batch(x: &Feat, pad: usize) -> Feat {
    let plen = x.len + 2 * pad;
    let mut out = Feat::zeros(x.batch, x.ch, plen);
    let w_in = x.features();
    let w_out = x.ch * plen;
    out.data
        .par_chunks_mut(w_out)
        .zip(x.data.par_chunks(w_in))
        .for_each(|(dst, src)| {
            for c in 0..x.ch {
                dst[c * plen + pad..c * plen + pad + x.len]
                    .copy_from_slice(&src[c * x.len..(c + 1) * x.len]);
            }
        });
    out
}

/// Samples per chunk of the deterministic parameter-gradient reduction.
const GRAD_CHUNK: usize = 16;

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) struct Dense {
    pub in_f: usize,
    pub out_f: usize,
    pub w: Vec<f64>, // [out][in]
    pub b: Vec<f64>,
    pub gw: Vec<f64>,
    pub gb: Vec<f64>,
    cache: Option<Feat>,
}

impl Dense {
    pub fn new(in_f: usize, out_f: usize, rng: &mut ChaCha12Rng) -> Self {
        Self {
            in_f,
            out_f,
            w: fan_in_uniform(rng, out_f * in_f, in_f),
            b: fan_in_uniform(rng, out_f, in_f),
            gw: vec![0.0; out_f * in_f],
            gb: vec![0.0; out_f],
            cache: None,
        }
    }

    fn compute(&self, x: &Feat) -> Feat {
        debug_assert_eq!(x.features(), self.in_f);
        let mut out = Feat::zeros(x.batch, self.out_f, 1);
        out.data
            .par_chunks_mut(self.out_f)
            .zip(x.data.par_chunks(self.in_f))
            .for_each(|(dst, src)| {
                for o in 0..self.out_f {
                    let row = &self.w[o * self.in_f..(o + 1) * self.in_f];
                    let mut acc = self.b[o];
                    for (wv, xv) in row.iter().zip(src) {
                        acc += wv * xv;
                    }
                    dst[o] = acc;
                }
            });
        out
    }

    pub fn forward(&mut self, x: &Feat) -> Feat {
        let out = self.compute(x);
        self.cache = Some(x.clone());
        out
    }

    pub fn forward_infer(&self, x: &Feat) -> Feat {
        self.compute(x)
    }

    pub fn backward(&mut self, dy: &Feat) -> Feat {
        let x = self.cache.as_ref().expect("dense backward without forward");
        debug_assert_eq!(dy.features(), self.out_f);
        let mut dx = Feat { data: vec![0.0; x.data.len()], batch: x.batch, ch: x.ch, len: x.len };
        dx.data
            .par_chunks_mut(self.in_f)
            .zip(dy.data.par_chunks(self.out_f))
            .for_each(|(dst, g)| {
                for o in 0..self.out_f {
                    let go = g[o];
                    let row = &self.w[o * self.in_f..(o + 1) * self.in_f];
                    for (d, wv) in dst.iter_mut().zip(row) {
                        *d += wv * go;
                    }
                }
            });
        for b in 0..x.batch {
            let xs = x.sample(b);
            let g = dy.sample(b);
            for o in 0..self.out_f {
                let go = g[o];
                self.gb[o] += go;
                let row = &mut self.gw[o * self.in_f..(o + 1) * self.in_f];
                for (gw, xv) in row.iter_mut().zip(xs) {
                    *gw += go * xv;
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Conv1d (stride 2, zero padding (k-1)/2)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) struct Conv1d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub w: Vec<f64>, // [out_ch][in_ch][k]
    pub b: Vec<f64>,
    pub gw: Vec<f64>,
    pub gb: Vec<f64>,
    cache: Option<Feat>, // padded input
}

impl Conv1d {
    pub fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize, rng: &mut ChaCha12Rng) -> Self {
        let fan_in = in_ch * k;
        Self {
            in_ch,
            out_ch,
            k,
            stride,
            pad: (k - 1) / 2,
            w: fan_in_uniform(rng, out_ch * in_ch * k, fan_in),
            b: fan_in_uniform(rng, out_ch, fan_in),
            gw: vec![0.0; out_ch * in_ch * k],
            gb: vec![0.0; out_ch],
            cache: None,
        }
    }

    pub fn out_len(&self, in_len: usize) -> usize {
        (in_len + 2 * self.pad - self.k) / self.stride + 1
    }

    fn compute(&self, xp: &Feat, out_len: usize) -> Feat {
        let plen = xp.len;
        let mut out = Feat::zeros(xp.batch, self.out_ch, out_len);
        out.data
            .par_chunks_mut(self.out_ch * out_len)
            .zip(xp.data.par_chunks(self.in_ch * plen))
            .for_each(|(dst, src)| {
                for oc in 0..self.out_ch {
                    let orow = &mut dst[oc * out_len..(oc + 1) * out_len];
                    orow.fill(self.b[oc]);
                    for ic in 0..self.in_ch {
                        let wrow = &self.w[(oc * self.in_ch + ic) * self.k..][..self.k];
                        let xrow = &src[ic * plen..(ic + 1) * plen];
                        for (ol, ov) in orow.iter_mut().enumerate() {
                            let base = ol * self.stride;
                            let mut acc = 0.0;
                            for (kk, wv) in wrow.iter().enumerate() {
                                acc += wv * xrow[base + kk];
                            }
                            *ov += acc;
                        }
                    }
                }
            });
        out
    }

    pub fn forward(&mut self, x: &Feat, _training: bool) -> Feat {
        let out_len = self.out_len(x.len);
        let xp = pad_batch(x, self.pad);
        let out = self.compute(&xp, out_len);
        self.cache = Some(xp);
        out
    }

    pub fn forward_infer(&self, x: &Feat) -> Feat {
        let out_len = self.out_len(x.len);
        let xp = pad_batch(x, self.pad);
        self.compute(&xp, out_len)
    }

    pub fn backward(&mut self, dy: &Feat) -> Feat {
        let xp = self.cache.as_ref().expect("conv backward without forward");
        let plen = xp.len;
        let in_len = plen - 2 * self.pad;
        let out_len = dy.len;

        // Gradient w.r.t. the (padded) input: disjoint per-sample scatter.
        let mut dxp = Feat::zeros(xp.batch, self.in_ch, plen);
        dxp.data
            .par_chunks_mut(self.in_ch * plen)
            .zip(dy.data.par_chunks(self.out_ch * out_len))
            .for_each(|(dst, g)| {
                for oc in 0..self.out_ch {
                    let grow = &g[oc * out_len..(oc + 1) * out_len];
                    for ic in 0..self.in_ch {
                        let wrow = &self.w[(oc * self.in_ch + ic) * self.k..][..self.k];
                        let drow = &mut dst[ic * plen..(ic + 1) * plen];
                        for (ol, &gv) in grow.iter().enumerate() {
                            let base = ol * self.stride;
                            for (kk, wv) in wrow.iter().enumerate() {
                                drow[base + kk] += wv * gv;
                            }
                        }
                    }
                }
            });

        // Parameter gradients: fixed-chunk partials summed in chunk order.
        let nchunks = xp.batch.div_ceil(GRAD_CHUNK);
        let wlen = self.w.len();
        let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..nchunks)
            .into_par_iter()
            .map(|ci| {
                let lo = ci * GRAD_CHUNK;
                let hi = ((ci + 1) * GRAD_CHUNK).min(xp.batch);
                let mut pw = vec![0.0; wlen];
                let mut pb = vec![0.0; self.out_ch];
                for b in lo..hi {
                    let src = &xp.data[b * self.in_ch * plen..];
                    let g = &dy.data[b * self.out_ch * out_len..];
                    for oc in 0..self.out_ch {
                        let grow = &g[oc * out_len..(oc + 1) * out_len];
                        for &gv in grow {
                            pb[oc] += gv;
                        }
                        for ic in 0..self.in_ch {
                            let xrow = &src[ic * plen..(ic + 1) * plen];
                            let prow = &mut pw[(oc * self.in_ch + ic) * self.k..][..self.k];
                            for (ol, &gv) in grow.iter().enumerate() {
                                let base = ol * self.stride;
                                for (kk, pv) in prow.iter_mut().enumerate() {
                                    *pv += gv * xrow[base + kk];
                                }
                            }
                        }
                    }
                }
                (pw, pb)
            })
            .collect();
        for (pw, pb) in partials {
            for (g, p) in self.gw.iter_mut().zip(&pw) {
                *g += p;
            }
            for (g, p) in self.gb.iter_mut().zip(&pb) {
                *g += p;
            }
        }

        // Crop the padding off.
        let mut dx = Feat::zeros(xp.batch, self.in_ch, in_len);
        for b in 0..xp.batch {
            for ic in 0..self.in_ch {
                let src = &dxp.data[(b * self.in_ch + ic) * plen + self.pad..][..in_len];
                dx.data[(b * self.in_ch + ic) * in_len..][..in_len].copy_from_slice(src);
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// ConvT1d (stride 2, zero padding (k-1)/2, output padding stride-1)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) struct ConvT1d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
    pub w: Vec<f64>, // [in_ch][out_ch][k]
    pub b: Vec<f64>,
    pub gw: Vec<f64>,
    pub gb: Vec<f64>,
    cache: Option<Feat>, // unpadded input
}

impl ConvT1d {
    pub fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize, rng: &mut ChaCha12Rng) -> Self {
        let fan_in = in_ch * k;
        Self {
            in_ch,
            out_ch,
            k,
            stride,
            pad: (k - 1) / 2,
            out_pad: stride - 1,
            w: fan_in_uniform(rng, in_ch * out_ch * k, fan_in),
            b: fan_in_uniform(rng, out_ch, fan_in),
            gw: vec![0.0; in_ch * out_ch * k],
            gb: vec![0.0; out_ch],
            cache: None,
        }
    }

    pub fn out_len(&self, in_len: usize) -> usize {
        (in_len - 1) * self.stride + self.k + self.out_pad - 2 * self.pad
    }

    fn compute(&self, x: &Feat) -> Feat {
        let out_len = self.out_len(x.len);
        let flen = out_len + 2 * self.pad;
        let mut out = Feat::zeros(x.batch, self.out_ch, out_len);
        out.data
            .par_chunks_mut(self.out_ch * out_len)
            .zip(x.data.par_chunks(self.in_ch * x.len))
            .for_each(|(dst, src)| {
                let mut full = vec![0.0; self.out_ch * flen];
                for ic in 0..self.in_ch {
                    let xrow = &src[ic * x.len..(ic + 1) * x.len];
                    for oc in 0..self.out_ch {
                        let wrow = &self.w[(ic * self.out_ch + oc) * self.k..][..self.k];
                        let frow = &mut full[oc * flen..(oc + 1) * flen];
                        for (i, &xv) in xrow.iter().enumerate() {
                            let base = i * self.stride;
                            for (kk, wv) in wrow.iter().enumerate() {
                                frow[base + kk] += wv * xv;
                            }
                        }
                    }
                }
                for oc in 0..self.out_ch {
                    let frow = &full[oc * flen + self.pad..][..out_len];
                    let orow = &mut dst[oc * out_len..(oc + 1) * out_len];
                    for (o, f) in orow.iter_mut().zip(frow) {
                        *o = f + self.b[oc];
                    }
                }
            });
        out
    }

    pub fn forward(&mut self, x: &Feat, _training: bool) -> Feat {
        let out = self.compute(x);
        self.cache = Some(x.clone());
        out
    }

    pub fn forward_infer(&self, x: &Feat) -> Feat {
        self.compute(x)
    }

    pub fn backward(&mut self, dy: &Feat) -> Feat {
        let x = self.cache.as_ref().expect("tconv backward without forward");
        let dyp = pad_batch(dy, self.pad);
        let plen = dyp.len;

        // Gradient w.r.t. input is an ordinary strided correlation of dy.
        let mut dx = Feat::zeros(x.batch, self.in_ch, x.len);
        dx.data
            .par_chunks_mut(self.in_ch * x.len)
            .zip(dyp.data.par_chunks(self.out_ch * plen))
            .for_each(|(dst, g)| {
                for ic in 0..self.in_ch {
                    let drow = &mut dst[ic * x.len..(ic + 1) * x.len];
                    for oc in 0..self.out_ch {
                        let wrow = &self.w[(ic * self.out_ch + oc) * self.k..][..self.k];
                        let grow = &g[oc * plen..(oc + 1) * plen];
                        for (i, dv) in drow.iter_mut().enumerate() {
                            let base = i * self.stride;
                            let mut acc = 0.0;
                            for (kk, wv) in wrow.iter().enumerate() {
                                acc += wv * grow[base + kk];
                            }
                            *dv += acc;
                        }
                    }
                }
            });

        let nchunks = x.batch.div_ceil(GRAD_CHUNK);
        let wlen = self.w.len();
        let out_len = dy.len;
        let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..nchunks)
            .into_par_iter()
            .map(|ci| {
                let lo = ci * GRAD_CHUNK;
                let hi = ((ci + 1) * GRAD_CHUNK).min(x.batch);
                let mut pw = vec![0.0; wlen];
                let mut pb = vec![0.0; self.out_ch];
                for b in lo..hi {
                    let src = &x.data[b * self.in_ch * x.len..];
                    let gp = &dyp.data[b * self.out_ch * plen..];
                    let g = &dy.data[b * self.out_ch * out_len..];
                    for oc in 0..self.out_ch {
                        for &gv in &g[oc * out_len..(oc + 1) * out_len] {
                            pb[oc] += gv;
                        }
                    }
                    for ic in 0..self.in_ch {
                        let xrow = &src[ic * x.len..(ic + 1) * x.len];
                        for oc in 0..self.out_ch {
                            let grow = &gp[oc * plen..(oc + 1) * plen];
                            let prow = &mut pw[(ic * self.out_ch + oc) * self.k..][..self.k];
                            for (i, &xv) in xrow.iter().enumerate() {
                                let base = i * self.stride;
                                for (kk, pv) in prow.iter_mut().enumerate() {
                                    *pv += xv * grow[base + kk];
                                }
                            }
                        }
                    }
                }
                (pw, pb)
            })
            .collect();
        for (pw, pb) in partials {
            for (g, p) in self.gw.iter_mut().zip(&pw) {
                *g += p;
            }
            for (g, p) in self.gb.iter_mut().zip(&pb) {
                *g += p;
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// BatchNorm1d
// ---------------------------------------------------------------------------

const BN_EPS: f64 = 1e-5;
/// Running-statistics momentum.
pub(crate) const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub(crate) struct BatchNorm1d {
    pub ch: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub g_gamma: Vec<f64>,
    pub g_beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Feat,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

impl BatchNorm1d {
    pub fn new(ch: usize) -> Self {
        Self {
            ch,
            gamma: vec![1.0; ch],
            beta: vec![0.0; ch],
            g_gamma: vec![0.0; ch],
            g_beta: vec![0.0; ch],
            running_mean: vec![0.0; ch],
            running_var: vec![1.0; ch],
            cache: None,
        }
    }

    fn normalize(&self, x: &Feat, mean: &[f64], inv_std: &[f64]) -> Feat {
        let mut out = x.clone();
        for b in 0..x.batch {
            for c in 0..self.ch {
                let base = (b * self.ch + c) * x.len;
                for l in 0..x.len {
                    let xhat = (x.data[base + l] - mean[c]) * inv_std[c];
                    out.data[base + l] = self.gamma[c] * xhat + self.beta[c];
                }
            }
        }
        out
    }

    fn batch_stats(&self, x: &Feat) -> (Vec<f64>, Vec<f64>) {
        let n = (x.batch * x.len) as f64;
        let mut mean = vec![0.0; self.ch];
        let mut var = vec![0.0; self.ch];
        for b in 0..x.batch {
            for c in 0..self.ch {
                let base = (b * self.ch + c) * x.len;
                for l in 0..x.len {
                    mean[c] += x.data[base + l];
                }
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        for b in 0..x.batch {
            for c in 0..self.ch {
                let base = (b * self.ch + c) * x.len;
                for l in 0..x.len {
                    let d = x.data[base + l] - mean[c];
                    var[c] += d * d;
                }
            }
        }
        for v in &mut var {
            *v /= n;
        }
        (mean, var)
    }

    pub fn forward(&mut self, x: &Feat, training: bool) -> Feat {
        let (mean, var, batch_stats) = if training {
            let (mean, var) = self.batch_stats(x);
            let n = (x.batch * x.len) as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            for c in 0..self.ch {
                self.running_mean[c] = (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * mean[c];
                self.running_var[c] =
                    (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * var[c] * unbias;
            }
            (mean, var, true)
        } else {
            (self.running_mean.clone(), self.running_var.clone(), false)
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let out = self.normalize(x, &mean, &inv_std);
        let mut xhat = x.clone();
        for b in 0..x.batch {
            for c in 0..self.ch {
                let base = (b * self.ch + c) * x.len;
                for l in 0..x.len {
                    xhat.data[base + l] = (x.data[base + l] - mean[c]) * inv_std[c];
                }
            }
        }
        self.cache = Some(BnCache { xhat, inv_std, batch_stats });
        out
    }

    pub fn forward_infer(&self, x: &Feat) -> Feat {
        let inv_std: Vec<f64> =
            self.running_var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        self.normalize(x, &self.running_mean, &inv_std)
    }

    pub fn backward(&mut self, dy: &Feat) -> Feat {
        let cache = self.cache.as_ref().expect("bn backward without forward");
        let xhat = &cache.xhat;
        let n = (dy.batch * dy.len) as f64;
        let mut sum_dy = vec![0.0; self.ch];
        let mut sum_dy_xhat = vec![0.0; self.ch];
        for b in 0..dy.batch {
            for c in 0..self.ch {
                let base = (b * self.ch + c) * dy.len;
                for l in 0..dy.len {
                    sum_dy[c] += dy.data[base + l];
                    sum_dy_xhat[c] += dy.data[base + l] * xhat.data[base + l];
                }
            }
        }
        for c in 0..self.ch {
            self.g_beta[c] += sum_dy[c];
            self.g_gamma[c] += sum_dy_xhat[c];
        }
        let mut dx = Feat::zeros(dy.batch, self.ch, dy.len);
        for b in 0..dy.batch {
            for c in 0..self.ch {
                let base = (b * self.ch + c) * dy.len;
                let scale = self.gamma[c] * cache.inv_std[c];
                for l in 0..dy.len {
                    let g = dy.data[base + l];
                    dx.data[base + l] = if cache.batch_stats {
                        scale * (g - sum_dy[c] / n - xhat.data[base + l] * sum_dy_xhat[c] / n)
                    } else {
                        scale * g
                    };
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub(crate) struct Relu {
    cache: Option<Feat>,
}

impl Relu {
    fn compute(x: &Feat) -> Feat {
        let mut out = x.clone();
        for v in &mut out.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        out
    }

    pub fn forward(&mut self, x: &Feat) -> Feat {
        let out = Self::compute(x);
        self.cache = Some(out.clone());
        out
    }

    pub fn forward_infer(&self, x: &Feat) -> Feat {
        Self::compute(x)
    }

    pub fn backward(&mut self, dy: &Feat) -> Feat {
        let out = self.cache.as_ref().expect("relu backward without forward");
        let mut dx = dy.clone();
        for (d, o) in dx.data.iter_mut().zip(&out.data) {
            if *o <= 0.0 {
                *d = 0.0;
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Layer stack
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) enum Layer {
    Conv(Conv1d),
    ConvT(ConvT1d),
    Bn(BatchNorm1d),
    Relu(Relu),
    Dense(Dense),
    /// Reinterprets the feature map as `(ch, len)`; data layout is unchanged.
    Reshape { ch: usize, len: usize, cached: (usize, usize) },
}

impl Layer {
    fn forward(&mut self, x: &Feat, training: bool) -> Feat {
        match self {
            Layer::Conv(l) => l.forward(x, training),
            Layer::ConvT(l) => l.forward(x, training),
            Layer::Bn(l) => l.forward(x, training),
            Layer::Relu(l) => l.forward(x),
            Layer::Dense(l) => l.forward(x),
            Layer::Reshape { ch, len, cached } => {
                *cached = (x.ch, x.len);
                debug_assert_eq!(x.features(), *ch * *len);
                Feat { data: x.data.clone(), batch: x.batch, ch: *ch, len: *len }
            }
        }
    }

    fn forward_infer(&self, x: &Feat) -> Feat {
        match self {
            Layer::Conv(l) => l.forward_infer(x),
            Layer::ConvT(l) => l.forward_infer(x),
            Layer::Bn(l) => l.forward_infer(x),
            Layer::Relu(l) => l.forward_infer(x),
            Layer::Dense(l) => l.forward_infer(x),
            Layer::Reshape { ch, len, .. } => {
                Feat { data: x.data.clone(), batch: x.batch, ch: *ch, len: *len }
            }
        }
    }

    fn backward(&mut self, dy: &Feat) -> Feat {
        match self {
            Layer::Conv(l) => l.backward(dy),
            Layer::ConvT(l) => l.backward(dy),
            Layer::Bn(l) => l.backward(dy),
            Layer::Relu(l) => l.backward(dy),
            Layer::Dense(l) => l.backward(dy),
            Layer::Reshape { cached, .. } => {
                Feat { data: dy.data.clone(), batch: dy.batch, ch: cached.0, len: cached.1 }
            }
        }
    }

    /// Visits `(param, grad)` slot pairs in a fixed order.
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Vec<f64>, &mut Vec<f64>)) {
        match self {
            Layer::Conv(l) => {
                f(&mut l.w, &mut l.gw);
                f(&mut l.b, &mut l.gb);
            }
            Layer::ConvT(l) => {
                f(&mut l.w, &mut l.gw);
                f(&mut l.b, &mut l.gb);
            }
            Layer::Bn(l) => {
                f(&mut l.gamma, &mut l.g_gamma);
                f(&mut l.beta, &mut l.g_beta);
            }
            Layer::Dense(l) => {
                f(&mut l.w, &mut l.gw);
                f(&mut l.b, &mut l.gb);
            }
            Layer::Relu(_) | Layer::Reshape { .. } => {}
        }
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Stack {
    pub layers: Vec<Layer>,
}

impl Stack {
    pub fn forward(&mut self, x: &Feat, training: bool) -> Feat {
        let mut cur = x.clone();
        for l in &mut self.layers {
            cur = l.forward(&cur, training);
        }
        cur
    }

    pub fn forward_infer(&self, x: &Feat) -> Feat {
        let mut cur = x.clone();
        for l in &self.layers {
            cur = l.forward_infer(&cur);
        }
        cur
    }

    pub fn backward(&mut self, dy: &Feat) -> Feat {
        let mut cur = dy.clone();
        for l in self.layers.iter_mut().rev() {
            cur = l.backward(&cur);
        }
        cur
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Vec<f64>, &mut Vec<f64>)) {
        for l in &mut self.layers {
            l.visit_params(f);
        }
    }
}
