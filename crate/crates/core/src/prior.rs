//! Low-resolution generative prior `G(z) = decode(flow(z))`: a convolutional
//! autoencoder and a RealNVP-style coupling flow on its latent space.
//!
//! `z` is the Gaussian base variable; [`Flow::forward`] maps base to latent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Padding, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamState};
use crate::sampler::ImageGrid;
use crate::tensor::Tensor;

/// Named tensors registered together on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    fn write(&self, prefix: &str, ck: &mut Checkpoint) {
        for (n, t) in self.names.iter().zip(&self.tensors) {
            ck.push(format!("{prefix}.{n}"), t.clone());
        }
    }

    fn read(&mut self, prefix: &str, ck: &Checkpoint) -> Result<()> {
        for (n, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let loaded = ck.get(&format!("{prefix}.{n}"))?;
            if loaded.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{prefix}.{n}: stored shape {:?}, expected {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            *t = loaded.clone();
        }
        Ok(())
    }
}

fn he(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f32).sqrt(), rng)
}

/// Images to a `[B, H, W, C]` tensor.
pub fn stack_batch(images: &[&ImageGrid]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Empty("image batch".into()))?;
    let mut data = Vec::with_capacity(images.len() * first.data().len());
    for img in images {
        if (img.height, img.width, img.channels) != (first.height, first.width, first.channels) {
            return Err(Error::Shape("images in a batch must share a shape".into()));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(&[images.len(), first.height, first.width, first.channels], data)
}

fn unstack(t: &Tensor) -> Result<Vec<ImageGrid>> {
    let s = t.shape();
    let per = s[1] * s[2] * s[3];
    t.data()
        .chunks(per)
        .map(|c| ImageGrid::new(s[1], s[2], s[3], c.to_vec()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeConfig {
    pub image: usize,
    pub channels: usize,
    pub latent: usize,
    /// Channel widths at full, half and quarter/eighth resolution.
    pub widths: [usize; 3],
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            image: 32,
            channels: 1,
            latent: 64,
            widths: [16, 32, 32],
        }
    }
}

impl AeConfig {
    fn bottom(&self) -> usize {
        self.image / 8
    }

    pub fn validate(&self) -> Result<()> {
        if self.image == 0 || self.image % 8 != 0 {
            return Err(Error::Invalid(format!(
                "autoencoder image size {} must be a positive multiple of 8",
                self.image
            )));
        }
        if self.channels == 0 || self.latent == 0 || self.widths.contains(&0) {
            return Err(Error::Invalid("autoencoder sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder block: (input width, output width, stride, identity skip).
fn encoder_blocks(cfg: &AeConfig) -> [(usize, usize, usize, bool); 6] {
    let [a, b, c] = cfg.widths;
    [
        (cfg.channels, a, 1, false),
        (a, b, 2, false),
        (b, b, 1, true),
        (b, c, 2, false),
        (c, c, 1, true),
        (c, c, 2, false),
    ]
}

/// Decoder block: (input width, output width, upsample first, identity skip).
fn decoder_blocks(cfg: &AeConfig) -> [(usize, usize, bool, bool); 6] {
    let [a, b, c] = cfg.widths;
    [
        (c, c, false, true),
        (c, c, true, false),
        (c, c, false, true),
        (c, b, true, false),
        (b, b, false, true),
        (b, a, true, false),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    pub cfg: AeConfig,
    pub encoder: ParamSet,
    pub decoder: ParamSet,
}

impl Autoencoder {
    pub fn init(cfg: AeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = ParamSet::new();
        for (i, (ci, co, _, _)) in encoder_blocks(&cfg).iter().enumerate() {
            encoder.push(format!("conv{}.weight", i + 1), he(&[3, 3, *ci, *co], 9 * ci, &mut rng));
            encoder.push(format!("conv{}.bias", i + 1), Tensor::zeros(&[*co]));
        }
        let flat = cfg.bottom() * cfg.bottom() * cfg.widths[2];
        encoder.push("fc.weight", Tensor::randn(&[flat, cfg.latent], (1.0 / flat as f32).sqrt(), &mut rng));
        encoder.push("fc.bias", Tensor::zeros(&[cfg.latent]));

        let mut decoder = ParamSet::new();
        decoder.push("fc.weight", he(&[cfg.latent, flat], cfg.latent, &mut rng));
        decoder.push("fc.bias", Tensor::zeros(&[flat]));
        for (i, (ci, co, _, _)) in decoder_blocks(&cfg).iter().enumerate() {
            decoder.push(format!("conv{}.weight", i + 1), he(&[3, 3, *ci, *co], 9 * ci, &mut rng));
            decoder.push(format!("conv{}.bias", i + 1), Tensor::zeros(&[*co]));
        }
        let a = cfg.widths[0];
        decoder.push(
            "out.weight",
            Tensor::randn(&[3, 3, a, cfg.channels], (1.0 / (9 * a) as f32).sqrt(), &mut rng),
        );
        decoder.push("out.bias", Tensor::zeros(&[cfg.channels]));
        Ok(Self { cfg, encoder, decoder })
    }

    /// `[B, H, W, C]` to `[B, L]`.
    pub fn encode_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let c = &self.cfg;
        if s.len() != 4 || s[1] != c.image || s[2] != c.image || s[3] != c.channels {
            return Err(Error::Shape(format!(
                "encoder expects [B, {0}, {0}, {1}], got {s:?}",
                c.image, c.channels
            )));
        }
        let mut h = x;
        for (i, (_, _, stride, skip)) in encoder_blocks(c).iter().enumerate() {
            let y = tape.conv2d(h, vars[2 * i], Some(vars[2 * i + 1]), *stride, Padding::uniform(1))?;
            let y = tape.relu(y);
            h = if *skip { tape.add(y, h)? } else { y };
        }
        let flat = tape.reshape(h, &[s[0], c.bottom() * c.bottom() * c.widths[2]])?;
        tape.linear(flat, vars[12], vars[13])
    }

    /// `[B, L]` to `[B, H, W, C]` (raw, unclamped).
    pub fn decode_tape(&self, tape: &mut Tape, vars: &[Var], w: Var) -> Result<Var> {
        let s = tape.shape(w).to_vec();
        let c = &self.cfg;
        if s.len() != 2 || s[1] != c.latent {
            return Err(Error::Shape(format!("decoder expects [B, {}], got {s:?}", c.latent)));
        }
        let b = c.bottom();
        let h0 = tape.linear(w, vars[0], vars[1])?;
        let h0 = tape.relu(h0);
        let mut h = tape.reshape(h0, &[s[0], b, b, c.widths[2]])?;
        for (i, (_, _, up, skip)) in decoder_blocks(c).iter().enumerate() {
            if *up {
                h = tape.upsample2(h)?;
            }
            let y = tape.conv2d(h, vars[2 + 2 * i], Some(vars[3 + 2 * i]), 1, Padding::uniform(1))?;
            let y = tape.relu(y);
            h = if *skip { tape.add(y, h)? } else { y };
        }
        tape.conv2d(h, vars[14], Some(vars[15]), 1, Padding::uniform(1))
    }

    pub fn encode(&self, img: &ImageGrid) -> Result<Tensor> {
        Ok(self.encode_batch(&[img])?.reshape(&[self.cfg.latent])?)
    }

    /// `[B, L]` latents.
    pub fn encode_batch(&self, images: &[&ImageGrid]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.encoder.register(&mut tape, false);
        let x = tape.constant(stack_batch(images)?);
        let z = self.encode_tape(&mut tape, &vars, x)?;
        Ok(tape.value(z).clone())
    }

    pub fn decode(&self, latent: &Tensor) -> Result<ImageGrid> {
        let w = latent.clone().reshape(&[1, self.cfg.latent])?;
        Ok(self.decode_batch(&w)?.remove(0))
    }

    pub fn decode_batch(&self, latents: &Tensor) -> Result<Vec<ImageGrid>> {
        let mut tape = Tape::new();
        let vars = self.decoder.register(&mut tape, false);
        let w = tape.constant(latents.clone());
        let x = self.decode_tape(&mut tape, &vars, w)?;
        unstack(tape.value(x))
    }

    pub fn reconstruct(&self, img: &ImageGrid) -> Result<ImageGrid> {
        self.decode(&self.encode(img)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub latent: usize,
    pub blocks: usize,
    pub hidden: [usize; 2],
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            latent: 64,
            blocks: 5,
            hidden: [128, 64],
        }
    }
}

const FLOW_BLOCK_TENSORS: usize = 14;

/// Coupling flow: each block is an actnorm `x = z * exp(logscale) + loc`
/// followed by a masked affine coupling
/// `x = m z + (1 - m) (z exp(s(m z)) + t(m z))`, `s = tanh(.)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Flow {
    pub cfg: FlowConfig,
    pub params: ParamSet,
}

fn mask(latent: usize, block: usize) -> Tensor {
    Tensor::from_vec((0..latent).map(|i| ((i + block) % 2) as f32).collect())
}

struct BlockVars<'a> {
    loc: Var,
    logscale: Var,
    s_net: &'a [Var],
    t_net: &'a [Var],
}

impl Flow {
    /// Identity flow: zero actnorm parameters and zero-initialized output
    /// layers of the scale and shift networks.
    pub fn init(cfg: FlowConfig, seed: u64) -> Result<Self> {
        if cfg.latent < 2 || cfg.blocks == 0 || cfg.hidden.contains(&0) {
            return Err(Error::Invalid("flow needs latent >= 2, blocks and hidden widths".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let [h1, h2] = cfg.hidden;
        let l = cfg.latent;
        for b in 0..cfg.blocks {
            params.push(format!("block{b}.actnorm.loc"), Tensor::zeros(&[l]));
            params.push(format!("block{b}.actnorm.logscale"), Tensor::zeros(&[l]));
            for net in ["scale", "shift"] {
                params.push(format!("block{b}.{net}.fc1.weight"), he(&[l, h1], l, &mut rng));
                params.push(format!("block{b}.{net}.fc1.bias"), Tensor::zeros(&[h1]));
                params.push(format!("block{b}.{net}.fc2.weight"), he(&[h1, h2], h1, &mut rng));
                params.push(format!("block{b}.{net}.fc2.bias"), Tensor::zeros(&[h2]));
                params.push(format!("block{b}.{net}.fc3.weight"), Tensor::zeros(&[h2, l]));
                params.push(format!("block{b}.{net}.fc3.bias"), Tensor::zeros(&[l]));
            }
        }
        Ok(Self { cfg, params })
    }

    fn block<'a>(&self, vars: &'a [Var], b: usize) -> BlockVars<'a> {
        let v = &vars[b * FLOW_BLOCK_TENSORS..(b + 1) * FLOW_BLOCK_TENSORS];
        BlockVars {
            loc: v[0],
            logscale: v[1],
            s_net: &v[2..8],
            t_net: &v[8..14],
        }
    }

    fn mlp(tape: &mut Tape, net: &[Var], x: Var) -> Result<Var> {
        let h = tape.linear(x, net[0], net[1])?;
        let h = tape.relu(h);
        let h = tape.linear(h, net[2], net[3])?;
        let h = tape.relu(h);
        tape.linear(h, net[4], net[5])
    }

    /// Masked input, `s` and `t` of a coupling.
    fn coupling_terms(tape: &mut Tape, bv: &BlockVars, keep: Var, x: Var) -> Result<(Var, Var)> {
        let xm = tape.mul_bias(x, keep)?;
        let raw = Self::mlp(tape, bv.s_net, xm)?;
        let s = tape.tanh(raw);
        let t = Self::mlp(tape, bv.t_net, xm)?;
        Ok((s, t))
    }

    fn mask_vars(&self, tape: &mut Tape, b: usize) -> (Var, Var) {
        let m = mask(self.cfg.latent, b);
        let inv = m.map(|v| 1.0 - v);
        (tape.constant(m), tape.constant(inv))
    }

    /// Base `[B, L]` to latent; also returns `log|det dx/dz|` as `[B]`.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &[Var], z: Var) -> Result<(Var, Var)> {
        let batch = tape.shape(z)[0];
        let mut logdet = tape.constant(Tensor::zeros(&[batch]));
        let mut x = z;
        for b in 0..self.cfg.blocks {
            let bv = self.block(vars, b);
            let scale = tape.exp(bv.logscale);
            let y = tape.mul_bias(x, scale)?;
            x = tape.add_bias(y, bv.loc)?;
            let ones = tape.constant(Tensor::full(&[batch, 1], 1.0));
            let ls = tape.reshape(bv.logscale, &[1, self.cfg.latent])?;
            let per = tape.matmul(ones, ls)?;
            let per = tape.sum_last(per);
            logdet = tape.add(logdet, per)?;

            let (keep, free) = self.mask_vars(tape, b);
            let (s, t) = Self::coupling_terms(tape, &bv, keep, x)?;
            let es = tape.exp(s);
            let scaled = tape.mul(x, es)?;
            let moved = tape.add(scaled, t)?;
            let moved = tape.mul_bias(moved, free)?;
            let kept = tape.mul_bias(x, keep)?;
            x = tape.add(kept, moved)?;
            let sf = tape.mul_bias(s, free)?;
            let sf = tape.sum_last(sf);
            logdet = tape.add(logdet, sf)?;
        }
        Ok((x, logdet))
    }

    /// Latent `[B, L]` to base; also returns `log|det dz/dx|` as `[B]`.
    pub fn inverse_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<(Var, Var)> {
        let batch = tape.shape(x)[0];
        let mut logdet = tape.constant(Tensor::zeros(&[batch]));
        let mut z = x;
        for b in (0..self.cfg.blocks).rev() {
            let bv = self.block(vars, b);
            let (keep, free) = self.mask_vars(tape, b);
            let (s, t) = Self::coupling_terms(tape, &bv, keep, z)?;
            let shifted = tape.sub(z, t)?;
            let neg = tape.scale(s, -1.0);
            let ens = tape.exp(neg);
            let back = tape.mul(shifted, ens)?;
            let back = tape.mul_bias(back, free)?;
            let kept = tape.mul_bias(z, keep)?;
            z = tape.add(kept, back)?;
            let sf = tape.mul_bias(neg, free)?;
            let sf = tape.sum_last(sf);
            logdet = tape.add(logdet, sf)?;

            let nloc = tape.scale(bv.loc, -1.0);
            let y = tape.add_bias(z, nloc)?;
            let nls = tape.scale(bv.logscale, -1.0);
            let inv = tape.exp(nls);
            z = tape.mul_bias(y, inv)?;
            let ones = tape.constant(Tensor::full(&[batch, 1], 1.0));
            let ls = tape.reshape(nls, &[1, self.cfg.latent])?;
            let per = tape.matmul(ones, ls)?;
            let per = tape.sum_last(per);
            logdet = tape.add(logdet, per)?;
        }
        Ok((z, logdet))
    }

    fn mlp64(&self, net: &[usize], x: &[f64]) -> Vec<f64> {
        let t = &self.params.tensors;
        let mut h = x.to_vec();
        for layer in 0..3 {
            let w = &t[net[2 * layer]];
            let b = t[net[2 * layer + 1]].data();
            let (rows, cols) = (w.shape()[0], w.shape()[1]);
            let mut out: Vec<f64> = b.iter().map(|&v| v as f64).collect();
            for (i, &hi) in h.iter().enumerate().take(rows) {
                if hi != 0.0 {
                    let row = &w.data()[i * cols..(i + 1) * cols];
                    for (o, &wv) in out.iter_mut().zip(row) {
                        *o += hi * wv as f64;
                    }
                }
            }
            if layer < 2 {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = out;
        }
        h
    }

    /// One item through the flow in double precision.
    fn run_item(&self, x: &mut [f64], inverse: bool) -> f64 {
        let l = self.cfg.latent;
        let t = &self.params.tensors;
        let mut logdet = 0.0;
        let blocks: Vec<usize> = if inverse {
            (0..self.cfg.blocks).rev().collect()
        } else {
            (0..self.cfg.blocks).collect()
        };
        for b in blocks {
            let base = b * FLOW_BLOCK_TENSORS;
            let loc = t[base].data();
            let logscale = t[base + 1].data();
            let s_net: Vec<usize> = (base + 2..base + 8).collect();
            let t_net: Vec<usize> = (base + 8..base + 14).collect();
            let keep: Vec<bool> = (0..l).map(|i| (i + b) % 2 == 1).collect();
            let coupling = |x: &mut [f64], logdet: &mut f64| {
                let masked: Vec<f64> = x.iter().zip(&keep).map(|(&v, &k)| if k { v } else { 0.0 }).collect();
                let s: Vec<f64> = self.mlp64(&s_net, &masked).into_iter().map(f64::tanh).collect();
                let sh = self.mlp64(&t_net, &masked);
                for i in (0..l).filter(|&i| !keep[i]) {
                    if inverse {
                        x[i] = (x[i] - sh[i]) * (-s[i]).exp();
                        *logdet -= s[i];
                    } else {
                        x[i] = x[i] * s[i].exp() + sh[i];
                        *logdet += s[i];
                    }
                }
            };
            if inverse {
                coupling(x, &mut logdet);
                for i in 0..l {
                    x[i] = (x[i] - loc[i] as f64) * (-(logscale[i] as f64)).exp();
                    logdet -= logscale[i] as f64;
                }
            } else {
                for i in 0..l {
                    x[i] = x[i] * (logscale[i] as f64).exp() + loc[i] as f64;
                    logdet += logscale[i] as f64;
                }
                coupling(x, &mut logdet);
            }
        }
        logdet
    }

    fn run(&self, input: &Tensor, inverse: bool) -> Result<(Tensor, Tensor)> {
        let l = self.cfg.latent;
        let batch = input.len() / l;
        if input.len() != batch * l || batch == 0 {
            return Err(Error::Shape(format!("flow expects a multiple of {l} values, got {}", input.len())));
        }
        let mut out = Vec::with_capacity(input.len());
        let mut logdets = Vec::with_capacity(batch);
        for item in input.data().chunks(l) {
            let mut x: Vec<f64> = item.iter().map(|&v| v as f64).collect();
            let ld = self.run_item(&mut x, inverse);
            if !ld.is_finite() || x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("flow output".into()));
            }
            out.extend(x.iter().map(|&v| v as f32));
            logdets.push(ld as f32);
        }
        Ok((Tensor::new(&[batch, l], out)?, Tensor::from_vec(logdets)))
    }

    /// Base to latent for `[L]` or `[B, L]` input, with per-item logdets.
    pub fn forward(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let (w, ld) = self.run(z, false)?;
        Ok((w.reshape(z.shape())?, ld))
    }

    pub fn inverse(&self, w: &Tensor) -> Result<Tensor> {
        let (z, _) = self.run(w, true)?;
        z.reshape(w.shape())
    }

    /// Single item base to latent in double precision, with its logdet.
    pub fn forward_f64(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        if z.len() != self.cfg.latent {
            return Err(Error::Shape(format!("flow expects {} values, got {}", self.cfg.latent, z.len())));
        }
        let mut x = z.to_vec();
        let ld = self.run_item(&mut x, false);
        Ok((x, ld))
    }

    /// Mean negative log-likelihood of latents `[B, L]` in nats.
    pub fn nll(&self, latents: &Tensor) -> Result<f64> {
        let (z, ld) = self.run(latents, true)?;
        let l = self.cfg.latent as f64;
        let b = ld.len() as f64;
        let quad: f64 = z.data().iter().map(|&v| 0.5 * (v as f64).powi(2)).sum::<f64>() / b;
        let logdet: f64 = ld.data().iter().map(|&v| v as f64).sum::<f64>() / b;
        Ok(quad + 0.5 * l * (2.0 * std::f64::consts::PI).ln() - logdet)
    }

    /// Sets every actnorm so that, with identity couplings, `latents` map to
    /// zero mean and unit variance per dimension in base space.
    pub fn data_init(&mut self, latents: &Tensor) -> Result<()> {
        let l = self.cfg.latent;
        let b = latents.len() / l;
        if b < 2 || latents.len() != b * l {
            return Err(Error::Invalid("actnorm init needs at least two latents".into()));
        }
        let mut cur = latents.clone().reshape(&[b, l])?;
        for blk in (0..self.cfg.blocks).rev() {
            // coupling of this block is applied (inverted) before its actnorm
            let mut tape = Tape::new();
            let vars = self.params.register(&mut tape, false);
            let bv = self.block(&vars, blk);
            let (keep, free) = self.mask_vars(&mut tape, blk);
            let x = tape.constant(cur.clone());
            let (s, t) = Self::coupling_terms(&mut tape, &bv, keep, x)?;
            let shifted = tape.sub(x, t)?;
            let neg = tape.scale(s, -1.0);
            let ens = tape.exp(neg);
            let back = tape.mul(shifted, ens)?;
            let back = tape.mul_bias(back, free)?;
            let kept = tape.mul_bias(x, keep)?;
            let z = tape.add(kept, back)?;
            cur = tape.value(z).clone();

            let mut loc = vec![0.0f32; l];
            let mut logscale = vec![0.0f32; l];
            for d in 0..l {
                let col: Vec<f64> = (0..b).map(|i| cur.data()[i * l + d] as f64).collect();
                let mean = col.iter().sum::<f64>() / b as f64;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / b as f64;
                if !(var > 1e-12) {
                    return Err(Error::Invalid(format!("actnorm init: latent dimension {d} is constant")));
                }
                loc[d] = mean as f32;
                logscale[d] = (0.5 * var.ln()) as f32;
            }
            for (i, v) in cur.data_mut().iter_mut().enumerate() {
                let d = i % l;
                *v = (*v - loc[d]) * (-logscale[d]).exp();
            }
            self.params.tensors[blk * FLOW_BLOCK_TENSORS] = Tensor::from_vec(loc);
            self.params.tensors[blk * FLOW_BLOCK_TENSORS + 1] = Tensor::from_vec(logscale);
        }
        Ok(())
    }
}

/// The composed prior `G(z) = decode(flow(z))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prior {
    pub ae: Autoencoder,
    pub flow: Flow,
}

pub const PRIOR_CHECKPOINT_KIND: &str = "prior";

impl Prior {
    pub fn latent(&self) -> usize {
        self.ae.cfg.latent
    }

    /// Tape graph of `G(z)` for `z: [B, L]`, giving `[B, H, W, C]`.
    pub fn generate_tape(&self, tape: &mut Tape, flow_vars: &[Var], dec_vars: &[Var], z: Var) -> Result<Var> {
        let (w, _) = self.flow.forward_tape(tape, flow_vars, z)?;
        self.ae.decode_tape(tape, dec_vars, w)
    }

    pub fn generate(&self, z: &Tensor) -> Result<ImageGrid> {
        let (w, _) = self.flow.forward(z)?;
        self.ae.decode(&w)
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new(
            PRIOR_CHECKPOINT_KIND,
            serde_json::json!({ "autoencoder": self.ae.cfg, "flow": self.flow.cfg, "info": meta }),
        );
        self.ae.encoder.write("encoder", &mut ck);
        self.ae.decoder.write("decoder", &mut ck);
        self.flow.params.write("flow", &mut ck);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != PRIOR_CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a '{PRIOR_CHECKPOINT_KIND}' checkpoint, found '{}'",
                ck.kind
            )));
        }
        let ae_cfg: AeConfig = serde_json::from_value(ck.meta["autoencoder"].clone())?;
        let flow_cfg: FlowConfig = serde_json::from_value(ck.meta["flow"].clone())?;
        let mut ae = Autoencoder::init(ae_cfg, 0)?;
        let mut flow = Flow::init(flow_cfg, 0)?;
        ae.encoder.read("encoder", ck)?;
        ae.decoder.read("decoder", ck)?;
        flow.params.read("flow", ck)?;
        Ok(Self { ae, flow })
    }
}

/// `count` images `G(z)` with `z ~ N(0, I)` drawn from `seed`.
pub fn sample(prior: &Prior, count: usize, seed: u64) -> Result<Vec<ImageGrid>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Tensor::randn(&[count, prior.latent()], 1.0, &mut rng);
    let (w, _) = prior.flow.forward(&z)?;
    prior.ae.decode_batch(&w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    /// Weight of the image-gradient matching term.
    pub lambda_g: f32,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 16,
            lr: 1e-3,
            lambda_g: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Mean squared forward differences along `axis` (1 = rows, 2 = columns)
/// of `a - b`, both `[B, H, W, C]`.
fn gradient_mismatch(tape: &mut Tape, diff: Var, axis: usize) -> Result<Var> {
    let n = tape.shape(diff)[axis];
    let hi = tape.slice(diff, axis, 1, n - 1)?;
    let lo = tape.slice(diff, axis, 0, n - 1)?;
    let d = tape.sub(hi, lo)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// Reconstruction objective on a fixed batch: MSE plus `lambda_g` times the
/// mean squared mismatch of finite-difference image gradients.
pub fn ae_loss(ae: &Autoencoder, images: &[&ImageGrid], lambda_g: f32) -> Result<f64> {
    let mut tape = Tape::new();
    let ev = ae.encoder.register(&mut tape, false);
    let dv = ae.decoder.register(&mut tape, false);
    let loss = ae_loss_tape(ae, &mut tape, &ev, &dv, images, lambda_g)?;
    Ok(tape.value(loss).item() as f64)
}

fn ae_loss_tape(
    ae: &Autoencoder,
    tape: &mut Tape,
    ev: &[Var],
    dv: &[Var],
    images: &[&ImageGrid],
    lambda_g: f32,
) -> Result<Var> {
    let x = tape.constant(stack_batch(images)?);
    let w = ae.encode_tape(tape, ev, x)?;
    let y = ae.decode_tape(tape, dv, w)?;
    let diff = tape.sub(y, x)?;
    let sq = tape.mul(diff, diff)?;
    let mut loss = tape.mean(sq);
    if lambda_g != 0.0 {
        let gy = gradient_mismatch(tape, diff, 1)?;
        let gx = gradient_mismatch(tape, diff, 2)?;
        let g = tape.add(gx, gy)?;
        let g = tape.scale(g, lambda_g);
        loss = tape.add(loss, g)?;
    }
    Ok(loss)
}

pub fn train_ae(images: &[ImageGrid], ae_cfg: &AeConfig, cfg: &AeTrainConfig) -> Result<(Autoencoder, Vec<f64>)> {
    if images.is_empty() {
        return Err(Error::Empty("autoencoder training set".into()));
    }
    let mut ae = Autoencoder::init(ae_cfg.clone(), cfg.seed)?;
    let n_enc = ae.encoder.tensors.len();
    let mut params: Vec<Tensor> = ae.encoder.tensors.iter().chain(&ae.decoder.tensors).cloned().collect();
    let mut adam = AdamState::new(&params, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ae);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<&ImageGrid> = (0..cfg.batch.max(1))
            .map(|_| &images[rng.random_range(0..images.len())])
            .collect();
        let mut tape = Tape::new();
        let ev = ae.encoder.register(&mut tape, true);
        let dv = ae.decoder.register(&mut tape, true);
        let loss = ae_loss_tape(&ae, &mut tape, &ev, &dv, &batch, cfg.lambda_g)?;
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Diverged { step, last_good: None });
        }
        tape.backward(loss)?;
        let grads: Vec<Tensor> = ev
            .iter()
            .chain(&dv)
            .map(|&v| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
            .collect();
        adam_step(&mut params, &grads, &mut adam)?;
        ae.encoder.tensors = params[..n_enc].to_vec();
        ae.decoder.tensors = params[n_enc..].to_vec();
        trace.push(value);
        if step % 200 == 0 {
            log::info!("autoencoder step {step}: loss {value:.5e}");
        }
    }
    Ok((ae, trace))
}

/// Maximum-likelihood training of a flow on `latents` (`[N, L]`), starting
/// from the data-dependent actnorm initialization.
pub fn train_flow(latents: &Tensor, flow_cfg: &FlowConfig, cfg: &FlowTrainConfig) -> Result<(Flow, Vec<f64>)> {
    let l = flow_cfg.latent;
    let s = latents.shape();
    if s.len() != 2 || s[1] != l || s[0] < 2 {
        return Err(Error::Shape(format!("flow training expects [N >= 2, {l}] latents, got {s:?}")));
    }
    let n = s[0];
    let mut flow = Flow::init(flow_cfg.clone(), cfg.seed)?;
    flow.data_init(latents)?;
    let mut params = flow.params.tensors.clone();
    let mut adam = AdamState::new(&params, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf10);
    let mut trace = Vec::with_capacity(cfg.steps);
    let const_term = 0.5 * l as f32 * (2.0 * std::f32::consts::PI).ln();
    for step in 0..cfg.steps {
        let b = cfg.batch.clamp(1, n);
        let mut rows = Vec::with_capacity(b * l);
        for _ in 0..b {
            let i = rng.random_range(0..n);
            rows.extend_from_slice(&latents.data()[i * l..(i + 1) * l]);
        }
        let mut tape = Tape::new();
        let vars = flow.params.register(&mut tape, true);
        let x = tape.constant(Tensor::new(&[b, l], rows)?);
        let (z, logdet) = flow.inverse_tape(&mut tape, &vars, x)?;
        let quad = tape.sum_squares(z)?;
        let quad = tape.scale(quad, 0.5 / b as f32);
        let ld = tape.sum(logdet);
        let ld = tape.scale(ld, -1.0 / b as f32);
        let nll = tape.add(quad, ld)?;
        let nll = tape.add_scalar(nll, const_term);
        let value = tape.value(nll).item() as f64;
        if !value.is_finite() {
            return Err(Error::Diverged { step, last_good: None });
        }
        tape.backward(nll)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .map(|&v| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
            .collect();
        adam_step(&mut params, &grads, &mut adam)?;
        flow.params.tensors = params.clone();
        trace.push(value);
        if step % 200 == 0 {
            log::info!("flow step {step}: nll {value:.4}");
        }
    }
    Ok((flow, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ellipse_phantom;

    fn tiny_ae() -> AeConfig {
        AeConfig {
            image: 16,
            channels: 1,
            latent: 8,
            widths: [4, 6, 6],
        }
    }

    #[test]
    fn autoencoder_shapes_and_finiteness() {
        let ae = Autoencoder::init(tiny_ae(), 1).unwrap();
        let img = ellipse_phantom(3, 16, 4).unwrap();
        let z = ae.encode(&img).unwrap();
        assert_eq!(z.shape(), &[8]);
        let back = ae.decode(&z).unwrap();
        assert_eq!((back.height, back.width, back.channels), (16, 16, 1));
        assert!(back.values.all_finite());
        assert!(ae.encode(&ellipse_phantom(3, 8, 4).unwrap()).is_err());
    }

    #[test]
    fn identity_flow() {
        let flow = Flow::init(FlowConfig { latent: 6, blocks: 5, hidden: [8, 8] }, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::randn(&[6], 1.0, &mut rng);
        let (w, ld) = flow.forward(&z).unwrap();
        assert_eq!(w, z);
        assert_eq!(ld.data(), &[0.0]);
    }

    fn perturbed_flow(latent: usize, seed: u64) -> Flow {
        let mut flow = Flow::init(FlowConfig { latent, blocks: 5, hidden: [16, 8] }, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for t in flow.params.tensors.iter_mut() {
            let noise = Tensor::randn(t.shape(), 0.1, &mut rng);
            t.add_assign(&noise);
        }
        flow
    }

    #[test]
    fn flow_round_trip() {
        let flow = perturbed_flow(8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Tensor::randn(&[50, 8], 1.0, &mut rng);
        let (w, _) = flow.forward(&z).unwrap();
        let back = flow.inverse(&w).unwrap();
        let err = back.max_abs_diff(&z);
        assert!(err < 1e-5, "{err} {}", w.max_abs());
    }

    #[test]
    fn tape_and_direct_paths_agree() {
        let flow = perturbed_flow(8, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let z = Tensor::randn(&[20, 8], 1.0, &mut rng);
        let (w, ld) = flow.forward(&z).unwrap();
        let mut tape = Tape::new();
        let vars = flow.params.register(&mut tape, false);
        let zv = tape.constant(z.clone());
        let (wt, ldt) = flow.forward_tape(&mut tape, &vars, zv).unwrap();
        assert!(tape.value(wt).max_abs_diff(&w) < 1e-4);
        assert!(tape.value(ldt).max_abs_diff(&ld) < 1e-4);
        let wv = tape.constant(w.clone());
        let (zt, ldi) = flow.inverse_tape(&mut tape, &vars, wv).unwrap();
        assert!(tape.value(zt).max_abs_diff(&z) < 1e-4);
        assert!(tape.value(ldi).data().iter().zip(ld.data()).all(|(a, b)| (a + b).abs() < 1e-4));
    }

    #[test]
    fn round_trip_at_full_latent_size() {
        let flow = perturbed_flow(64, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let z = Tensor::randn(&[1000, 64], 1.0, &mut rng);
        let back = flow.inverse(&flow.forward(&z).unwrap().0).unwrap();
        assert!(back.max_abs_diff(&z) < 1e-5);
    }

    #[test]
    fn logdet_matches_dense_jacobian() {
        let flow = perturbed_flow(6, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z: Vec<f64> = (0..6).map(|_| rng.random::<f64>() - 0.5).collect();
        let f = |v: &[f64]| flow.forward_f64(v).unwrap().0;
        let eps = 1e-5;
        let mut jac = vec![vec![0.0; 6]; 6];
        for j in 0..6 {
            let mut p = z.clone();
            let mut m = z.clone();
            p[j] += eps;
            m[j] -= eps;
            let (fp, fm) = (f(&p), f(&m));
            for i in 0..6 {
                jac[i][j] = (fp[i] - fm[i]) / (2.0 * eps);
            }
        }
        let det = determinant(jac);
        let ld = flow.forward_f64(&z).unwrap().1;
        assert!((det.abs().ln() - ld).abs() < 1e-3, "{} vs {ld}", det.abs().ln());
    }

    fn determinant(mut a: Vec<Vec<f64>>) -> f64 {
        let n = a.len();
        let mut det = 1.0;
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            if p != c {
                a.swap(p, c);
                det = -det;
            }
            det *= a[c][c];
            for r in c + 1..n {
                let f = a[r][c] / a[c][c];
                for k in c..n {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
        det
    }

    #[test]
    fn actnorm_data_init_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut lat = Tensor::randn(&[200, 4], 3.0, &mut rng);
        for (i, v) in lat.data_mut().iter_mut().enumerate() {
            *v += (i % 4) as f32;
        }
        let mut flow = Flow::init(FlowConfig { latent: 4, blocks: 3, hidden: [8, 8] }, 1).unwrap();
        flow.data_init(&lat).unwrap();
        let z = flow.inverse(&lat).unwrap();
        for d in 0..4 {
            let col: Vec<f64> = (0..200).map(|i| z.data()[i * 4 + d] as f64).collect();
            let mean = col.iter().sum::<f64>() / 200.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 200.0;
            assert!(mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-3, "{mean} {var}");
        }
    }

    #[test]
    fn lambda_zero_is_mse() {
        let ae = Autoencoder::init(tiny_ae(), 2).unwrap();
        let imgs: Vec<ImageGrid> = (0..3).map(|s| ellipse_phantom(s, 16, 3).unwrap()).collect();
        let refs: Vec<&ImageGrid> = imgs.iter().collect();
        let l0 = ae_loss(&ae, &refs, 0.0).unwrap();
        let mut mse = 0.0f64;
        let mut count = 0.0;
        for img in &imgs {
            let r = ae.reconstruct(img).unwrap();
            for (a, b) in r.data().iter().zip(img.data()) {
                mse += ((a - b) as f64).powi(2);
                count += 1.0;
            }
        }
        assert!((l0 - mse / count).abs() < 1e-6 * (1.0 + l0));
        assert!(ae_loss(&ae, &refs, 0.1).unwrap() >= l0);
    }

    #[test]
    fn sampling_is_seeded() {
        let prior = Prior {
            ae: Autoencoder::init(tiny_ae(), 3).unwrap(),
            flow: perturbed_flow(8, 9),
        };
        assert!(sample(&prior, 0, 1).unwrap().is_empty());
        assert_eq!(sample(&prior, 3, 4).unwrap(), sample(&prior, 3, 4).unwrap());
        let back = Prior::from_checkpoint(&prior.to_checkpoint(serde_json::Value::Null)).unwrap();
        assert_eq!(back, prior);
    }

    #[test]
    fn standard_normal_latents_have_nothing_to_learn() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lat = Tensor::randn(&[512, 4], 1.0, &mut rng);
        let cfg = FlowConfig { latent: 4, blocks: 2, hidden: [16, 16] };
        let identity = Flow::init(cfg.clone(), 0).unwrap().nll(&lat).unwrap();
        let (trained, _) = train_flow(&lat, &cfg, &FlowTrainConfig { steps: 150, ..Default::default() }).unwrap();
        let after = trained.nll(&lat).unwrap();
        assert!((after - identity).abs() / 4.0 < 0.1, "{identity} vs {after}");
    }

    #[test]
    fn shifted_latents_lower_nll() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut lat = Tensor::randn(&[256, 4], 0.5, &mut rng);
        for v in lat.data_mut() {
            *v += 2.0;
        }
        let cfg = FlowConfig { latent: 4, blocks: 2, hidden: [16, 16] };
        let identity = Flow::init(cfg.clone(), 0).unwrap().nll(&lat).unwrap();
        let (trained, trace) = train_flow(&lat, &cfg, &FlowTrainConfig { steps: 100, ..Default::default() }).unwrap();
        assert!(trained.nll(&lat).unwrap() < identity);
        assert!(trace.iter().all(|v| v.is_finite()));
    }
}
