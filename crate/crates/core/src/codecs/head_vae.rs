use std::path::Path;

use ndgrad::{AdamState, AdamW, Band, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{HeadLatent, RawHeadPose, HEAD_LATENT_DIM, HEAD_POSE_DIM};
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, segment_positions, Block, Linear, Session};

const STD_FLOOR: f32 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadVaeConfig {
    pub width: usize,
    pub hidden: usize,
    pub heads: usize,
    pub window: usize,
    pub lookahead: usize,
    pub kl_weight: f32,
    /// Fraction of steps over which the KL weight ramps linearly from zero.
    pub warmup_frac: f32,
    pub steps: usize,
    pub batch: usize,
    /// Training crop length in frames.
    pub segment: usize,
    pub lr: f32,
    pub seed: u64,
    /// Raw-unit reconstruction L1 the trained model is expected to reach.
    pub recon_threshold: f64,
}

impl Default for HeadVaeConfig {
    fn default() -> Self {
        Self {
            width: 32,
            hidden: 64,
            heads: 2,
            window: 10,
            lookahead: 2,
            kl_weight: 1e-3,
            warmup_frac: 0.1,
            steps: 600,
            batch: 8,
            segment: 48,
            lr: 3e-3,
            seed: 0,
            recon_threshold: 5e-2,
        }
    }
}

impl HeadVaeConfig {
    fn band(&self, segment: usize) -> Band {
        Band {
            behind: self.window - 1 - self.lookahead,
            ahead: self.lookahead,
            segment,
        }
    }

    fn to_tensor(&self) -> Tensor {
        let v = [self.width, self.hidden, self.heads, self.window, self.lookahead];
        Tensor::new(&[5], v.iter().map(|&x| x as f32).collect()).expect("config tensor")
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.numel() != 5 {
            return Err(Error::ConfigMismatch("head VAE config tensor must hold 5 values".into()));
        }
        let d = t.data();
        Ok(Self {
            width: d[0] as usize,
            hidden: d[1] as usize,
            heads: d[2] as usize,
            window: d[3] as usize,
            lookahead: d[4] as usize,
            ..Self::default()
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadVaeReport {
    pub steps: usize,
    pub final_loss: f64,
    /// Mean absolute reconstruction error on the training sequences, raw units.
    pub recon_l1: f64,
}

/// Temporal VAE over 7-d head pose with an 8-d latent per frame.
///
/// Encoder and decoder are each one windowed transformer layer between
/// linear projections. Inputs are z-normalized per channel with statistics
/// taken from the training set.
#[derive(Clone, Debug)]
pub struct HeadVae {
    config: HeadVaeConfig,
    params: ParamStore,
    enc_in: Linear,
    enc_block: Block,
    enc_mu: Linear,
    enc_logvar: Linear,
    dec_in: Linear,
    dec_block: Block,
    dec_out: Linear,
    mean: Tensor,
    std: Tensor,
    trained: bool,
}

impl HeadVae {
    /// Fresh, untrained model. Encoding or decoding fails until it is trained or loaded.
    pub fn new(config: HeadVaeConfig) -> Result<Self> {
        if config.lookahead >= config.window {
            return Err(Error::ConfigMismatch("lookahead must be smaller than window".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        let (w, h, heads) = (config.width, config.hidden, config.heads);
        let enc_in = Linear::new(&mut p, "headvae.enc.in", HEAD_POSE_DIM, w, 1.0, &mut rng)?;
        let enc_block = Block::new(&mut p, "headvae.enc.block", w, h, heads, &mut rng)?;
        let enc_mu = Linear::new(&mut p, "headvae.enc.mu", w, HEAD_LATENT_DIM, 1.0, &mut rng)?;
        let enc_logvar = Linear::new(&mut p, "headvae.enc.logvar", w, HEAD_LATENT_DIM, 0.1, &mut rng)?;
        let dec_in = Linear::new(&mut p, "headvae.dec.in", HEAD_LATENT_DIM, w, 1.0, &mut rng)?;
        let dec_block = Block::new(&mut p, "headvae.dec.block", w, h, heads, &mut rng)?;
        let dec_out = Linear::new(&mut p, "headvae.dec.out", w, HEAD_POSE_DIM, 1.0, &mut rng)?;
        Ok(Self {
            config,
            params: p,
            enc_in,
            enc_block,
            enc_mu,
            enc_logvar,
            dec_in,
            dec_block,
            dec_out,
            mean: Tensor::zeros(&[HEAD_POSE_DIM]),
            std: Tensor::ones(&[HEAD_POSE_DIM]),
            trained: false,
        })
    }

    pub fn config(&self) -> &HeadVaeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Trains a model on the given pose sequences.
    pub fn train(poses: &[RawHeadPose], config: HeadVaeConfig) -> Result<(Self, HeadVaeReport)> {
        let mut vae = Self::new(config)?;
        let report = vae.fit(poses)?;
        Ok((vae, report))
    }

    fn fit(&mut self, poses: &[RawHeadPose]) -> Result<HeadVaeReport> {
        let cfg = self.config.clone();
        let shortest = poses.iter().map(|p| p.frames()).min().unwrap_or(0);
        if poses.is_empty() || shortest < cfg.window {
            return Err(Error::InsufficientData(format!(
                "need at least one sequence of {} frames, shortest is {shortest}",
                cfg.window
            )));
        }
        self.set_normalization(poses);
        let normed: Vec<Tensor> = poses.iter().map(|p| self.normalize(p.pose())).collect::<Result<_>>()?;
        let seg = cfg.segment.min(shortest).max(cfg.window);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_4ead);
        let opt = AdamW {
            lr: cfg.lr,
            ..AdamW::default()
        };
        let mut state = AdamState::new(&self.params);
        let warmup = ((cfg.steps as f32 * cfg.warmup_frac).ceil() as usize).max(1);
        let mut last = f64::NAN;
        for step in 0..cfg.steps {
            let mut rows = Vec::with_capacity(cfg.batch * seg * HEAD_POSE_DIM);
            for _ in 0..cfg.batch {
                let seq = &normed[rng.random_range(0..normed.len())];
                let start = rng.random_range(0..=seq.rows() - seg);
                rows.extend_from_slice(&seq.data()[start * HEAD_POSE_DIM..(start + seg) * HEAD_POSE_DIM]);
            }
            let x = Tensor::new(&[cfg.batch * seg, HEAD_POSE_DIM], rows)?;
            let eps = normal_tensor(&mut rng, &[cfg.batch * seg, HEAD_LATENT_DIM], 1.0);
            let beta = cfg.kl_weight * ((step + 1) as f32 / warmup as f32).min(1.0);

            let mut s = Session::new(&self.params);
            let xv = s.constant(x);
            let (mu, logvar) = self.encode_vars(&mut s, xv, seg)?;
            let half = s.scale(logvar, 0.5)?;
            let sd = s.exp(half)?;
            let e = s.constant(eps);
            let noise = s.mul(sd, e)?;
            let z = s.add(mu, noise)?;
            let out = self.decode_var(&mut s, z, seg)?;
            let recon = s.l1_loss(out, xv)?;
            let kl = kl_var(&mut s, mu, logvar)?;
            let kl = s.scale(kl, beta)?;
            let loss = s.add(recon, kl)?;
            last = s.value(loss).item() as f64;
            if !last.is_finite() {
                return Err(Error::NonFiniteLoss);
            }
            let mut grads = s.backward(loss)?;
            drop(s);
            grads.clip_global_norm(1.0);
            opt.step(&mut self.params, &grads, &mut state)?;
        }
        self.trained = true;
        let recon_l1 = self.reconstruction_l1(poses)?;
        if recon_l1 > cfg.recon_threshold {
            log::warn!("head VAE reconstruction L1 {recon_l1:.4} above threshold {}", cfg.recon_threshold);
        }
        Ok(HeadVaeReport {
            steps: cfg.steps,
            final_loss: last,
            recon_l1,
        })
    }

    fn set_normalization(&mut self, poses: &[RawHeadPose]) {
        let mut sum = [0f64; HEAD_POSE_DIM];
        let mut sq = [0f64; HEAD_POSE_DIM];
        let mut count = 0usize;
        for p in poses {
            for row in p.pose().data().chunks_exact(HEAD_POSE_DIM) {
                for c in 0..HEAD_POSE_DIM {
                    sum[c] += row[c] as f64;
                    sq[c] += (row[c] as f64).powi(2);
                }
                count += 1;
            }
        }
        let n = count as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let std: Vec<f32> = (0..HEAD_POSE_DIM)
            .map(|c| {
                let var = (sq[c] / n - (sum[c] / n).powi(2)).max(0.0);
                (var.sqrt() as f32).max(STD_FLOOR)
            })
            .collect();
        self.mean = Tensor::new(&[HEAD_POSE_DIM], mean).expect("mean shape");
        self.std = Tensor::new(&[HEAD_POSE_DIM], std).expect("std shape");
    }

    fn normalize(&self, pose: &Tensor) -> Result<Tensor> {
        let (m, s) = (self.mean.data(), self.std.data());
        let mut out = pose.clone();
        for row in out.data_mut().chunks_exact_mut(HEAD_POSE_DIM) {
            for c in 0..HEAD_POSE_DIM {
                row[c] = (row[c] - m[c]) / s[c];
            }
        }
        Ok(out)
    }

    fn encode_vars(&self, s: &mut Session, x: Var, segment: usize) -> Result<(Var, Var)> {
        let rows = s.value(x).rows();
        let positions = segment_positions(rows, segment);
        let band = self.config.band(segment);
        let h = self.enc_in.forward(s, x)?;
        let h = self.enc_block.forward(s, h, band, &positions)?;
        let mu = self.enc_mu.forward(s, h)?;
        let logvar = self.enc_logvar.forward(s, h)?;
        Ok((mu, logvar))
    }

    fn decode_var(&self, s: &mut Session, z: Var, segment: usize) -> Result<Var> {
        let rows = s.value(z).rows();
        let positions = segment_positions(rows, segment);
        let band = self.config.band(segment);
        let h = self.dec_in.forward(s, z)?;
        let h = self.dec_block.forward(s, h, band, &positions)?;
        self.dec_out.forward(s, h)
    }

    /// Posterior mean for every frame.
    pub fn encode(&self, poses: &RawHeadPose) -> Result<HeadLatent> {
        if !self.trained {
            return Err(Error::ModelNotLoaded("head VAE"));
        }
        let n = poses.frames();
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        let x = self.normalize(poses.pose())?;
        let mut s = Session::new(&self.params);
        let xv = s.constant(x);
        let (mu, _) = self.encode_vars(&mut s, xv, n)?;
        HeadLatent::new(s.value(mu).clone())
    }

    /// Decodes latents and renormalizes the quaternion part.
    pub fn decode(&self, latent: &HeadLatent) -> Result<RawHeadPose> {
        if !self.trained {
            return Err(Error::ModelNotLoaded("head VAE"));
        }
        let n = latent.frames();
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        let mut s = Session::new(&self.params);
        let z = s.constant(latent.latent().clone());
        let out = self.decode_var(&mut s, z, n)?;
        let mut raw = s.value(out).clone();
        let (m, sd) = (self.mean.data(), self.std.data());
        for row in raw.data_mut().chunks_exact_mut(HEAD_POSE_DIM) {
            for c in 0..HEAD_POSE_DIM {
                row[c] = row[c] * sd[c] + m[c];
            }
        }
        RawHeadPose::from_unnormalized(raw)
    }

    /// Mean absolute error of `decode(encode(x))` in raw pose units.
    pub fn reconstruction_l1(&self, poses: &[RawHeadPose]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for p in poses {
            let back = self.decode(&self.encode(p)?)?;
            total += p
                .pose()
                .data()
                .iter()
                .zip(back.pose().data())
                .map(|(a, b)| (a - b).abs() as f64)
                .sum::<f64>();
            count += p.pose().numel();
        }
        if count == 0 {
            return Err(Error::EmptyInput);
        }
        Ok(total / count as f64)
    }

    /// All tensors needed to rebuild the model, with canonical names.
    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.params.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
        out.push(("headvae.norm.mean".into(), self.mean.clone()));
        out.push(("headvae.norm.std".into(), self.std.clone()));
        out.push(("headvae.config".into(), self.config.to_tensor()));
        out
    }

    /// Rebuilds a trained model from tensors produced by [`HeadVae::tensors`].
    /// Unrelated tensors in the list are ignored.
    pub fn from_tensors(tensors: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let cfg_t = find("headvae.config").ok_or(Error::ModelNotLoaded("head VAE"))?;
        let mut vae = Self::new(HeadVaeConfig::from_tensor(cfg_t)?)?;
        let ours: Vec<(&str, &Tensor)> = tensors
            .iter()
            .filter(|(n, _)| vae.params.id(n).is_some())
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        if ours.len() != vae.params.len() {
            return Err(Error::ModelNotLoaded("head VAE"));
        }
        vae.params.load_named(ours)?;
        vae.mean = find("headvae.norm.mean").ok_or(Error::ModelNotLoaded("head VAE"))?.clone();
        vae.std = find("headvae.norm.std").ok_or(Error::ModelNotLoaded("head VAE"))?.clone();
        vae.trained = true;
        Ok(vae)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let t = self.tensors();
        let refs: Vec<(&str, &Tensor)> = t.iter().map(|(n, t)| (n.as_str(), t)).collect();
        ndgrad::checkpoint::save(path, &refs)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(&ndgrad::checkpoint::load(path)?)
    }
}

fn kl_var(s: &mut Session, mu: Var, logvar: Var) -> Result<Var> {
    let ones = s.constant(Tensor::ones(&[HEAD_LATENT_DIM]));
    let mu2 = s.mul(mu, mu)?;
    let e = s.exp(logvar)?;
    let t = s.add(mu2, e)?;
    let t = s.sub(t, logvar)?;
    let t = s.sub(t, ones)?;
    let m = s.mean(t)?;
    Ok(s.scale(m, 0.5)?)
}

/// KL divergence of diagonal Gaussians from the standard normal, averaged over elements.
pub fn kl_divergence(mu: &Tensor, logvar: &Tensor) -> Result<f64> {
    if mu.shape() != logvar.shape() {
        return Err(Error::ShapeMismatch(mu.shape().to_vec(), logvar.shape().to_vec()));
    }
    if mu.numel() == 0 {
        return Err(Error::EmptyInput);
    }
    let total: f64 = mu
        .data()
        .iter()
        .zip(logvar.data())
        .map(|(&m, &lv)| {
            let (m, lv) = (m as f64, lv as f64);
            0.5 * (m * m + lv.exp() - lv - 1.0)
        })
        .sum();
    Ok(total / mu.numel() as f64)
}
