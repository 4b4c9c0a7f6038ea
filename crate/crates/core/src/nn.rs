//! Transformer building blocks shared by the generator, the head-pose VAE and
//! the text front end. Parameters live in a [`ParamStore`]; layers only keep
//! [`ParamId`]s.

use std::ops::{Deref, DerefMut};

use ndgrad::{Band, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const ROPE_BASE: f32 = 10_000.0;
pub const TIME_FEATURES: usize = 32;

/// A tape bound to the parameter store it reads from.
pub struct Session<'a> {
    pub tape: Tape,
    params: &'a ParamStore,
}

impl<'a> Session<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            params,
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }
}

impl Deref for Session<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Session<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

pub fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f32) -> Tensor {
    let n: usize = shape.iter().product();
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Normal::new(0.0f32, std).expect("finite std");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Normal init with std `gain / sqrt(in_dim)`, zero bias.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f32,
        rng: &mut R,
    ) -> Result<Self> {
        let std = gain / (in_dim as f32).sqrt();
        let w = store.insert(format!("{name}.w"), normal_tensor(rng, &[in_dim, out_dim], std))?;
        let b = store.insert(format!("{name}.b"), Tensor::zeros(&[out_dim]))?;
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.w), s.p(self.b));
        let y = s.matmul(x, w)?;
        Ok(s.add(y, b)?)
    }

    pub fn num_params(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.insert(format!("{name}.g"), Tensor::ones(&[dim]))?,
            beta: store.insert(format!("{name}.b"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (g, b) = (s.p(self.gamma), s.p(self.beta));
        Ok(s.layernorm(x, g, b)?)
    }
}

/// Multi-head self-attention restricted to a band of neighbouring frames,
/// with rotary position embeddings on queries and keys.
#[derive(Clone, Debug)]
pub struct WindowedAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl WindowedAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::ConfigMismatch(format!("width {dim} not divisible by {heads} heads")));
        }
        if (dim / heads) % 2 != 0 {
            return Err(Error::OddHeadDim(dim / heads));
        }
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.wq"), dim, dim, 1.0, rng)?,
            wk: Linear::new(store, &format!("{name}.wk"), dim, dim, 1.0, rng)?,
            wv: Linear::new(store, &format!("{name}.wv"), dim, dim, 1.0, rng)?,
            wo: Linear::new(store, &format!("{name}.wo"), dim, dim, 0.5, rng)?,
            heads,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var, band: Band, positions: &[usize]) -> Result<Var> {
        let dim = self.wq.out_dim;
        let hd = dim / self.heads;
        let q = self.wq.forward(s, x)?;
        let k = self.wk.forward(s, x)?;
        let v = self.wv.forward(s, x)?;
        let scale = 1.0 / (hd as f32).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * hd, (h + 1) * hd);
            let qh = s.slice_last(q, lo, hi)?;
            let kh = s.slice_last(k, lo, hi)?;
            let vh = s.slice_last(v, lo, hi)?;
            let qh = rotary_embed(s, qh, positions)?;
            let kh = rotary_embed(s, kh, positions)?;
            let scores = s.band_scores(qh, kh, band)?;
            let scores = s.scale(scores, scale)?;
            let attn = s.softmax(scores)?;
            outs.push(s.band_mix(attn, vh, band)?);
        }
        let joined = if outs.len() == 1 { outs[0] } else { s.concat_last(&outs)? };
        self.wo.forward(s, joined)
    }

    pub fn num_params(dim: usize) -> usize {
        4 * Linear::num_params(dim, dim)
    }
}

/// Rotates `(2i, 2i+1)` pairs by position-dependent angles.
pub fn rotary_embed(s: &mut Session, x: Var, positions: &[usize]) -> Result<Var> {
    let d = s.value(x).last_dim();
    if d % 2 != 0 {
        return Err(Error::OddHeadDim(d));
    }
    Ok(s.rotary(x, positions, ROPE_BASE)?)
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, 1.0, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, 0.5, rng)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.fc1.forward(s, x)?;
        let h = s.gelu(h)?;
        self.fc2.forward(s, h)
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: WindowedAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl Block {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: WindowedAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, hidden, rng)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var, band: Band, positions: &[usize]) -> Result<Var> {
        let h = self.ln1.forward(s, x)?;
        let h = self.attn.forward(s, h, band, positions)?;
        let x = s.add(x, h)?;
        let h = self.ln2.forward(s, x)?;
        let h = self.ff.forward(s, h)?;
        Ok(s.add(x, h)?)
    }

    pub fn num_params(dim: usize, hidden: usize) -> usize {
        2 * dim
            + WindowedAttention::num_params(dim)
            + 2 * dim
            + Linear::num_params(dim, hidden)
            + Linear::num_params(hidden, dim)
    }
}

/// Position of each row within its segment.
pub fn segment_positions(rows: usize, segment: usize) -> Vec<usize> {
    (0..rows).map(|r| r % segment).collect()
}

/// Sinusoidal features of a flow time `t ∈ [0, 1]`, width [`TIME_FEATURES`].
pub fn time_features(t: f32) -> Vec<f32> {
    let half = TIME_FEATURES / 2;
    let mut out = Vec::with_capacity(TIME_FEATURES);
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = 1000.0 * t as f64 * freq;
        out.push(arg.sin() as f32);
        out.push(arg.cos() as f32);
    }
    out
}

/// Time features repeated for every row of every segment.
pub fn time_feature_rows(ts: &[f32], segment: usize) -> Tensor {
    let mut data = Vec::with_capacity(ts.len() * segment * TIME_FEATURES);
    for &t in ts {
        let f = time_features(t);
        for _ in 0..segment {
            data.extend_from_slice(&f);
        }
    }
    Tensor::new(&[ts.len() * segment, TIME_FEATURES], data).expect("time feature shape")
}
