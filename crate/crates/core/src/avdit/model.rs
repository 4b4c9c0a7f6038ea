use std::path::Path;

use ndgrad::{ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DitConfig, Fusion, Variant};
use crate::codecs::{TokenSequence, MEL_BINS, PARTICIPANT_DIM, TOKEN_DIM};
use crate::error::{Error, Result};
use crate::nn::{segment_positions, time_feature_rows, Block, LayerNorm, Linear, Session, TIME_FEATURES};

const CONFIG_TENSOR: &str = "dit.config";

/// Conditioning for a batch of `times.len()` sequences of `segment` frames,
/// stacked along rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    pub tokens: Tensor,
    /// Flow time per sequence.
    pub times: Vec<f32>,
    /// 85-wide participant input; zeros when absent.
    pub participant: Option<Tensor>,
    /// Audio fed to the vision stack of the cascaded variant; zeros when absent.
    pub audio_context: Option<Tensor>,
    pub segment: usize,
}

impl ConditionBundle {
    pub fn new(tokens: &TokenSequence, t: f32) -> Self {
        Self {
            tokens: tokens.logits().clone(),
            times: vec![t],
            participant: None,
            audio_context: None,
            segment: tokens.frames(),
        }
    }

    pub fn with_participant(mut self, participant: Tensor) -> Self {
        self.participant = Some(participant);
        self
    }

    pub fn with_audio_context(mut self, audio: Tensor) -> Self {
        self.audio_context = Some(audio);
        self
    }

    pub fn rows(&self) -> usize {
        self.tokens.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let rows = self.rows();
        if self.tokens.rank() != 2 || self.tokens.last_dim() != TOKEN_DIM {
            return Err(Error::DimensionMismatch {
                expected: TOKEN_DIM,
                got: self.tokens.last_dim(),
            });
        }
        if self.segment == 0 || self.segment * self.times.len() != rows {
            return Err(Error::FrameCountMismatch(format!(
                "{rows} token rows for {} sequences of {} frames",
                self.times.len(),
                self.segment
            )));
        }
        if let Some(&t) = self.times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::TOutOfRange(t));
        }
        for (what, t, width) in [
            ("participant", &self.participant, PARTICIPANT_DIM),
            ("audio context", &self.audio_context, MEL_BINS),
        ] {
            if let Some(t) = t {
                if t.rows() != rows {
                    return Err(Error::FrameCountMismatch(format!("{what} has {} rows, tokens {rows}", t.rows())));
                }
                if t.last_dim() != width {
                    return Err(Error::DimensionMismatch {
                        expected: width,
                        got: t.last_dim(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// One transformer stack: input projection plus time embedding, blocks,
/// final norm and a zero-initialized output projection.
#[derive(Clone, Debug)]
pub struct Stack {
    pub in_proj: Linear,
    pub time_proj: Linear,
    pub blocks: Vec<Block>,
    pub out_norm: LayerNorm,
    pub out_proj: Linear,
}

impl Stack {
    fn new(store: &mut ParamStore, name: &str, cfg: &DitConfig, input: usize, output: usize, seed: u64, stream: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let d = cfg.width;
        let in_proj = Linear::new(store, &format!("{name}.in"), input, d, 1.0, &mut rng)?;
        let time_proj = Linear::new(store, &format!("{name}.time"), TIME_FEATURES, d, 1.0, &mut rng)?;
        let blocks = (0..cfg.blocks)
            .map(|l| Block::new(store, &format!("{name}.block{l}"), d, cfg.hidden, cfg.heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let out_norm = LayerNorm::new(store, &format!("{name}.out_norm"), d)?;
        let out_proj = Linear::new(store, &format!("{name}.out"), d, output, 0.0, &mut rng)?;
        Ok(Self {
            in_proj,
            time_proj,
            blocks,
            out_norm,
            out_proj,
        })
    }

    fn embed(&self, s: &mut Session, x: Var, time: Var) -> Result<Var> {
        let h = self.in_proj.forward(s, x)?;
        let tt = self.time_proj.forward(s, time)?;
        Ok(s.add(h, tt)?)
    }

    fn head(&self, s: &mut Session, h: Var) -> Result<Var> {
        let h = self.out_norm.forward(s, h)?;
        self.out_proj.forward(s, h)
    }
}

/// The velocity network for one of the four variants.
#[derive(Clone, Debug)]
pub struct AvDit {
    config: DitConfig,
    variant: Variant,
    params: ParamStore,
    /// Audio stack, or the single stack of the shared variant.
    audio: Stack,
    vision: Option<Stack>,
    fusion: Vec<Fusion>,
}

impl AvDit {
    /// Stacks draw from independent seeded streams, so the audio stack of
    /// every two-stack variant starts from identical weights.
    pub fn new(config: DitConfig, variant: Variant, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let cond = TOKEN_DIM + PARTICIPANT_DIM;
        let vd = config.vision_dim();
        let (audio, vision) = match variant {
            Variant::Shared => {
                let both = MEL_BINS + vd;
                (Stack::new(&mut params, "shared", &config, both + cond, both, seed, 3)?, None)
            }
            _ => {
                let audio = Stack::new(&mut params, "audio", &config, MEL_BINS + cond, MEL_BINS, seed, 1)?;
                let extra = if variant == Variant::Cascaded { MEL_BINS } else { 0 };
                let vision = Stack::new(&mut params, "vision", &config, vd + cond + extra, vd, seed, 2)?;
                (audio, Some(vision))
            }
        };
        let fusion = if variant == Variant::AvFlow {
            (0..config.blocks)
                .map(|l| Fusion::new(&mut params, &format!("fusion.block{l}"), config.width))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            config,
            variant,
            params,
            audio,
            vision,
            fusion,
        })
    }

    pub fn config(&self) -> &DitConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    pub fn fusion(&self) -> &[Fusion] {
        &self.fusion
    }

    /// Pins every fusion parameter at zero and excludes it from training.
    pub fn freeze_fusion_at_zero(&mut self) -> Result<()> {
        for f in &self.fusion {
            for id in [f.u, f.b, f.v, f.c] {
                let shape = self.params.get(id).shape().to_vec();
                self.params.set(id, Tensor::zeros(&shape))?;
                self.params.set_trainable(id, false);
            }
        }
        Ok(())
    }

    fn zeros_or(t: &Option<Tensor>, rows: usize, width: usize) -> Tensor {
        t.clone().unwrap_or_else(|| Tensor::zeros(&[rows, width]))
    }

    /// Velocity fields for both streams. `noisy_audio` is `[rows, 80]`,
    /// `noisy_vision` is `[rows, 8 + D_f]`.
    pub fn forward(&self, s: &mut Session, noisy_audio: Var, noisy_vision: Var, cond: &ConditionBundle) -> Result<(Var, Var)> {
        cond.validate()?;
        let rows = cond.rows();
        let vd = self.config.vision_dim();
        for (what, v, width) in [("audio", noisy_audio, MEL_BINS), ("vision", noisy_vision, vd)] {
            let shape = s.shape(v).to_vec();
            if shape.len() != 2 || shape[0] != rows {
                return Err(Error::FrameCountMismatch(format!("{what} stream has shape {shape:?}, tokens {rows} rows")));
            }
            if shape[1] != width {
                return Err(Error::ConfigMismatch(format!("{what} stream width {} but model expects {width}", shape[1])));
            }
        }
        let seg = cond.segment;
        let positions = segment_positions(rows, seg);
        let tokens = s.constant(cond.tokens.clone());
        let part = s.constant(Self::zeros_or(&cond.participant, rows, PARTICIPANT_DIM));
        let time = s.constant(time_feature_rows(&cond.times, seg));

        let Some(vision) = &self.vision else {
            let x = s.concat_last(&[noisy_audio, noisy_vision, tokens, part])?;
            let mut h = self.audio.embed(s, x, time)?;
            for (l, b) in self.audio.blocks.iter().enumerate() {
                h = b.forward(s, h, self.config.band(l, seg), &positions)?;
            }
            let out = self.audio.head(s, h)?;
            let a = s.slice_last(out, 0, MEL_BINS)?;
            let v = s.slice_last(out, MEL_BINS, MEL_BINS + vd)?;
            return Ok((a, v));
        };

        let xa = s.concat_last(&[noisy_audio, tokens, part])?;
        let xv = if self.variant == Variant::Cascaded {
            let ctx = s.constant(Self::zeros_or(&cond.audio_context, rows, MEL_BINS));
            s.concat_last(&[noisy_vision, tokens, part, ctx])?
        } else {
            s.concat_last(&[noisy_vision, tokens, part])?
        };
        let mut ha = self.audio.embed(s, xa, time)?;
        let mut hv = vision.embed(s, xv, time)?;
        for l in 0..self.config.blocks {
            let band = self.config.band(l, seg);
            ha = self.audio.blocks[l].forward(s, ha, band, &positions)?;
            hv = vision.blocks[l].forward(s, hv, band, &positions)?;
            if let Some(f) = self.fusion.get(l) {
                (ha, hv) = f.forward(s, ha, hv)?;
            }
        }
        let a = self.audio.head(s, ha)?;
        let v = vision.head(s, hv)?;
        Ok((a, v))
    }

    /// Forward pass without gradients.
    pub fn predict(&self, noisy_audio: &Tensor, noisy_vision: &Tensor, cond: &ConditionBundle) -> Result<(Tensor, Tensor)> {
        let mut s = Session::new(&self.params);
        let a = s.constant(noisy_audio.clone());
        let v = s.constant(noisy_vision.clone());
        let (va, vv) = self.forward(&mut s, a, v, cond)?;
        Ok((s.value(va).clone(), s.value(vv).clone()))
    }

    fn config_tensor(&self) -> Tensor {
        let c = &self.config;
        let v = [c.blocks, c.width, c.hidden, c.heads, c.window, c.lookahead, c.face_dim, self.variant.id() as usize];
        Tensor::new(&[8], v.iter().map(|&x| x as f32).collect()).expect("config tensor")
    }

    /// Parameters plus a small tensor describing the architecture.
    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.params.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
        out.push((CONFIG_TENSOR.into(), self.config_tensor()));
        out
    }

    /// Rebuilds a model from checkpoint tensors. Tensors that belong to other
    /// components (normalization, head VAE) are ignored.
    pub fn from_tensors(tensors: &[(String, Tensor)]) -> Result<Self> {
        let cfg = tensors
            .iter()
            .find(|(n, _)| n == CONFIG_TENSOR)
            .map(|(_, t)| t)
            .ok_or(Error::ModelNotLoaded("network"))?;
        if cfg.numel() != 8 {
            return Err(Error::ConfigMismatch("network config tensor must hold 8 values".into()));
        }
        let d: Vec<usize> = cfg.data().iter().map(|&x| x as usize).collect();
        let config = DitConfig {
            blocks: d[0],
            width: d[1],
            hidden: d[2],
            heads: d[3],
            window: d[4],
            lookahead: d[5],
            face_dim: d[6],
        };
        let variant = Variant::from_id(d[7] as u8).ok_or_else(|| Error::ConfigMismatch(format!("variant id {}", d[7])))?;
        let mut model = Self::new(config, variant, 0)?;
        let ours: Vec<(&str, &Tensor)> = tensors
            .iter()
            .filter(|(n, _)| model.params.id(n).is_some())
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        if ours.len() != model.params.len() {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint holds {} of {} network tensors",
                ours.len(),
                model.params.len()
            )));
        }
        model.params.load_named(ours)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path, extra: &[(&str, &Tensor)]) -> Result<()> {
        let t = self.tensors();
        let mut refs: Vec<(&str, &Tensor)> = t.iter().map(|(n, t)| (n.as_str(), t)).collect();
        refs.extend_from_slice(extra);
        ndgrad::checkpoint::save(path, &refs)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal_tensor;

    fn tiny() -> DitConfig {
        DitConfig {
            blocks: 2,
            width: 16,
            hidden: 24,
            heads: 2,
            window: 10,
            lookahead: 2,
            face_dim: 6,
        }
    }

    #[test]
    fn output_shapes() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for variant in Variant::ALL {
            let m = AvDit::new(cfg.clone(), variant, 3).unwrap();
            let n = 12;
            let tokens = TokenSequence::new(normal_tensor(&mut rng, &[n, 29], 1.0)).unwrap();
            let cond = ConditionBundle::new(&tokens, 0.3);
            let (a, v) = m
                .predict(&Tensor::zeros(&[n, 80]), &Tensor::zeros(&[n, cfg.vision_dim()]), &cond)
                .unwrap();
            assert_eq!(a.shape(), &[n, 80]);
            assert_eq!(v.shape(), &[n, 14]);
            assert_eq!(m.num_params(), cfg.num_params(variant), "{variant}");
        }
    }

    #[test]
    fn frame_mismatch_is_reported() {
        let m = AvDit::new(tiny(), Variant::AvFlow, 0).unwrap();
        let tokens = TokenSequence::new(Tensor::zeros(&[5, 29])).unwrap();
        let cond = ConditionBundle::new(&tokens, 0.5);
        let err = m.predict(&Tensor::zeros(&[6, 80]), &Tensor::zeros(&[5, 14]), &cond).unwrap_err();
        assert!(matches!(err, Error::FrameCountMismatch(_)));
        let err = m.predict(&Tensor::zeros(&[5, 80]), &Tensor::zeros(&[5, 13]), &cond).unwrap_err();
        assert!(matches!(err, Error::ConfigMismatch(_)));
    }

    #[test]
    fn out_of_range_time_is_rejected() {
        let m = AvDit::new(tiny(), Variant::Separate, 0).unwrap();
        let tokens = TokenSequence::new(Tensor::zeros(&[5, 29])).unwrap();
        let cond = ConditionBundle::new(&tokens, 1.5);
        let err = m.predict(&Tensor::zeros(&[5, 80]), &Tensor::zeros(&[5, 14]), &cond).unwrap_err();
        assert!(matches!(err, Error::TOutOfRange(_)));
    }

    #[test]
    fn tensors_roundtrip() {
        let m = AvDit::new(tiny(), Variant::Cascaded, 9).unwrap();
        let back = AvDit::from_tensors(&m.tensors()).unwrap();
        assert_eq!(back.variant(), Variant::Cascaded);
        assert_eq!(back.config(), m.config());
        for (id, name, t) in m.params().iter() {
            assert_eq!(back.params().by_name(name).unwrap(), t, "{name} {id:?}");
        }
    }
}
