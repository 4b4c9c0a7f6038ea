//! Text front end: characters to per-frame token logits through symbol
//! embeddings, a convolutional encoder, a duration head and a small
//! flow-matching transformer.

use std::path::Path;

use ndgrad::{AdamState, AdamW, Band, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codecs::{char_index, TokenSequence, ALPHABET, TOKEN_DIM};
use crate::error::{Error, Result};
use crate::flowmatch::{euler_solve, ot_path, target_velocity};
use crate::nn::{normal_tensor, segment_positions, time_feature_rows, Block, LayerNorm, Linear, Session, TIME_FEATURES};
use crate::synthcorpus::{Corpus, SymbolLexicon};

const CONFIG_TENSOR: &str = "tt.config";
const CONV_TAPS: usize = 3;
const INITIAL_DURATION: f32 = 8.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextTokensConfig {
    /// Symbol embedding width.
    pub embed: usize,
    pub conv_layers: usize,
    /// Projector transformer width.
    pub width: usize,
    pub hidden: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Attention reach of the projector on each side, in frames.
    pub reach: usize,
    pub steps: usize,
    /// Symbols per training window.
    pub window_symbols: usize,
    pub lr: f32,
    pub duration_weight: f32,
    pub flow_steps: usize,
    pub sigma_min: f32,
    pub seed: u64,
}

impl Default for TextTokensConfig {
    fn default() -> Self {
        Self {
            embed: 192,
            conv_layers: 3,
            width: 64,
            hidden: 128,
            heads: 2,
            blocks: 3,
            reach: 6,
            steps: 400,
            window_symbols: 40,
            lr: 2e-3,
            duration_weight: 0.1,
            flow_steps: 8,
            sigma_min: 1e-6,
            seed: 0,
        }
    }
}

impl TextTokensConfig {
    fn to_tensor(&self) -> Tensor {
        let v = [
            self.embed,
            self.conv_layers,
            self.width,
            self.hidden,
            self.heads,
            self.blocks,
            self.reach,
            self.flow_steps,
        ];
        let mut data: Vec<f32> = v.iter().map(|&x| x as f32).collect();
        data.push(self.sigma_min);
        // seed split into two exactly representable halves
        data.push((self.seed & 0xffff) as f32);
        data.push(((self.seed >> 16) & 0xffff) as f32);
        Tensor::new(&[data.len()], data).expect("config shape")
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        let d = t.data();
        if d.len() != 11 {
            return Err(Error::ModelNotLoaded("text-to-tokens"));
        }
        Ok(Self {
            embed: d[0] as usize,
            conv_layers: d[1] as usize,
            width: d[2] as usize,
            hidden: d[3] as usize,
            heads: d[4] as usize,
            blocks: d[5] as usize,
            reach: d[6] as usize,
            flow_steps: d[7] as usize,
            sigma_min: d[8],
            seed: d[9] as u64 | ((d[10] as u64) << 16),
            ..Self::default()
        })
    }
}

#[derive(Clone, Debug)]
struct Conv {
    lin: Linear,
    norm: LayerNorm,
}

/// Trained (or freshly initialized) text-to-tokens weights.
#[derive(Clone, Debug)]
pub struct TextTokensParams {
    config: TextTokensConfig,
    params: ParamStore,
    embed: ndgrad::ParamId,
    convs: Vec<Conv>,
    duration: Linear,
    feat_proj: Linear,
    in_proj: Linear,
    time_proj: Linear,
    blocks: Vec<Block>,
    out_norm: LayerNorm,
    out_proj: Linear,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TextTokensReport {
    pub losses: Vec<f64>,
    pub duration_losses: Vec<f64>,
}

/// Alphabet indices of `text`.
pub fn encode_text(text: &str) -> Result<Vec<usize>> {
    if text.is_empty() {
        return Err(Error::EmptyText);
    }
    text.chars().map(|c| char_index(c).ok_or(Error::UnknownSymbol(c))).collect()
}

/// Round half up, at least one frame.
pub fn round_duration(d: f32) -> usize {
    ((d + 0.5).floor() as i64).max(1) as usize
}

fn expand(durations: &[usize]) -> Vec<usize> {
    durations.iter().enumerate().flat_map(|(i, &d)| std::iter::repeat_n(i, d)).collect()
}

impl TextTokensParams {
    pub fn new(config: TextTokensConfig) -> Result<Self> {
        if config.embed == 0 || config.width % (2 * config.heads.max(1)) != 0 || config.flow_steps == 0 {
            return Err(Error::ConfigInvalid("text-to-tokens dims".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let e = config.embed;
        let embed = store.insert("tt.embed", normal_tensor(&mut rng, &[ALPHABET.len(), e], 1.0))?;
        let convs = (0..config.conv_layers)
            .map(|l| {
                Ok(Conv {
                    lin: Linear::new(&mut store, &format!("tt.conv{l}"), CONV_TAPS * e, e, 1.0, &mut rng)?,
                    norm: LayerNorm::new(&mut store, &format!("tt.conv{l}.norm"), e)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let duration = Linear::new(&mut store, "tt.duration", e, 1, 0.0, &mut rng)?;
        store.set(duration.b, Tensor::full(&[1], INITIAL_DURATION.ln()))?;
        let d = config.width;
        let feat_proj = Linear::new(&mut store, "tt.feat", e, d, 1.0, &mut rng)?;
        let in_proj = Linear::new(&mut store, "tt.in", TOKEN_DIM, d, 1.0, &mut rng)?;
        let time_proj = Linear::new(&mut store, "tt.time", TIME_FEATURES, d, 1.0, &mut rng)?;
        let blocks = (0..config.blocks)
            .map(|l| Block::new(&mut store, &format!("tt.block{l}"), d, config.hidden, config.heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let out_norm = LayerNorm::new(&mut store, "tt.out_norm", d)?;
        let out_proj = Linear::new(&mut store, "tt.out", d, TOKEN_DIM, 0.0, &mut rng)?;
        Ok(Self {
            config,
            params: store,
            embed,
            convs,
            duration,
            feat_proj,
            in_proj,
            time_proj,
            blocks,
            out_norm,
            out_proj,
        })
    }

    pub fn config(&self) -> &TextTokensConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Encoder features `[L, embed]` and log-durations `[L, 1]`.
    fn encode(&self, s: &mut Session, symbols: &[usize]) -> Result<(Var, Var)> {
        let l = symbols.len();
        let table = s.p(self.embed);
        let mut x = s.gather_rows(table, symbols)?;
        for conv in &self.convs {
            let prev = s.shift_rows(x, 1, l)?;
            let next = s.shift_rows(x, -1, l)?;
            let taps = s.concat_last(&[prev, x, next])?;
            let h = conv.lin.forward(s, taps)?;
            let h = s.gelu(h)?;
            let h = s.add(x, h)?;
            x = conv.norm.forward(s, h)?;
        }
        let logd = self.duration.forward(s, x)?;
        Ok((x, logd))
    }

    fn band(&self, frames: usize) -> Band {
        Band {
            behind: self.config.reach,
            ahead: self.config.reach,
            segment: frames,
        }
    }

    /// Velocity of the projector for noisy logits `x_t` given upsampled features.
    fn velocity(&self, s: &mut Session, x_t: Var, features: Var, t: f32) -> Result<Var> {
        let n = s.shape(x_t)[0];
        let h = self.in_proj.forward(s, x_t)?;
        let f = self.feat_proj.forward(s, features)?;
        let tf = s.constant(time_feature_rows(&[t], n));
        let tt = self.time_proj.forward(s, tf)?;
        let h = s.add(h, f)?;
        let mut h = s.add(h, tt)?;
        let positions = segment_positions(n, n);
        for b in &self.blocks {
            h = b.forward(s, h, self.band(n), &positions)?;
        }
        let h = self.out_norm.forward(s, h)?;
        self.out_proj.forward(s, h)
    }

    /// Rounded per-symbol durations in frames.
    pub fn predict_durations(&self, text: &str) -> Result<Vec<usize>> {
        let symbols = encode_text(text)?;
        let mut s = Session::new(&self.params);
        let (_, logd) = self.encode(&mut s, &symbols)?;
        Ok(s.value(logd).data().iter().map(|&v| round_duration(v.exp())).collect())
    }

    /// Token logits for `text`, sampled with the given generator.
    pub fn text_to_tokens_with<R: Rng>(&self, text: &str, rng: &mut R) -> Result<TokenSequence> {
        let symbols = encode_text(text)?;
        let (features, durations) = {
            let mut s = Session::new(&self.params);
            let (x, logd) = self.encode(&mut s, &symbols)?;
            let durations: Vec<usize> = s.value(logd).data().iter().map(|&v| round_duration(v.exp())).collect();
            (s.value(x).clone(), durations)
        };
        let idx = expand(&durations);
        let rows: Vec<f32> = idx.iter().flat_map(|&i| features.row(i).iter().copied()).collect();
        let up = Tensor::new(&[idx.len(), features.last_dim()], rows)?;
        let n = idx.len();
        let x0 = normal_tensor(rng, &[n, TOKEN_DIM], 1.0);
        let logits = euler_solve(
            |t, x| {
                let mut s = Session::new(&self.params);
                let xv = s.constant(x.clone());
                let fv = s.constant(up.clone());
                let v = self.velocity(&mut s, xv, fv, t)?;
                Ok(s.value(v).clone())
            },
            &x0,
            self.config.flow_steps,
        )?;
        TokenSequence::new(logits)
    }

    /// Token logits for `text` with noise seeded from the model's own seed.
    pub fn text_to_tokens(&self, text: &str) -> Result<TokenSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x7e47);
        self.text_to_tokens_with(text, &mut rng)
    }

    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.params.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
        out.push((CONFIG_TENSOR.to_string(), self.config.to_tensor()));
        out
    }

    pub fn from_tensors(tensors: &[(String, Tensor)]) -> Result<Self> {
        let cfg = tensors
            .iter()
            .find(|(n, _)| n == CONFIG_TENSOR)
            .ok_or(Error::ModelNotLoaded("text-to-tokens"))?;
        let mut model = Self::new(TextTokensConfig::from_tensor(&cfg.1)?)?;
        let ours: Vec<(&str, &Tensor)> = tensors
            .iter()
            .filter(|(n, _)| model.params.id(n).is_some())
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        if ours.len() != model.params.len() {
            return Err(Error::ModelNotLoaded("text-to-tokens"));
        }
        model.params.load_named(ours)?;
        Ok(model)
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

/// One record turned into training material: alphabet index and duration
/// per symbol, plus the logits those symbols produced.
#[derive(Clone, Debug)]
pub struct TextExample {
    pub symbols: Vec<usize>,
    pub durations: Vec<usize>,
    pub logits: Tensor,
}

/// Training examples from every record that carries symbol annotations.
pub fn text_examples(corpus: &Corpus) -> Result<Vec<TextExample>> {
    let lex = SymbolLexicon::standard(corpus.face_dim())?;
    if let Some(h) = corpus.header.lexicon_hash {
        if h != lex.hash() {
            return Err(Error::BadLexicon("corpus was generated with a different lexicon".into()));
        }
    }
    let mut out = Vec::new();
    for rec in &corpus.records {
        let Some(ann) = &rec.annotations else { continue };
        if ann.token_segments.is_empty() {
            continue;
        }
        let mut symbols = Vec::with_capacity(ann.token_segments.len());
        let mut durations = Vec::with_capacity(ann.token_segments.len());
        for &(sym, len) in &ann.token_segments {
            let s = lex.symbols.get(sym as usize).ok_or_else(|| Error::BadLexicon(format!("symbol index {sym}")))?;
            symbols.push(char_index(s.ch).ok_or(Error::UnknownSymbol(s.ch))?);
            durations.push(len as usize);
        }
        out.push(TextExample {
            symbols,
            durations,
            logits: rec.tokens.clone(),
        });
    }
    Ok(out)
}

/// Fits the duration head (L1 on frames) and the logit projector (conditional
/// flow matching) jointly on annotated records.
pub fn train_text_to_tokens(corpus: &Corpus, config: TextTokensConfig) -> Result<(TextTokensParams, TextTokensReport)> {
    let examples = text_examples(corpus)?;
    train_on_examples(&examples, config)
}

pub fn train_on_examples(examples: &[TextExample], config: TextTokensConfig) -> Result<(TextTokensParams, TextTokensReport)> {
    if examples.is_empty() {
        return Err(Error::InsufficientData("no records carry symbol annotations".into()));
    }
    let mut model = TextTokensParams::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7e47_7a1e);
    let opt = AdamW {
        lr: config.lr,
        ..AdamW::default()
    };
    let mut state = AdamState::new(&model.params);
    let mut report = TextTokensReport::default();
    for _ in 0..config.steps {
        let ex = &examples[rng.random_range(0..examples.len())];
        let len = config.window_symbols.min(ex.symbols.len()).max(1);
        let first = rng.random_range(0..=ex.symbols.len() - len);
        let symbols = &ex.symbols[first..first + len];
        let durations = &ex.durations[first..first + len];
        let frame0: usize = ex.durations[..first].iter().sum();
        let frames: usize = durations.iter().sum();
        let x1 = ex.logits.slice_rows(frame0, frame0 + frames)?;
        let x0 = normal_tensor(&mut rng, &[frames, TOKEN_DIM], 1.0);
        let t: f32 = rng.random();
        let x_t = ot_path(&x0, &x1, t, config.sigma_min)?;
        let u = target_velocity(&x0, &x1, config.sigma_min)?;
        let target_d = Tensor::new(&[len, 1], durations.iter().map(|&d| d as f32).collect())?;

        let mut s = Session::new(&model.params);
        let (x, logd) = model.encode(&mut s, symbols)?;
        let d = s.exp(logd)?;
        let td = s.constant(target_d);
        let dur_loss = s.l1_loss(d, td)?;
        let up = s.gather_rows(x, &expand(durations))?;
        let xt = s.constant(x_t);
        let v = model.velocity(&mut s, xt, up, t)?;
        let uv = s.constant(u);
        let flow_loss = s.l2_loss(v, uv)?;
        let weighted = s.scale(dur_loss, config.duration_weight)?;
        let loss = s.add(flow_loss, weighted)?;
        let value = s.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        report.losses.push(value);
        report.duration_losses.push(s.value(dur_loss).item() as f64);
        let mut grads = s.backward(loss)?;
        drop(s);
        grads.clip_global_norm(1.0);
        opt.step(&mut model.params, &grads, &mut state)?;
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TextTokensConfig {
        TextTokensConfig {
            embed: 16,
            width: 16,
            hidden: 32,
            heads: 2,
            blocks: 1,
            steps: 0,
            ..TextTokensConfig::default()
        }
    }

    #[test]
    fn rounding_is_half_up_with_floor_of_one() {
        assert_eq!(round_duration(2.5), 3);
        assert_eq!(round_duration(2.49), 2);
        assert_eq!(round_duration(0.2), 1);
        assert_eq!(round_duration(-3.0), 1);
    }

    #[test]
    fn output_length_is_sum_of_durations() {
        let m = TextTokensParams::new(tiny()).unwrap();
        let d = m.predict_durations("ma pa").unwrap();
        assert_eq!(d, vec![8; 5]);
        let tok = m.text_to_tokens("ma pa").unwrap();
        assert_eq!(tok.frames(), d.iter().sum::<usize>());
        assert_eq!(tok.logits().last_dim(), TOKEN_DIM);
        assert!(matches!(m.text_to_tokens(""), Err(Error::EmptyText)));
        assert!(matches!(m.text_to_tokens("a#"), Err(Error::UnknownSymbol('#'))));
    }

    #[test]
    fn tensors_roundtrip() {
        let m = TextTokensParams::new(TextTokensConfig { seed: 70_001, ..tiny() }).unwrap();
        let back = TextTokensParams::from_tensors(&m.tensors()).unwrap();
        assert_eq!(back.config().seed, 70_001);
        assert_eq!(back.config().width, m.config().width);
        assert_eq!(back.text_to_tokens("sat").unwrap(), m.text_to_tokens("sat").unwrap());
    }
}
