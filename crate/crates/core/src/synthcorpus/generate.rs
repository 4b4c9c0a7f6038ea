use std::f64::consts::PI;

use ndgrad::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use super::lexicon::{SymbolLexicon, FACE_APERTURE, FACE_FIXED_DIMS, FACE_SMILE};
use super::record::{Annotations, CorpusRecord, ReactionLink};
use super::{Corpus, CorpusHeader};
use crate::codecs::{
    axis_angle_to_quat, canonicalize, char_index, quat_mul, EXPRESSION_DIM, HEAD_POSE_DIM, MEL_BINS,
    PARTICIPANT_FEATURE_DIM, TOKEN_DIM,
};
use crate::error::{Error, Result};

/// Lip gap below which a frame counts as a closure, in scene units.
pub const CLOSURE_THRESHOLD: f32 = 1e-2;
/// Logit on the active character row.
pub const TOKEN_PEAK: f32 = 5.0;
pub const TOKEN_NOISE: f32 = 0.3;
/// Actor smile height in face-code units.
pub const SMILE_AMPLITUDE: f32 = 0.6;

const APERTURE_EASE: f64 = 3.0;
const MEL_CROSSFADE: f64 = 4.0;
const ATTACK_GAIN: f32 = 1.5;
const ATTACK_DECAY: f32 = 2.0;
const STROKE_MAX: u32 = 24;
const SMILE_RISE: u32 = 6;
const SMILE_HOLD: u32 = 24;
const SMILE_FALL: u32 = 10;
const PARTICIPANT_MAP_SEED: u64 = 0x9a_271c;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub records: usize,
    /// Frames per record.
    pub frames: usize,
    pub face_dim: usize,
    /// Frames between a participant smile and the actor's reaction.
    pub reaction_offset: u32,
    /// Mean frames between participant smiles.
    pub smile_interval: f32,
    /// Probability that a non-silent symbol is emphasized.
    pub emphasis_prob: f32,
    /// Maximum shift, in frames, of token boundaries relative to the acoustic ones.
    pub token_jitter: u32,
    pub participants: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            records: 200,
            frames: 1720,
            face_dim: 16,
            reaction_offset: 6,
            smile_interval: 260.0,
            emphasis_prob: 0.5,
            token_jitter: 1,
            participants: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.records == 0 {
            return Err(Error::ConfigInvalid("corpus needs at least one record".into()));
        }
        if self.frames == 0 {
            return Err(Error::ConfigInvalid("records need at least one frame".into()));
        }
        if !(0.0..=1.0).contains(&self.emphasis_prob) {
            return Err(Error::ConfigInvalid("emphasis probability outside [0, 1]".into()));
        }
        if !(self.smile_interval > 0.0) {
            return Err(Error::ConfigInvalid("smile interval must be positive".into()));
        }
        Ok(())
    }
}

/// One symbol occurrence on a timeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub symbol: u8,
    pub start: u32,
    pub len: u32,
    pub emphasized: bool,
}

/// Everything needed to synthesize one dyadic record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DyadScript {
    pub frames: u32,
    pub actor: Vec<Segment>,
    pub participant: Vec<Segment>,
    pub participant_smiles: Vec<u32>,
    pub reactions: Vec<ReactionLink>,
}

/// An expected actor reaction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedReaction {
    pub frame: u32,
    pub event: ReactionKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReactionKind {
    Smile,
}

/// Actor frames at which a reaction should start, in script order.
pub fn make_participant_reaction_oracle(script: &DyadScript) -> Vec<ExpectedReaction> {
    script
        .reactions
        .iter()
        .filter(|l| l.actor_frame < script.frames)
        .map(|l| ExpectedReaction {
            frame: l.actor_frame,
            event: ReactionKind::Smile,
        })
        .collect()
}

fn ease(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    (1.0 - (PI * u).cos()) / 2.0
}

/// Segments from `(symbol, duration)` pairs laid end to end.
pub fn timeline(pairs: &[(u8, u32)], emphasized: &[bool]) -> Vec<Segment> {
    let mut start = 0;
    pairs
        .iter()
        .enumerate()
        .map(|(i, &(symbol, len))| {
            let s = Segment {
                symbol,
                start,
                len,
                emphasized: emphasized.get(i).copied().unwrap_or(false),
            };
            start += len;
            s
        })
        .collect()
}

fn speech_track<R: Rng>(rng: &mut R, lex: &SymbolLexicon, frames: u32, pause_prob: f64, emphasis: f32) -> Vec<Segment> {
    let mut pairs: Vec<(u8, u32)> = Vec::new();
    let mut emph = Vec::new();
    let mut total = 0u32;
    let push = |sym: usize, rng: &mut R, pairs: &mut Vec<(u8, u32)>, emph: &mut Vec<bool>, total: &mut u32, long: bool| {
        let (lo, hi) = lex.symbols[sym].duration;
        let len = if long { rng.random_range(30..=70) } else { rng.random_range(lo..=hi) };
        let len = len.min(frames - *total);
        pairs.push((sym as u8, len));
        emph.push(sym != 0 && rng.random::<f32>() < emphasis);
        *total += len;
    };
    push(0, rng, &mut pairs, &mut emph, &mut total, false);
    while total < frames {
        let word = rng.random_range(2..=5);
        let mut prev = 0usize;
        for _ in 0..word {
            if total >= frames {
                break;
            }
            let mut sym = rng.random_range(1..lex.len());
            while sym == prev {
                sym = rng.random_range(1..lex.len());
            }
            push(sym, rng, &mut pairs, &mut emph, &mut total, false);
            prev = sym;
        }
        if total < frames {
            let long = rng.random_bool(pause_prob);
            push(0, rng, &mut pairs, &mut emph, &mut total, long);
        }
    }
    timeline(&pairs, &emph)
}

fn smile_times<R: Rng>(rng: &mut R, frames: u32, mean_gap: f32) -> Vec<u32> {
    let gap = Exp::new(1.0 / mean_gap as f64).expect("positive rate");
    let min_gap = (SMILE_RISE + SMILE_HOLD + SMILE_FALL + 10) as f64;
    let mut out = Vec::new();
    let mut t = 10.0 + gap.sample(rng);
    while t < frames as f64 {
        out.push(t as u32);
        t += min_gap + gap.sample(rng);
    }
    out
}

/// Draws a random dyadic script.
pub fn random_script<R: Rng>(rng: &mut R, lex: &SymbolLexicon, cfg: &GeneratorConfig) -> DyadScript {
    let frames = cfg.frames as u32;
    let actor = speech_track(rng, lex, frames, 0.1, cfg.emphasis_prob);
    let (participant, participant_smiles) = if cfg.participants {
        (speech_track(rng, lex, frames, 0.4, cfg.emphasis_prob), smile_times(rng, frames, cfg.smile_interval))
    } else {
        (timeline(&[(0, frames)], &[]), Vec::new())
    };
    let reactions = participant_smiles
        .iter()
        .map(|&p| ReactionLink {
            participant_frame: p,
            actor_frame: p + cfg.reaction_offset,
        })
        .collect();
    DyadScript {
        frames,
        actor,
        participant,
        participant_smiles,
        reactions,
    }
}

fn frame_symbols(track: &[Segment], frames: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(frames);
    for s in track {
        out.extend(std::iter::repeat_n(s.symbol, s.len as usize));
    }
    out.resize(frames, 0);
    out
}

/// Moves each internal boundary by up to `jitter` frames, keeping every segment non-empty.
fn jitter_track<R: Rng>(rng: &mut R, track: &[Segment], jitter: u32) -> Vec<Segment> {
    let mut bounds: Vec<i64> = track.iter().map(|s| s.start as i64).collect();
    let end = track.last().map(|s| (s.start + s.len) as i64).unwrap_or(0);
    for i in 1..bounds.len() {
        let j = jitter as i64;
        let shifted = bounds[i] + rng.random_range(-j..=j);
        let lo = bounds[i - 1] + 1;
        let hi = if i + 1 < bounds.len() { bounds[i + 1] - 1 } else { end - 1 };
        bounds[i] = shifted.clamp(lo, hi.max(lo));
    }
    track
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let next = bounds.get(i + 1).copied().unwrap_or(end);
            Segment {
                start: bounds[i] as u32,
                len: (next - bounds[i]) as u32,
                ..*s
            }
        })
        .collect()
}

fn token_logits<R: Rng>(rng: &mut R, lex: &SymbolLexicon, symbols: &[u8]) -> Tensor {
    let noise = Normal::new(0.0f32, TOKEN_NOISE).expect("finite");
    let mut data = Vec::with_capacity(symbols.len() * TOKEN_DIM);
    for &s in symbols {
        let row = char_index(lex.symbols[s as usize].ch).expect("validated lexicon");
        for c in 0..TOKEN_DIM {
            data.push(if c == row { TOKEN_PEAK } else { noise.sample(rng) });
        }
    }
    Tensor::new(&[symbols.len(), TOKEN_DIM], data).expect("token shape")
}

fn mel_track(lex: &SymbolLexicon, track: &[Segment], frames: usize) -> Vec<f32> {
    let mut mel = vec![0.0f32; frames * MEL_BINS];
    let mut prev = vec![0.0f32; MEL_BINS];
    for seg in track {
        let t = &lex.symbols[seg.symbol as usize].mel;
        for tau in 0..seg.len as usize {
            let i = seg.start as usize + tau;
            if i >= frames {
                break;
            }
            let row = &mut mel[i * MEL_BINS..(i + 1) * MEL_BINS];
            if seg.emphasized {
                let gain = 1.0 + ATTACK_GAIN * (-(tau as f32) / ATTACK_DECAY).exp();
                for (r, &v) in row.iter_mut().zip(t) {
                    *r = v * gain;
                }
            } else {
                let w = ((tau as f64 + 1.0) / MEL_CROSSFADE).min(1.0) as f32;
                for ((r, &v), &p) in row.iter_mut().zip(t).zip(&prev) {
                    *r = p + (v - p) * w;
                }
            }
        }
        let last = (seg.start + seg.len) as usize - 1;
        if last < frames {
            prev.copy_from_slice(&mel[last * MEL_BINS..(last + 1) * MEL_BINS]);
        }
    }
    mel
}

/// Values eased between targets set at emphasized onsets. Each move lasts
/// until the next emphasized onset or [`STROKE_MAX`] frames, whichever is first.
fn stroke_curve(track: &[Segment], frames: usize, dims: usize, target: impl Fn(&Segment, usize) -> Vec<f64>) -> Vec<Vec<f64>> {
    let emph: Vec<&Segment> = track.iter().filter(|s| s.emphasized).collect();
    let mut out = vec![vec![0.0; dims]; frames];
    let mut current = vec![0.0; dims];
    let mut cursor = 0usize;
    for (k, seg) in emph.iter().enumerate() {
        let o = seg.start as usize;
        for row in out.iter_mut().take(o.min(frames)).skip(cursor) {
            row.copy_from_slice(&current);
        }
        let next = emph.get(k + 1).map(|s| s.start as usize).unwrap_or(frames);
        let len = (next - o).min(STROKE_MAX as usize).max(1);
        let goal = target(seg, k);
        for tau in 0..(next - o) {
            let i = o + tau;
            if i >= frames {
                break;
            }
            let w = ease(tau as f64 / len as f64);
            for d in 0..dims {
                out[i][d] = current[d] + (goal[d] - current[d]) * w;
            }
        }
        current = goal;
        cursor = next.min(frames);
    }
    for row in out.iter_mut().skip(cursor) {
        row.copy_from_slice(&current);
    }
    out
}

fn aperture_curve(lex: &SymbolLexicon, track: &[Segment], frames: usize) -> Vec<f64> {
    let mut out = vec![0.0; frames];
    let mut from = 0.0f64;
    for seg in track {
        let target = lex.symbols[seg.symbol as usize].aperture as f64;
        for tau in 0..seg.len as usize {
            let i = seg.start as usize + tau;
            if i >= frames {
                break;
            }
            out[i] = from + (target - from) * ease((tau as f64 + 1.0) / APERTURE_EASE);
        }
        let last = (seg.start + seg.len) as usize - 1;
        if last < frames {
            from = out[last];
        }
    }
    out
}

/// Smile bumps starting at each frame in `starts`, capped at `amplitude`.
fn smile_curve(starts: &[u32], frames: usize, amplitude: f64) -> Vec<f64> {
    let mut out = vec![0.0f64; frames];
    let (rise, hold, fall) = (SMILE_RISE as usize, SMILE_HOLD as usize, SMILE_FALL as usize);
    for &s in starts {
        for k in 0..rise + hold + fall {
            let i = s as usize + k;
            if i >= frames {
                break;
            }
            let v = if k < rise {
                ease((k + 1) as f64 / rise as f64)
            } else if k < rise + hold {
                1.0
            } else {
                1.0 - ease((k - rise - hold + 1) as f64 / fall as f64)
            };
            out[i] = (out[i] + v * amplitude).min(amplitude);
        }
    }
    out
}

struct HeadMotion {
    pitch: Vec<f64>,
    yaw: Vec<f64>,
    roll: Vec<f64>,
    pose: Vec<f32>,
}

fn head_motion<R: Rng>(rng: &mut R, track: &[Segment], frames: usize) -> HeadMotion {
    let amps: Vec<f64> = track.iter().map(|_| rng.random_range(0.06..0.12)).collect();
    let by_start: std::collections::HashMap<u32, f64> = track.iter().zip(&amps).map(|(s, &a)| (s.start, a)).collect();
    let nod = stroke_curve(track, frames, 1, |seg, k| {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        vec![sign * by_start[&seg.start]]
    });
    let mut phase = || rng.random_range(0.0..2.0 * PI);
    let (p1, p2, p3, p4, p5) = (phase(), phase(), phase(), phase(), phase());
    let mut period = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let (t_yaw, t_roll, t_pitch, t_x, t_z) = (
        period(300.0, 600.0),
        period(250.0, 500.0),
        period(350.0, 700.0),
        period(400.0, 800.0),
        period(400.0, 800.0),
    );
    let mut out = HeadMotion {
        pitch: Vec::with_capacity(frames),
        yaw: Vec::with_capacity(frames),
        roll: Vec::with_capacity(frames),
        pose: Vec::with_capacity(frames * HEAD_POSE_DIM),
    };
    for (i, n) in nod.iter().enumerate() {
        let x = i as f64;
        let pitch = n[0] + 0.01 * (2.0 * PI * x / t_pitch + p3).sin();
        let yaw = 0.08 * (2.0 * PI * x / t_yaw + p1).sin();
        let roll = 0.02 * (2.0 * PI * x / t_roll + p2).sin();
        let q = quat_mul(
            &quat_mul(&axis_angle_to_quat([0.0, 1.0, 0.0], yaw), &axis_angle_to_quat([1.0, 0.0, 0.0], pitch)),
            &axis_angle_to_quat([0.0, 0.0, 1.0], roll),
        );
        let q = canonicalize(q);
        out.pose.extend(q.iter().map(|v| *v as f32));
        out.pose.push((0.01 * (2.0 * PI * x / t_x + p4).sin()) as f32);
        out.pose.push((-0.05 * n[0]) as f32);
        out.pose.push((0.005 * (2.0 * PI * x / t_z + p5).sin()) as f32);
        out.pitch.push(pitch);
        out.yaw.push(yaw);
        out.roll.push(roll);
    }
    out
}

fn face_track(lex: &SymbolLexicon, track: &[Segment], frames: usize, smile: &[f64]) -> Vec<f32> {
    let fd = lex.face_dim;
    let aperture = aperture_curve(lex, track, frames);
    let strokes = stroke_curve(track, frames, fd, |seg, k| {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        lex.symbols[seg.symbol as usize].stroke.iter().map(|&v| sign * v as f64).collect()
    });
    let mut face = Vec::with_capacity(frames * fd);
    for i in 0..frames {
        for d in 0..fd {
            let v = match d {
                FACE_APERTURE => aperture[i],
                FACE_SMILE => smile[i],
                _ => strokes[i][d],
            };
            face.push(v as f32);
        }
    }
    face
}

fn onsets(track: &[Segment], emphasized_only: bool) -> Vec<u32> {
    track
        .iter()
        .filter(|s| s.symbol != 0 && s.len > 0 && (!emphasized_only || s.emphasized))
        .map(|s| s.start)
        .collect()
}

fn pairs(track: &[Segment]) -> Vec<(u8, u32)> {
    track.iter().filter(|s| s.len > 0).map(|s| (s.symbol, s.len)).collect()
}

/// Synthesizes all streams of one record from a script.
pub fn synthesize<R: Rng>(rng: &mut R, lex: &SymbolLexicon, script: &DyadScript, cfg: &GeneratorConfig) -> Result<CorpusRecord> {
    lex.validate()?;
    let n = script.frames as usize;
    let covered: u32 = script.actor.iter().map(|s| s.len).sum();
    if covered != script.frames {
        return Err(Error::BadLexicon(format!("actor timeline covers {covered} of {n} frames")));
    }
    if script.actor.iter().chain(&script.participant).any(|s| s.symbol as usize >= lex.len()) {
        return Err(Error::BadLexicon("script uses a symbol outside the lexicon".into()));
    }
    let symbols = frame_symbols(&script.actor, n);
    let token_track = jitter_track(rng, &script.actor, cfg.token_jitter);
    let tokens = token_logits(rng, lex, &frame_symbols(&token_track, n));
    let mel = Tensor::new(&[n, MEL_BINS], mel_track(lex, &script.actor, n))?;
    let oracle = make_participant_reaction_oracle(script);
    let reaction_frames: Vec<u32> = oracle.iter().map(|r| r.frame).collect();
    let smile = smile_curve(&reaction_frames, n, SMILE_AMPLITUDE as f64);
    let face_data = face_track(lex, &script.actor, n, &smile);
    let closure_frames = (0..n)
        .filter(|&i| face_data[i * lex.face_dim + FACE_APERTURE] < CLOSURE_THRESHOLD)
        .map(|i| i as u32)
        .collect();
    let face = Tensor::new(&[n, lex.face_dim], face_data)?;
    let head = head_motion(rng, &script.actor, n);
    let head_pose = Tensor::new(&[n, HEAD_POSE_DIM], head.pose)?;

    let (participant_features, participant_tokens) = if cfg.participants {
        let p_track = jitter_track(rng, &script.participant, cfg.token_jitter);
        let p_tokens = token_logits(rng, lex, &frame_symbols(&p_track, n));
        let p_smile = smile_curve(&script.participant_smiles, n, 1.0);
        let p_face = face_track(lex, &script.participant, n, &p_smile);
        let p_head = head_motion(rng, &script.participant, n);
        let features = participant_features(lex.face_dim, &p_face, &p_head, n)?;
        (Some(features), Some(p_tokens))
    } else {
        (None, None)
    };

    let annotations = Annotations {
        symbols,
        segments: pairs(&script.actor),
        token_segments: pairs(&token_track),
        onsets: onsets(&script.actor, false),
        beat_frames: onsets(&script.actor, true),
        closure_frames,
        smile_frames: reaction_frames,
        reactions: script.reactions.clone(),
    };
    let record = CorpusRecord {
        tokens,
        mel: Some(mel),
        face: Some(face),
        head_pose: Some(head_pose),
        head_latent: None,
        participant_features,
        participant_tokens,
        annotations: Some(annotations),
    };
    record.validate(lex.face_dim)?;
    Ok(record)
}

/// Expression (smile, aperture, mapped strokes), jaw and head rotation of the participant.
fn participant_features(face_dim: usize, face: &[f32], head: &HeadMotion, n: usize) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(PARTICIPANT_MAP_SEED);
    let strokes = face_dim - FACE_FIXED_DIMS;
    let mapped = EXPRESSION_DIM - 2;
    let scale = 1.0 / (strokes as f32).sqrt();
    let map: Vec<f32> = (0..strokes * mapped).map(|_| rng.random_range(-1.0..1.0f32) * scale).collect();
    let mut data = Vec::with_capacity(n * PARTICIPANT_FEATURE_DIM);
    for i in 0..n {
        let row = &face[i * face_dim..(i + 1) * face_dim];
        data.push(row[FACE_SMILE]);
        data.push(row[FACE_APERTURE] * 10.0);
        for m in 0..mapped {
            let v: f32 = (0..strokes).map(|s| row[FACE_FIXED_DIMS + s] * map[s * mapped + m]).sum();
            data.push(v);
        }
        data.extend_from_slice(&[row[FACE_APERTURE] * 5.0, 0.0, 0.0]);
        data.extend_from_slice(&[head.pitch[i] as f32, head.yaw[i] as f32, head.roll[i] as f32]);
    }
    Ok(Tensor::new(&[n, PARTICIPANT_FEATURE_DIM], data)?)
}

/// Per-record generator seeded from the corpus seed and the record index.
pub fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Deterministic corpus of random scripts.
pub fn generate(seed: u64, cfg: &GeneratorConfig) -> Result<Corpus> {
    cfg.validate()?;
    let lex = SymbolLexicon::standard(cfg.face_dim)?;
    let mut records = Vec::with_capacity(cfg.records);
    for index in 0..cfg.records {
        let mut rng = record_rng(seed, index);
        let script = random_script(&mut rng, &lex, cfg);
        records.push(synthesize(&mut rng, &lex, &script, cfg)?);
    }
    Ok(Corpus {
        header: CorpusHeader::new(&lex, Some(seed), Some(cfg.clone())),
        records,
    })
}
