//! Conditional flow matching on straight (optimal transport) paths, the
//! weighted L1 objective, Euler integration and model sampling.

use ndgrad::{GradError, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::avdit::{AvDit, ConditionBundle, Variant};
use crate::codecs::{HEAD_LATENT_DIM, MEL_BINS};
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, Session};

const STD_FLOOR: f32 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    #[default]
    Euler,
    Midpoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub sigma_min: f32,
    pub lambda_s: f32,
    pub lambda_h: f32,
    pub lambda_f: f32,
    pub steps: usize,
    pub solver: Solver,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            sigma_min: 1e-6,
            lambda_s: 3.0,
            lambda_h: 0.2,
            lambda_f: 1.0,
            steps: 8,
            solver: Solver::Euler,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sigma_min) {
            return Err(Error::ConfigInvalid(format!("sigma_min {} outside [0, 1)", self.sigma_min)));
        }
        if self.steps == 0 {
            return Err(Error::ConfigInvalid("solver steps must be at least 1".into()));
        }
        if [self.lambda_s, self.lambda_h, self.lambda_f].iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::ConfigInvalid("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

/// `(1 - (1 - sigma_min) t) x0 + t x1`
pub fn ot_path(x0: &Tensor, x1: &Tensor, t: f32, sigma_min: f32) -> Result<Tensor> {
    same_shape(x0, x1)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::TOutOfRange(t));
    }
    let a = 1.0 - (1.0 - sigma_min as f64) * t as f64;
    Ok(x0.zip_map(x1, |x, y| (a * x as f64 + t as f64 * y as f64) as f32)?)
}

/// `x1 - (1 - sigma_min) x0`, the time derivative of [`ot_path`].
pub fn target_velocity(x0: &Tensor, x1: &Tensor, sigma_min: f32) -> Result<Tensor> {
    same_shape(x0, x1)?;
    let k = 1.0 - sigma_min as f64;
    Ok(x0.zip_map(x1, |x, y| (y as f64 - k * x as f64) as f32)?)
}

/// One point on a conditional path together with its regression target.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSample {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: f32,
    pub x_t: Tensor,
    pub u_target: Tensor,
}

impl PathSample {
    pub fn new(x0: Tensor, x1: Tensor, t: f32, sigma_min: f32) -> Result<Self> {
        let x_t = ot_path(&x0, &x1, t, sigma_min)?;
        let u_target = target_velocity(&x0, &x1, sigma_min)?;
        Ok(Self { x0, x1, t, x_t, u_target })
    }
}

/// A normalized training batch of `sequences` stacked segments.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowBatch {
    pub audio: Tensor,
    /// Head latent followed by face codes.
    pub vision: Tensor,
    pub tokens: Tensor,
    pub participant: Option<Tensor>,
    pub audio_context: Option<Tensor>,
    pub segment: usize,
}

impl FlowBatch {
    pub fn sequences(&self) -> usize {
        self.tokens.rows() / self.segment.max(1)
    }

    fn validate(&self) -> Result<()> {
        let rows = self.tokens.rows();
        if self.segment == 0 || rows % self.segment != 0 {
            return Err(Error::MisalignedBatch(format!("{rows} rows with segment {}", self.segment)));
        }
        let others = [Some(&self.audio), Some(&self.vision), self.participant.as_ref(), self.audio_context.as_ref()];
        for t in others.into_iter().flatten() {
            if t.rows() != rows {
                return Err(Error::MisalignedBatch(format!("stream with {} rows, tokens {rows}", t.rows())));
            }
        }
        if self.audio.last_dim() != MEL_BINS || self.vision.last_dim() <= HEAD_LATENT_DIM {
            return Err(Error::MisalignedBatch(format!(
                "audio width {}, vision width {}",
                self.audio.last_dim(),
                self.vision.last_dim()
            )));
        }
        Ok(())
    }
}

/// Paths drawn for a batch: one `t` and one noise draw per sequence, shared
/// by the audio and vision streams.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBatch {
    pub audio: PathSample,
    pub vision: PathSample,
    pub cond: ConditionBundle,
}

fn rowwise_path(x0: &Tensor, x1: &Tensor, times: &[f32], segment: usize, sigma_min: f32) -> Result<PathSample> {
    same_shape(x0, x1)?;
    let c = x1.last_dim();
    let mut xt = Vec::with_capacity(x1.numel());
    for (r, (a, b)) in x0.data().chunks_exact(c).zip(x1.data().chunks_exact(c)).enumerate() {
        let t = times[r / segment] as f64;
        let k = 1.0 - (1.0 - sigma_min as f64) * t;
        xt.extend(a.iter().zip(b).map(|(&x, &y)| (k * x as f64 + t * y as f64) as f32));
    }
    Ok(PathSample {
        x0: x0.clone(),
        x1: x1.clone(),
        t: times[0],
        x_t: Tensor::new(x1.shape(), xt)?,
        u_target: target_velocity(x0, x1, sigma_min)?,
    })
}

/// Draws `t ~ U[0, 1]` per sequence and standard normal noise per element.
pub fn draw_paths<R: Rng>(batch: &FlowBatch, cfg: &FlowConfig, rng: &mut R) -> Result<PathBatch> {
    batch.validate()?;
    let times: Vec<f32> = (0..batch.sequences()).map(|_| rng.random::<f32>()).collect();
    let a0 = normal_tensor(rng, batch.audio.shape(), 1.0);
    let v0 = normal_tensor(rng, batch.vision.shape(), 1.0);
    let audio = rowwise_path(&a0, &batch.audio, &times, batch.segment, cfg.sigma_min)?;
    let vision = rowwise_path(&v0, &batch.vision, &times, batch.segment, cfg.sigma_min)?;
    let cond = ConditionBundle {
        tokens: batch.tokens.clone(),
        times,
        participant: batch.participant.clone(),
        audio_context: batch.audio_context.clone(),
        segment: batch.segment,
    };
    Ok(PathBatch { audio, vision, cond })
}

/// Weighted total and the three unweighted per-stream terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms<T> {
    pub total: T,
    pub audio: T,
    pub head: T,
    pub face: T,
}

impl LossTerms<Var> {
    pub fn values(&self, s: &Session) -> LossTerms<f64> {
        LossTerms {
            total: s.value(self.total).item() as f64,
            audio: s.value(self.audio).item() as f64,
            head: s.value(self.head).item() as f64,
            face: s.value(self.face).item() as f64,
        }
    }
}

fn non_finite(e: Error) -> Error {
    match e {
        Error::Grad(GradError::NonFinite { .. }) => Error::NonFiniteLoss,
        other => other,
    }
}

/// Builds the weighted L1 objective on the tape from predicted velocities.
pub fn cfm_loss_on_tape(s: &mut Session, pred_audio: Var, pred_vision: Var, paths: &PathBatch, cfg: &FlowConfig) -> Result<LossTerms<Var>> {
    let build = |s: &mut Session| -> Result<LossTerms<Var>> {
        let vd = paths.vision.u_target.last_dim();
        if s.shape(pred_audio) != paths.audio.u_target.shape() || s.shape(pred_vision) != paths.vision.u_target.shape() {
            return Err(Error::MisalignedBatch("prediction shape differs from target".into()));
        }
        let ua = s.constant(paths.audio.u_target.clone());
        let uv = s.constant(paths.vision.u_target.clone());
        let audio = s.l1_loss(pred_audio, ua)?;
        let ph = s.slice_last(pred_vision, 0, HEAD_LATENT_DIM)?;
        let uh = s.slice_last(uv, 0, HEAD_LATENT_DIM)?;
        let head = s.l1_loss(ph, uh)?;
        let pf = s.slice_last(pred_vision, HEAD_LATENT_DIM, vd)?;
        let uf = s.slice_last(uv, HEAD_LATENT_DIM, vd)?;
        let face = s.l1_loss(pf, uf)?;
        let ws = s.scale(audio, cfg.lambda_s)?;
        let wh = s.scale(head, cfg.lambda_h)?;
        let wf = s.scale(face, cfg.lambda_f)?;
        let total = s.add(ws, wh)?;
        let total = s.add(total, wf)?;
        Ok(LossTerms { total, audio, head, face })
    };
    let terms = build(s).map_err(non_finite)?;
    if !s.value(terms.total).item().is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok(terms)
}

/// Evaluates the objective for an arbitrary velocity predictor.
pub fn cfm_loss<R, F>(mut predict: F, batch: &FlowBatch, cfg: &FlowConfig, rng: &mut R) -> Result<LossTerms<f64>>
where
    R: Rng,
    F: FnMut(&PathBatch) -> Result<(Tensor, Tensor)>,
{
    let paths = draw_paths(batch, cfg, rng)?;
    let (pa, pv) = predict(&paths)?;
    let store = ndgrad::ParamStore::new();
    let mut s = Session::new(&store);
    let (a, v) = (s.constant(pa), s.constant(pv));
    let terms = cfm_loss_on_tape(&mut s, a, v, &paths, cfg)?;
    Ok(terms.values(&s))
}

/// Loss of `model` on one batch, with the tape kept for a backward pass.
pub fn model_loss<'a, R: Rng>(
    model: &'a AvDit,
    batch: &FlowBatch,
    cfg: &FlowConfig,
    rng: &mut R,
) -> Result<(Session<'a>, LossTerms<Var>)> {
    let paths = draw_paths(batch, cfg, rng)?;
    let mut s = Session::new(model.params());
    let a = s.constant(paths.audio.x_t.clone());
    let v = s.constant(paths.vision.x_t.clone());
    let (pa, pv) = model.forward(&mut s, a, v, &paths.cond).map_err(non_finite)?;
    let terms = cfm_loss_on_tape(&mut s, pa, pv, &paths, cfg)?;
    Ok((s, terms))
}

fn axpy(x: &Tensor, a: f32, v: &Tensor) -> Result<Tensor> {
    Ok(x.zip_map(v, |x, v| x + a * v)?)
}

/// `x_{k+1} = x_k + v(t_k, x_k) / steps` with `t_k = k / steps`.
pub fn euler_solve<F>(mut field: F, x0: &Tensor, steps: usize) -> Result<Tensor>
where
    F: FnMut(f32, &Tensor) -> Result<Tensor>,
{
    if steps == 0 {
        return Err(Error::ConfigInvalid("solver steps must be at least 1".into()));
    }
    let dt = 1.0 / steps as f32;
    let mut x = x0.clone();
    for k in 0..steps {
        let v = field(k as f32 * dt, &x)?;
        same_shape(&x, &v)?;
        x = axpy(&x, dt, &v)?;
        if !x.is_finite() {
            return Err(Error::NonFiniteState(k));
        }
    }
    Ok(x)
}

/// Explicit midpoint rule, second order. Used as a reference integrator.
pub fn midpoint_solve<F>(mut field: F, x0: &Tensor, steps: usize) -> Result<Tensor>
where
    F: FnMut(f32, &Tensor) -> Result<Tensor>,
{
    if steps == 0 {
        return Err(Error::ConfigInvalid("solver steps must be at least 1".into()));
    }
    let dt = 1.0 / steps as f32;
    let mut x = x0.clone();
    for k in 0..steps {
        let t = k as f32 * dt;
        let v1 = field(t, &x)?;
        let mid = axpy(&x, dt / 2.0, &v1)?;
        let v2 = field(t + dt / 2.0, &mid)?;
        x = axpy(&x, dt, &v2)?;
        if !x.is_finite() {
            return Err(Error::NonFiniteState(k));
        }
    }
    Ok(x)
}

fn solve<F>(solver: Solver, field: F, x0: &Tensor, steps: usize) -> Result<Tensor>
where
    F: FnMut(f32, &Tensor) -> Result<Tensor>,
{
    match solver {
        Solver::Euler => euler_solve(field, x0, steps),
        Solver::Midpoint => midpoint_solve(field, x0, steps),
    }
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Tensor,
    pub std: Tensor,
}

impl ChannelStats {
    pub fn fit<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for t in tensors {
            let c = t.last_dim();
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
            } else if sum.len() != c {
                return Err(Error::DimensionMismatch { expected: sum.len(), got: c });
            }
            for row in t.data().chunks_exact(c) {
                for (j, &x) in row.iter().enumerate() {
                    sum[j] += x as f64;
                    sq[j] += (x as f64) * (x as f64);
                }
            }
            count += t.rows();
        }
        if count == 0 {
            return Err(Error::EmptyInput);
        }
        let n = count as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let std: Vec<f32> = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| (((q / n) - (s / n).powi(2)).max(0.0).sqrt() as f32).max(STD_FLOOR))
            .collect();
        let c = mean.len();
        Ok(Self {
            mean: Tensor::new(&[c], mean)?,
            std: Tensor::new(&[c], std)?,
        })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            std: Tensor::ones(&[channels]),
        }
    }

    fn apply(&self, x: &Tensor, f: impl Fn(f32, f32, f32) -> f32) -> Result<Tensor> {
        let c = self.mean.numel();
        if x.last_dim() != c {
            return Err(Error::DimensionMismatch { expected: c, got: x.last_dim() });
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = f(*v, self.mean.data()[j], self.std.data()[j]);
            }
        }
        Ok(out)
    }

    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, |v, m, s| v * s + m)
    }
}

/// Z-normalization of the three generated streams.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub audio: ChannelStats,
    pub head: ChannelStats,
    pub face: ChannelStats,
}

impl Normalizer {
    pub fn identity(face_dim: usize) -> Self {
        Self {
            audio: ChannelStats::identity(MEL_BINS),
            head: ChannelStats::identity(HEAD_LATENT_DIM),
            face: ChannelStats::identity(face_dim),
        }
    }

    pub fn face_dim(&self) -> usize {
        self.face.mean.numel()
    }

    /// Normalized `head ++ face`.
    pub fn normalize_vision(&self, head: &Tensor, face: &Tensor) -> Result<Tensor> {
        Ok(Tensor::concat_last(&[&self.head.normalize(head)?, &self.face.normalize(face)?])?)
    }

    /// Splits a normalized vision tensor and maps both parts back to data units.
    pub fn denormalize_vision(&self, vision: &Tensor) -> Result<(Tensor, Tensor)> {
        let vd = vision.last_dim();
        let head = self.head.denormalize(&vision.slice_last(0, HEAD_LATENT_DIM)?)?;
        let face = self.face.denormalize(&vision.slice_last(HEAD_LATENT_DIM, vd)?)?;
        Ok((head, face))
    }

    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, st) in [("audio", &self.audio), ("head", &self.head), ("face", &self.face)] {
            out.push((format!("norm.mean.{name}"), st.mean.clone()));
            out.push((format!("norm.std.{name}"), st.std.clone()));
        }
        out
    }

    pub fn from_tensors(tensors: &[(String, Tensor)]) -> Result<Self> {
        let get = |name: &str| -> Result<Tensor> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or(Error::ModelNotLoaded("normalization statistics"))
        };
        let stats = |name: &str| -> Result<ChannelStats> {
            Ok(ChannelStats {
                mean: get(&format!("norm.mean.{name}"))?,
                std: get(&format!("norm.std.{name}"))?,
            })
        };
        Ok(Self {
            audio: stats("audio")?,
            head: stats("head")?,
            face: stats("face")?,
        })
    }
}

/// Integrates the learned field from noise. Returns normalized
/// `(audio [rows, 80], vision [rows, 8 + D_f])`.
///
/// `cond.times` only fixes the number of sequences; the solver sets the time.
/// The cascaded variant runs in two phases: audio first, then vision with the
/// sampled audio as context.
pub fn sample_normalized<R: Rng>(model: &AvDit, cond: &ConditionBundle, cfg: &FlowConfig, rng: &mut R) -> Result<(Tensor, Tensor)> {
    sample_phases(model, cond, cfg, rng, false)
}

/// First phase of cascaded sampling: normalized audio only, as the vision
/// stack sees it during its own training stage.
pub fn sample_cascade_audio<R: Rng>(model: &AvDit, cond: &ConditionBundle, cfg: &FlowConfig, rng: &mut R) -> Result<Tensor> {
    if model.variant() != Variant::Cascaded {
        return Err(Error::ConfigMismatch(format!("{} has no separate audio phase", model.variant())));
    }
    Ok(sample_phases(model, cond, cfg, rng, true)?.0)
}

fn sample_phases<R: Rng>(model: &AvDit, cond: &ConditionBundle, cfg: &FlowConfig, rng: &mut R, audio_phase_only: bool) -> Result<(Tensor, Tensor)> {
    cfg.validate()?;
    let rows = cond.rows();
    let vd = model.config().vision_dim();
    let a0 = normal_tensor(rng, &[rows, MEL_BINS], 1.0);
    let v0 = normal_tensor(rng, &[rows, vd], 1.0);
    let x0 = Tensor::concat_last(&[&a0, &v0])?;
    let mut cond = cond.clone();
    let sequences = cond.times.len();

    let joint = |cond: &ConditionBundle, keep: Option<(usize, usize)>| {
        let cond = cond.clone();
        move |t: f32, x: &Tensor| -> Result<Tensor> {
            let mut c = cond.clone();
            c.times = vec![t.clamp(0.0, 1.0); sequences];
            let (va, vv) = model.predict(&x.slice_last(0, MEL_BINS)?, &x.slice_last(MEL_BINS, MEL_BINS + vd)?, &c)?;
            let v = Tensor::concat_last(&[&va, &vv])?;
            match keep {
                // zero the velocity outside the channel range being integrated
                Some((lo, hi)) => {
                    let w = v.last_dim();
                    let mut v = v;
                    for row in v.data_mut().chunks_exact_mut(w) {
                        for (j, x) in row.iter_mut().enumerate() {
                            if j < lo || j >= hi {
                                *x = 0.0;
                            }
                        }
                    }
                    Ok(v)
                }
                None => Ok(v),
            }
        }
    };

    let x1 = if model.variant() == Variant::Cascaded {
        cond.audio_context = None;
        let audio_only = solve(cfg.solver, joint(&cond, Some((0, MEL_BINS))), &x0, cfg.steps)?;
        let audio = audio_only.slice_last(0, MEL_BINS)?;
        if audio_phase_only {
            return Ok((audio, v0));
        }
        cond.audio_context = Some(audio.clone());
        let staged = Tensor::concat_last(&[&audio, &v0])?;
        solve(cfg.solver, joint(&cond, Some((MEL_BINS, MEL_BINS + vd))), &staged, cfg.steps)?
    } else {
        solve(cfg.solver, joint(&cond, None), &x0, cfg.steps)?
    };
    Ok((x1.slice_last(0, MEL_BINS)?, x1.slice_last(MEL_BINS, MEL_BINS + vd)?))
}

/// Generated streams in data units.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub mel: Tensor,
    pub head: Tensor,
    pub face: Tensor,
}

/// Samples mel, head latents and face codes for every sequence in `cond`.
pub fn sample<R: Rng>(model: &AvDit, norm: &Normalizer, cond: &ConditionBundle, cfg: &FlowConfig, rng: &mut R) -> Result<Generated> {
    if norm.face_dim() != model.config().face_dim {
        return Err(Error::ConfigMismatch(format!(
            "normalizer face width {} but model {}",
            norm.face_dim(),
            model.config().face_dim
        )));
    }
    let (a, v) = sample_normalized(model, cond, cfg, rng)?;
    let mel = norm.audio.denormalize(&a)?;
    let (head, face) = norm.denormalize_vision(&v)?;
    Ok(Generated { mel, head, face })
}
