use std::fs;
use std::path::{Path, PathBuf};

use ndgrad::{AdamState, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::{fit_head_vae, fit_normalizer, head_latents, prepare_records, sample_batch, split, PreparedRecord};
use crate::avdit::{AvDit, ConditionBundle, Guidance, Variant};
use crate::codecs::HeadVae;
use crate::error::{Error, Result};
use crate::flowmatch::{model_loss, sample_cascade_audio, Normalizer};
use crate::synthcorpus::load_corpus;

const BATCH_STREAM: u64 = 7;
const CASCADE_STREAM: u64 = 0xca5c;
const GUIDANCE_TENSOR: &str = "run.guidance";

/// Output directory of a run: `ckpt/`, `logs/`, `reports/`, `samples/`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn create(&self) -> Result<()> {
        for sub in ["ckpt", "logs", "reports", "samples"] {
            fs::create_dir_all(self.root.join(sub))?;
        }
        Ok(())
    }

    pub fn ckpt(&self) -> PathBuf {
        self.root.join("ckpt")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn model_path(&self) -> PathBuf {
        self.ckpt().join("model.avfl")
    }

    fn optim_path(&self) -> PathBuf {
        self.ckpt().join("optim.avfl")
    }

    pub fn state_path(&self) -> PathBuf {
        self.ckpt().join("state.json")
    }
}

/// Writes through a temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn save_tensors_atomic(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let refs: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut buf = Vec::new();
    ndgrad::checkpoint::write_tensors(&mut buf, &refs)?;
    write_atomic(path, &buf)
}

/// A trained network with everything needed to sample from it.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub model: AvDit,
    pub normalizer: Normalizer,
    pub head_vae: HeadVae,
    pub guidance: Guidance,
}

impl ModelBundle {
    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut t = self.model.tensors();
        t.extend(self.normalizer.tensors());
        t.extend(self.head_vae.tensors());
        t.push((GUIDANCE_TENSOR.into(), Tensor::scalar(guidance_id(self.guidance) as f32)));
        t
    }

    pub fn from_tensors(t: &[(String, Tensor)]) -> Result<Self> {
        let g = t
            .iter()
            .find(|(n, _)| n == GUIDANCE_TENSOR)
            .ok_or(Error::ModelNotLoaded("guidance mode"))?;
        Ok(Self {
            model: AvDit::from_tensors(t)?,
            normalizer: Normalizer::from_tensors(t)?,
            head_vae: HeadVae::from_tensors(t)?,
            guidance: guidance_from_id(g.1.item() as u8)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_tensors_atomic(path, &self.tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        Self::from_tensors(&ndgrad::checkpoint::load(path)?)
    }
}

fn guidance_id(g: Guidance) -> u8 {
    match g {
        Guidance::None => 0,
        Guidance::Audio => 1,
        Guidance::Visual => 2,
        Guidance::AudioVisual => 3,
    }
}

fn guidance_from_id(id: u8) -> Result<Guidance> {
    [Guidance::None, Guidance::Audio, Guidance::Visual, Guidance::AudioVisual]
        .get(id as usize)
        .copied()
        .ok_or_else(|| Error::ConfigMismatch(format!("guidance id {id}")))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub total: f64,
    pub audio: f64,
    pub head: f64,
    pub face: f64,
}

/// Position of the batch generator, enough to continue its exact sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::ConfigInvalid("corrupt generator state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// JSON sidecar next to the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub rng: RngState,
    pub adam_step: u64,
    pub losses: Vec<LossRow>,
    pub config: RunConfig,
}

/// Mean of the trailing `window` totals ending at `step` (1-based, inclusive).
pub fn smoothed_total(losses: &[LossRow], step: usize, window: usize) -> f64 {
    let end = step.min(losses.len());
    let start = end.saturating_sub(window.max(1));
    let slice = &losses[start..end];
    slice.iter().map(|r| r.total).sum::<f64>() / slice.len().max(1) as f64
}

pub struct Trainer {
    cfg: RunConfig,
    run: RunDir,
    bundle: ModelBundle,
    records: Vec<PreparedRecord>,
    context: Option<Vec<Tensor>>,
    adam: AdamState,
    rng: ChaCha8Rng,
    step: usize,
    losses: Vec<LossRow>,
}

impl Trainer {
    /// Loads the corpus, fits the head VAE and normalization on the training
    /// split and initializes the network.
    pub fn new(cfg: RunConfig, run: RunDir) -> Result<Self> {
        cfg.validate()?;
        let corpus = load_corpus(&cfg.corpus)?;
        if corpus.face_dim() != cfg.model.face_dim {
            return Err(Error::ConfigInvalid(format!(
                "corpus face width {} but model face width {}",
                corpus.face_dim(),
                cfg.model.face_dim
            )));
        }
        run.create()?;
        write_atomic(&run.root.join("config.toml"), cfg.to_toml().as_bytes())?;
        let (train, _) = split(corpus.len(), cfg.holdout);
        let vae = fit_head_vae(&corpus, &train, &cfg.head_vae)?;
        let latents = head_latents(&corpus, &train, &vae)?;
        let normalizer = fit_normalizer(&corpus, &train, &latents)?;
        let records = prepare_records(&corpus, &train, &latents, &normalizer, cfg.guidance)?;
        let mut model = AvDit::new(cfg.model.clone(), cfg.variant, cfg.seed)?;
        if cfg.zero_fusion {
            model.freeze_fusion_at_zero()?;
        }
        let adam = AdamState::new(model.params());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(BATCH_STREAM);
        log::info!(
            "{} model with {} parameters, {} training records",
            cfg.variant,
            model.num_params(),
            records.len()
        );
        Ok(Self {
            bundle: ModelBundle {
                model,
                normalizer,
                head_vae: vae,
                guidance: cfg.guidance,
            },
            cfg,
            run,
            records,
            context: None,
            adam,
            rng,
            step: 0,
            losses: Vec::new(),
        })
    }

    /// Continues a run from its last checkpoint.
    pub fn resume(cfg: RunConfig, run: RunDir) -> Result<Self> {
        cfg.validate()?;
        let state_text = fs::read_to_string(run.state_path()).map_err(|_| Error::MissingCheckpoint(run.state_path()))?;
        let state: TrainState =
            serde_json::from_str(&state_text).map_err(|e| Error::ConfigInvalid(format!("train state: {e}")))?;
        let mut stored = state.config.clone();
        stored.max_steps = cfg.max_steps;
        if stored != cfg {
            return Err(Error::ConfigMismatch("run config differs from the checkpointed one".into()));
        }
        let mut bundle = ModelBundle::load(&run.model_path())?;
        if cfg.zero_fusion {
            bundle.model.freeze_fusion_at_zero()?;
        }
        let corpus = load_corpus(&cfg.corpus)?;
        let (train, _) = split(corpus.len(), cfg.holdout);
        let latents = head_latents(&corpus, &train, &bundle.head_vae)?;
        let records = prepare_records(&corpus, &train, &latents, &bundle.normalizer, cfg.guidance)?;
        let optim = ndgrad::checkpoint::load(&run.optim_path())?;
        let mut adam = AdamState::new(bundle.model.params());
        for (id, name, _) in bundle.model.params().iter() {
            let find = |prefix: &str| {
                optim
                    .iter()
                    .find(|(n, _)| n.strip_prefix(prefix) == Some(name))
                    .map(|(_, t)| t.clone())
                    .ok_or_else(|| Error::ConfigMismatch(format!("optimizer state lacks {name}")))
            };
            adam.m[id.index()] = find("m.")?;
            adam.v[id.index()] = find("v.")?;
        }
        adam.step = state.adam_step;
        let mut t = Self {
            cfg,
            run,
            bundle,
            records,
            context: None,
            adam,
            rng: state.rng.restore()?,
            step: state.step,
            losses: state.losses,
        };
        t.enter_stage()?;
        Ok(t)
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn losses(&self) -> &[LossRow] {
        &self.losses
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn into_bundle(self) -> ModelBundle {
        self.bundle
    }

    pub fn run_dir(&self) -> &RunDir {
        &self.run
    }

    fn cascade_switch(&self) -> usize {
        ((self.cfg.max_steps as f32 * self.cfg.cascade_split).round() as usize).max(1)
    }

    /// Sets trainable parts for the cascaded stages; samples the audio context on entering the second.
    fn enter_stage(&mut self) -> Result<()> {
        if self.cfg.variant != Variant::Cascaded {
            return Ok(());
        }
        let second = self.step >= self.cascade_switch();
        let params = self.bundle.model.params_mut();
        params.set_trainable_prefix("audio.", !second);
        params.set_trainable_prefix("vision.", second);
        if second && self.context.is_none() {
            log::info!("cascaded: sampling audio for {} records", self.records.len());
            let mut ctx = Vec::with_capacity(self.records.len());
            for (i, r) in self.records.iter().enumerate() {
                let cond = ConditionBundle {
                    tokens: r.tokens.clone(),
                    times: vec![0.0],
                    participant: r.participant.clone(),
                    audio_context: None,
                    segment: r.frames(),
                };
                cond.validate()?;
                let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
                rng.set_stream(CASCADE_STREAM + i as u64);
                ctx.push(sample_cascade_audio(&self.bundle.model, &cond, &self.cfg.flow, &mut rng)?);
            }
            self.context = Some(ctx);
        }
        Ok(())
    }

    /// One optimizer step. A non-finite loss stops training with `DivergedLoss`.
    pub fn step(&mut self) -> Result<LossRow> {
        self.enter_stage()?;
        let batch = sample_batch(
            &mut self.rng,
            &self.records,
            self.context.as_deref(),
            self.cfg.batch_segments,
            self.cfg.segment_frames,
        )?;
        let step = self.step + 1;
        let diverged = |e: Error| match e {
            Error::NonFiniteLoss => Error::DivergedLoss(step as u64),
            other => other,
        };
        let (s, terms) = model_loss(&self.bundle.model, &batch, &self.cfg.flow, &mut self.rng).map_err(diverged)?;
        let v = terms.values(&s);
        let mut grads = s.backward(terms.total)?;
        drop(s);
        if self.cfg.optimizer.clip_norm > 0.0 {
            let norm = grads.clip_global_norm(self.cfg.optimizer.clip_norm);
            if !norm.is_finite() {
                return Err(Error::DivergedLoss(step as u64));
            }
        }
        let lr = self.cfg.optimizer.lr_at(step, self.cfg.max_steps);
        self.cfg
            .optimizer
            .adamw_at(lr)
            .step(self.bundle.model.params_mut(), &grads, &mut self.adam)?;
        self.step = step;
        let row = LossRow {
            step,
            total: v.total,
            audio: v.audio,
            head: v.head,
            face: v.face,
        };
        self.losses.push(row);
        if step % self.cfg.log_every == 0 || step == 1 {
            log::info!(
                "step {step} total {:.4} audio {:.4} head {:.4} face {:.4}",
                row.total,
                row.audio,
                row.head,
                row.face
            );
        }
        Ok(row)
    }

    /// Weights, optimizer moments, generator position and the loss log.
    pub fn checkpoint(&self) -> Result<()> {
        self.bundle.save(&self.run.model_path())?;
        let mut optim = Vec::with_capacity(2 * self.adam.m.len());
        for (id, name, _) in self.bundle.model.params().iter() {
            optim.push((format!("m.{name}"), self.adam.m[id.index()].clone()));
            optim.push((format!("v.{name}"), self.adam.v[id.index()].clone()));
        }
        save_tensors_atomic(&self.run.optim_path(), &optim)?;
        let state = TrainState {
            step: self.step,
            rng: RngState::capture(&self.rng),
            adam_step: self.adam.step,
            losses: self.losses.clone(),
            config: self.cfg.clone(),
        };
        let json = serde_json::to_vec_pretty(&state).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        write_atomic(&self.run.state_path(), &json)?;
        let mut csv = String::from("step,total,audio,head,face\n");
        for r in &self.losses {
            csv.push_str(&format!("{},{},{},{},{}\n", r.step, r.total, r.audio, r.head, r.face));
        }
        write_atomic(&self.run.logs().join("loss.csv"), csv.as_bytes())
    }

    /// Trains until `max_steps`, checkpointing periodically and at the end.
    pub fn run(&mut self) -> Result<()> {
        while self.step < self.cfg.max_steps {
            self.step()?;
            if self.step % self.cfg.checkpoint_every == 0 || self.step == self.cfg.max_steps {
                self.checkpoint()?;
            }
        }
        Ok(())
    }
}

/// Trains a fresh run to completion and returns the trainer for inspection.
pub fn train(cfg: RunConfig, run: RunDir) -> Result<Trainer> {
    let mut t = Trainer::new(cfg, run)?;
    t.run()?;
    Ok(t)
}
