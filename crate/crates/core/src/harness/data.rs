use ndgrad::Tensor;
use rand::Rng;

use crate::avdit::{Guidance, ParticipantFeatures};
use crate::codecs::{HeadVae, HeadVaeConfig, RawHeadPose, TokenSequence};
use crate::error::{Error, Result};
use crate::flowmatch::{ChannelStats, FlowBatch, Normalizer};
use crate::synthcorpus::{Corpus, CorpusRecord};

/// Indices of training and held-out records. The held-out records are the
/// last ones; at least one record is always kept for training.
pub fn split(records: usize, holdout: usize) -> (Vec<usize>, Vec<usize>) {
    let h = holdout.min(records.saturating_sub(1));
    let cut = records - h;
    ((0..cut).collect(), (cut..records).collect())
}

fn require<'a>(t: &'a Option<Tensor>, what: &str) -> Result<&'a Tensor> {
    t.as_ref()
        .ok_or_else(|| Error::InsufficientData(format!("record without {what}")))
}

pub fn raw_head(rec: &CorpusRecord) -> Result<RawHeadPose> {
    RawHeadPose::from_unnormalized(require(&rec.head_pose, "head pose")?.clone())
}

/// The 85-wide participant input for `guidance`, or `None` when guidance is off.
pub fn participant_input(rec: &CorpusRecord, guidance: Guidance) -> Result<Option<Tensor>> {
    if guidance == Guidance::None {
        return Ok(None);
    }
    let (Some(f), Some(t)) = (&rec.participant_features, &rec.participant_tokens) else {
        return Err(Error::NoParticipantStreams);
    };
    let features = ParticipantFeatures::new(f.clone())?;
    let tokens = TokenSequence::new(t.clone())?;
    Ok(Some(guidance.participant_input(&features, &tokens)?))
}

pub fn fit_head_vae(corpus: &Corpus, train: &[usize], cfg: &HeadVaeConfig) -> Result<HeadVae> {
    let poses = train.iter().map(|&i| raw_head(&corpus.records[i])).collect::<Result<Vec<_>>>()?;
    let (vae, report) = HeadVae::train(&poses, cfg.clone())?;
    log::info!(
        "head VAE: {} steps, final loss {:.4}, reconstruction L1 {:.4}",
        report.steps,
        report.final_loss,
        report.recon_l1
    );
    Ok(vae)
}

/// Per-record head latents for the given indices.
pub fn head_latents(corpus: &Corpus, indices: &[usize], vae: &HeadVae) -> Result<Vec<Tensor>> {
    indices
        .iter()
        .map(|&i| Ok(vae.encode(&raw_head(&corpus.records[i])?)?.latent().clone()))
        .collect()
}

pub fn fit_normalizer(corpus: &Corpus, train: &[usize], latents: &[Tensor]) -> Result<Normalizer> {
    let recs: Vec<&CorpusRecord> = train.iter().map(|&i| &corpus.records[i]).collect();
    let mels = recs.iter().map(|r| require(&r.mel, "mel")).collect::<Result<Vec<_>>>()?;
    let faces = recs.iter().map(|r| require(&r.face, "face codes")).collect::<Result<Vec<_>>>()?;
    Ok(Normalizer {
        audio: ChannelStats::fit(mels)?,
        head: ChannelStats::fit(latents)?,
        face: ChannelStats::fit(faces)?,
    })
}

/// One training record in model units.
#[derive(Clone, Debug)]
pub struct PreparedRecord {
    pub audio: Tensor,
    pub vision: Tensor,
    pub tokens: Tensor,
    pub participant: Option<Tensor>,
}

impl PreparedRecord {
    pub fn frames(&self) -> usize {
        self.tokens.rows()
    }
}

pub fn prepare_records(
    corpus: &Corpus,
    indices: &[usize],
    latents: &[Tensor],
    norm: &Normalizer,
    guidance: Guidance,
) -> Result<Vec<PreparedRecord>> {
    indices
        .iter()
        .zip(latents)
        .map(|(&i, latent)| {
            let r = &corpus.records[i];
            Ok(PreparedRecord {
                audio: norm.audio.normalize(require(&r.mel, "mel")?)?,
                vision: norm.normalize_vision(latent, require(&r.face, "face codes")?)?,
                tokens: r.tokens.clone(),
                participant: participant_input(r, guidance)?,
            })
        })
        .collect()
}

/// Random crops of `segment` frames stacked along rows. `context` supplies
/// per-record audio for the vision stack of the cascaded variant.
pub fn sample_batch<R: Rng>(
    rng: &mut R,
    records: &[PreparedRecord],
    context: Option<&[Tensor]>,
    segments: usize,
    segment: usize,
) -> Result<FlowBatch> {
    if records.is_empty() {
        return Err(Error::InsufficientData("no training records".into()));
    }
    let mut audio = Vec::with_capacity(segments);
    let mut vision = Vec::with_capacity(segments);
    let mut tokens = Vec::with_capacity(segments);
    let mut participant = Vec::with_capacity(segments);
    let mut ctx = Vec::with_capacity(segments);
    for _ in 0..segments {
        let k = rng.random_range(0..records.len());
        let r = &records[k];
        if r.frames() < segment {
            return Err(Error::InsufficientData(format!(
                "record of {} frames is shorter than a {segment}-frame segment",
                r.frames()
            )));
        }
        let s = rng.random_range(0..=r.frames() - segment);
        audio.push(r.audio.slice_rows(s, s + segment)?);
        vision.push(r.vision.slice_rows(s, s + segment)?);
        tokens.push(r.tokens.slice_rows(s, s + segment)?);
        if let Some(p) = &r.participant {
            participant.push(p.slice_rows(s, s + segment)?);
        }
        if let Some(c) = context {
            ctx.push(c[k].slice_rows(s, s + segment)?);
        }
    }
    let stack = |v: &[Tensor]| -> Result<Tensor> { Ok(Tensor::concat_rows(&v.iter().collect::<Vec<_>>())?) };
    Ok(FlowBatch {
        audio: stack(&audio)?,
        vision: stack(&vision)?,
        tokens: stack(&tokens)?,
        participant: if participant.len() == segments { Some(stack(&participant)?) } else { None },
        audio_context: if context.is_some() { Some(stack(&ctx)?) } else { None },
        segment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_keeps_a_training_record() {
        assert_eq!(split(5, 2), (vec![0, 1, 2], vec![3, 4]));
        assert_eq!(split(1, 3), (vec![0], vec![]));
        assert_eq!(split(4, 0), (vec![0, 1, 2, 3], vec![]));
    }
}
