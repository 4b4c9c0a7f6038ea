use std::fs;
use std::path::Path;
use std::time::Instant;

use ndgrad::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::{participant_input, raw_head, split};
use super::train::{train, write_atomic, ModelBundle, RunDir};
use super::worker_threads;
use crate::avdit::{ConditionBundle, Guidance, Variant};
use crate::codecs::{HeadLatent, LipDecoder};
use crate::error::{Error, Result};
use crate::flowmatch::{sample, FlowConfig, Generated};
use crate::metrics::{beat_align, event_matches, evaluate, rising_crossings, EvalReport, EvalSequence, MetricsConfig};
use crate::synthcorpus::{load_corpus, Corpus, CorpusRecord, FACE_SMILE, SMILE_AMPLITUDE};

const SAMPLE_STREAM: u64 = 0x5a;
const SHUFFLE_STREAM: u64 = 0x5b;

/// Lip decoder used for scoring; matches the geometry the corpus was generated with.
pub fn scoring_decoder(face_dim: usize) -> Result<LipDecoder> {
    LipDecoder::new(face_dim, 1.0, 0.5)
}

/// Conditioning for a whole record under `guidance`.
pub fn record_condition(rec: &CorpusRecord, guidance: Guidance) -> Result<ConditionBundle> {
    let cond = ConditionBundle {
        tokens: rec.tokens.clone(),
        times: vec![0.0],
        participant: participant_input(rec, guidance)?,
        audio_context: None,
        segment: rec.frames(),
    };
    cond.validate()?;
    Ok(cond)
}

/// Generator for the `index`-th sampled sequence of a run seeded with `seed`.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(SAMPLE_STREAM);
    rng
}

/// Samples every record on worker threads; output order follows `records`.
pub fn sample_records(bundle: &ModelBundle, records: &[&CorpusRecord], flow: &FlowConfig, seed: u64) -> Result<Vec<Generated>> {
    let threads = worker_threads().min(records.len()).max(1);
    let mut out: Vec<Option<Result<Generated>>> = (0..records.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunks: Vec<_> = out.chunks_mut(records.len().div_ceil(threads).max(1)).collect();
        let mut start = 0;
        for chunk in chunks {
            let first = start;
            start += chunk.len();
            scope.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    let i = first + k;
                    *slot = Some(record_condition(records[i], bundle.guidance).and_then(|cond| {
                        sample(&bundle.model, &bundle.normalizer, &cond, flow, &mut sample_rng(seed, i))
                    }));
                }
            });
        }
    });
    out.into_iter().map(|r| r.expect("every record sampled")).collect()
}

fn require<'a>(t: &'a Option<Tensor>, what: &str) -> Result<&'a Tensor> {
    t.as_ref()
        .ok_or_else(|| Error::InsufficientData(format!("record without {what}")))
}

/// Ground truth in metric form, with head motion expressed as latents of `bundle`'s VAE.
pub fn reference_sequence(bundle: &ModelBundle, rec: &CorpusRecord) -> Result<EvalSequence> {
    Ok(EvalSequence {
        mel: require(&rec.mel, "mel")?.clone(),
        face: require(&rec.face, "face codes")?.clone(),
        head: bundle.head_vae.encode(&raw_head(rec)?)?.latent().clone(),
    })
}

pub fn generated_sequence(g: &Generated) -> EvalSequence {
    EvalSequence {
        mel: g.mel.clone(),
        face: g.face.clone(),
        head: g.head.clone(),
    }
}

fn bc_or_zero(mel: &Tensor, motion: &Tensor, sigma: f64) -> Result<f64> {
    match beat_align(mel, motion, sigma) {
        Err(Error::NoMotionBeats) => Ok(0.0),
        r => r,
    }
}

/// Beat alignment of one generated sequence with its own audio and with audio
/// taken from other generated sequences.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BcComparison {
    pub bc_h: f64,
    pub bc_e: f64,
    pub shuffled_h: f64,
    pub shuffled_e: f64,
}

impl BcComparison {
    pub fn beats_shuffled(&self) -> bool {
        self.bc_h > self.shuffled_h && self.bc_e > self.shuffled_e
    }
}

/// Per-sequence comparison against the mean over `shuffles` mismatched audio tracks.
pub fn shuffled_baseline(seqs: &[EvalSequence], shuffles: usize, sigma: f64, seed: u64) -> Result<Vec<BcComparison>> {
    if seqs.len() < 2 {
        return Err(Error::InsufficientData("shuffled baseline needs two sequences".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM);
    let n = shuffles.max(1);
    seqs.iter()
        .enumerate()
        .map(|(i, s)| {
            let (mut sh, mut se) = (0.0, 0.0);
            for _ in 0..n {
                let mut j = rng.random_range(0..seqs.len() - 1);
                if j >= i {
                    j += 1;
                }
                sh += bc_or_zero(&seqs[j].mel, &s.head, sigma)?;
                se += bc_or_zero(&seqs[j].mel, &s.face, sigma)?;
            }
            Ok(BcComparison {
                bc_h: bc_or_zero(&s.mel, &s.head, sigma)?,
                bc_e: bc_or_zero(&s.mel, &s.face, sigma)?,
                shuffled_h: sh / n as f64,
                shuffled_e: se / n as f64,
            })
        })
        .collect()
}

pub fn pass_rate(cmp: &[BcComparison]) -> f64 {
    cmp.iter().filter(|c| c.beats_shuffled()).count() as f64 / cmp.len().max(1) as f64
}

/// Sampled held-out sequences with their references and scores.
#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub bc: Vec<BcComparison>,
    pub records: Vec<usize>,
    pub generated: Vec<Generated>,
    pub reference: Vec<EvalSequence>,
}

impl EvalOutcome {
    pub fn bc_pass_rate(&self) -> f64 {
        pass_rate(&self.bc)
    }
}

/// Held-out records used for scoring; all records when nothing is held out.
pub fn eval_indices(corpus_len: usize, cfg: &RunConfig) -> Vec<usize> {
    let (train, held) = split(corpus_len, cfg.holdout);
    let pool = if held.is_empty() { train } else { held };
    let n = if cfg.eval.records == 0 { pool.len() } else { cfg.eval.records.min(pool.len()) };
    pool[..n].to_vec()
}

/// Samples the held-out records and scores them against the corpus.
pub fn evaluate_bundle(bundle: &ModelBundle, corpus: &Corpus, cfg: &RunConfig) -> Result<EvalOutcome> {
    let records = eval_indices(corpus.len(), cfg);
    let recs: Vec<&CorpusRecord> = records.iter().map(|&i| &corpus.records[i]).collect();
    let generated = sample_records(bundle, &recs, &cfg.flow, cfg.seed)?;
    let reference = recs.iter().map(|r| reference_sequence(bundle, r)).collect::<Result<Vec<_>>>()?;
    let pred: Vec<EvalSequence> = generated.iter().map(generated_sequence).collect();
    let decoder = scoring_decoder(corpus.face_dim())?;
    let report = evaluate(&pred, &reference, &decoder, &cfg.metrics, cfg.echo())?;
    let bc = if pred.len() >= 2 {
        shuffled_baseline(&pred, cfg.eval.shuffles, cfg.metrics.beat_sigma, cfg.seed)?
    } else {
        Vec::new()
    };
    Ok(EvalOutcome {
        report,
        bc,
        records,
        generated,
        reference,
    })
}

/// Scores a directory of generated sequences against a reference corpus, record by record.
pub fn evaluate_corpora(pred: &Corpus, gt: &Corpus, cfg: &MetricsConfig, echo: serde_json::Value) -> Result<EvalReport> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(pred.len(), gt.len()));
    }
    let as_seq = |r: &CorpusRecord| -> Result<EvalSequence> {
        Ok(EvalSequence {
            mel: require(&r.mel, "mel")?.clone(),
            face: require(&r.face, "face codes")?.clone(),
            head: match &r.head_latent {
                Some(h) => h.clone(),
                None => require(&r.head_pose, "head motion")?.clone(),
            },
        })
    };
    let p = pred.records.iter().map(as_seq).collect::<Result<Vec<_>>>()?;
    let g = gt.records.iter().map(as_seq).collect::<Result<Vec<_>>>()?;
    evaluate(&p, &g, &scoring_decoder(gt.face_dim())?, cfg, echo)
}

pub fn write_report(path: &Path, report: &impl Serialize) -> Result<()> {
    let json = serde_json::to_vec_pretty(report).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
    write_atomic(path, &json)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationEntry {
    pub variant: Variant,
    pub params: usize,
    pub report: EvalReport,
    pub bc_pass_rate: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Ranking {
    pub metric: String,
    pub higher_is_better: bool,
    pub order: Vec<Variant>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub entries: Vec<AblationEntry>,
    pub rankings: Vec<Ranking>,
    /// Whether the fused model reaches the separate stacks on both beat-align scores.
    pub fused_beats_separate: bool,
    pub diagnostic: Option<String>,
    pub config: serde_json::Value,
}

impl AblationReport {
    pub fn entry(&self, v: Variant) -> Option<&AblationEntry> {
        self.entries.iter().find(|e| e.variant == v)
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<10} {:>9} {:>7} {:>9} {:>7} {:>7} {:>7} {:>7} {:>8}\n",
            "variant", "params", "F1", "FD_e", "Div_h", "Div_e", "BC_h", "BC_e", "MCD"
        );
        for e in &self.entries {
            let r = &e.report;
            s.push_str(&format!(
                "{:<10} {:>9} {:>7.3} {:>9.4} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>8.3}\n",
                e.variant.to_string(),
                e.params,
                r.f1_lips,
                r.fd_e,
                r.div_h,
                r.div_e,
                r.bc_h,
                r.bc_e,
                r.mcd
            ));
        }
        for r in &self.rankings {
            let order: Vec<String> = r.order.iter().map(|v| v.to_string()).collect();
            s.push_str(&format!("{:<6} {}\n", r.metric, order.join(" > ")));
        }
        if let Some(d) = &self.diagnostic {
            s.push_str(d);
            s.push('\n');
        }
        s
    }
}

/// Compares evaluated variants. All four must be present.
pub fn compare_variants(entries: Vec<AblationEntry>, margin: f64, config: serde_json::Value) -> Result<AblationReport> {
    for v in Variant::ALL {
        if !entries.iter().any(|e| e.variant == v) {
            return Err(Error::MissingVariant(v.to_string()));
        }
    }
    let metrics: [(&str, bool, fn(&EvalReport) -> f64); 5] = [
        ("F1", true, |r| r.f1_lips),
        ("FD_e", false, |r| r.fd_e),
        ("BC_h", true, |r| r.bc_h),
        ("BC_e", true, |r| r.bc_e),
        ("MCD", false, |r| r.mcd),
    ];
    let rankings = metrics
        .iter()
        .map(|&(name, higher, get)| {
            let mut order: Vec<&AblationEntry> = entries.iter().collect();
            order.sort_by(|a, b| {
                let (x, y) = (get(&a.report), get(&b.report));
                if higher { y.total_cmp(&x) } else { x.total_cmp(&y) }
            });
            Ranking {
                metric: name.into(),
                higher_is_better: higher,
                order: order.iter().map(|e| e.variant).collect(),
            }
        })
        .collect();
    let fused = &entries.iter().find(|e| e.variant == Variant::AvFlow).expect("checked").report;
    let sep = &entries.iter().find(|e| e.variant == Variant::Separate).expect("checked").report;
    let ok = fused.bc_h + margin >= sep.bc_h && fused.bc_e + margin >= sep.bc_e;
    let diagnostic = (!ok).then(|| {
        format!(
            "fused model trails separate stacks: BC_h {:.4} vs {:.4}, BC_e {:.4} vs {:.4} (margin {margin})",
            fused.bc_h, sep.bc_h, fused.bc_e, sep.bc_e
        )
    });
    if let Some(d) = &diagnostic {
        log::warn!("{d}");
    }
    Ok(AblationReport {
        entries,
        rankings,
        fused_beats_separate: ok,
        diagnostic,
        config,
    })
}

/// Trains (or reloads) every variant under `root/<variant>` and compares them on held-out records.
pub fn run_ablation(base: &RunConfig, root: &Path) -> Result<AblationReport> {
    base.validate()?;
    let corpus = load_corpus(&base.corpus)?;
    let mut entries = Vec::new();
    for v in Variant::ALL {
        let cfg = RunConfig {
            variant: v,
            zero_fusion: false,
            ..base.clone()
        };
        let run = RunDir::new(root.join(v.to_string()));
        let bundle = match ModelBundle::load(&run.model_path()) {
            Ok(b) => {
                log::info!("{v}: reusing {}", run.model_path().display());
                b
            }
            Err(Error::MissingCheckpoint(_)) => train(cfg.clone(), run.clone())?.into_bundle(),
            Err(e) => return Err(e),
        };
        let outcome = evaluate_bundle(&bundle, &corpus, &cfg)?;
        write_report(&run.reports().join("eval.json"), &outcome.report)?;
        entries.push(AblationEntry {
            variant: v,
            params: bundle.model.num_params(),
            bc_pass_rate: outcome.bc_pass_rate(),
            report: outcome.report,
        });
    }
    let report = compare_variants(entries, base.eval.bc_margin, base.echo())?;
    fs::create_dir_all(root.join("reports"))?;
    write_report(&root.join("reports").join("ablation.json"), &report)?;
    write_atomic(&root.join("reports").join("ablation.txt"), report.table().as_bytes())?;
    Ok(report)
}

/// Smile-event scores of one model over the held-out records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmileScores {
    pub guidance: Guidance,
    pub smile_f1: f64,
    pub matched: usize,
    pub predicted: usize,
    pub expected: usize,
    pub fd_e: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DyadicReport {
    pub guided: SmileScores,
    pub unguided: SmileScores,
    pub config: serde_json::Value,
}

impl DyadicReport {
    pub fn guidance_helps(&self) -> bool {
        self.guided.smile_f1 > self.unguided.smile_f1
    }
}

/// Frames where the smile channel rises through half the reaction amplitude.
pub fn smile_events(face: &Tensor) -> Vec<usize> {
    let smile: Vec<f32> = (0..face.rows()).map(|i| face.row(i)[FACE_SMILE]).collect();
    rising_crossings(&smile, 0.5 * SMILE_AMPLITUDE)
}

/// Micro-averaged smile F1 of `generated` against the annotated actor smiles.
pub fn smile_scores(generated: &[Generated], recs: &[&CorpusRecord], slack: usize, guidance: Guidance) -> Result<SmileScores> {
    let (mut matched, mut predicted, mut expected) = (0, 0, 0);
    for (g, r) in generated.iter().zip(recs) {
        let ann = r.annotations.as_ref().ok_or(Error::NoParticipantStreams)?;
        let gt: Vec<usize> = ann.smile_frames.iter().map(|&f| f as usize).collect();
        let pred = smile_events(&g.face);
        matched += event_matches(&pred, &gt, slack);
        predicted += pred.len();
        expected += gt.len();
    }
    let faces: Vec<&Tensor> = generated.iter().map(|g| &g.face).collect();
    let refs = recs.iter().map(|r| require(&r.face, "face codes")).collect::<Result<Vec<_>>>()?;
    Ok(SmileScores {
        guidance,
        smile_f1: crate::metrics::f1_from_counts(matched, predicted, expected),
        matched,
        predicted,
        expected,
        fd_e: crate::metrics::frechet_expression_distance(&faces, &refs)?,
    })
}

/// Per-frame face-code norm of the first held-out record: reference, guided, unguided.
pub fn expression_norm_csv(reference: &Tensor, guided: &Tensor, unguided: &Tensor) -> String {
    let norm = |t: &Tensor, i: usize| t.row(i).iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    let n = reference.rows().min(guided.rows()).min(unguided.rows());
    let mut s = String::from("frame,reference,guided,unguided\n");
    for i in 0..n {
        s.push_str(&format!("{i},{},{},{}\n", norm(reference, i), norm(guided, i), norm(unguided, i)));
    }
    s
}

/// Compares a guided and an unguided model on smile reactions over held-out records.
pub fn run_dyadic_eval(guided: &ModelBundle, unguided: &ModelBundle, corpus: &Corpus, cfg: &RunConfig, out: Option<&RunDir>) -> Result<DyadicReport> {
    if guided.guidance == Guidance::None {
        return Err(Error::ConfigMismatch("the guided model was trained without guidance".into()));
    }
    let records = eval_indices(corpus.len(), cfg);
    let recs: Vec<&CorpusRecord> = records.iter().map(|&i| &corpus.records[i]).collect();
    if recs.iter().any(|r| !r.has_participant() || r.annotations.is_none()) {
        return Err(Error::NoParticipantStreams);
    }
    let g = sample_records(guided, &recs, &cfg.flow, cfg.seed)?;
    let u = sample_records(unguided, &recs, &cfg.flow, cfg.seed)?;
    let report = DyadicReport {
        guided: smile_scores(&g, &recs, cfg.eval.smile_slack, guided.guidance)?,
        unguided: smile_scores(&u, &recs, cfg.eval.smile_slack, unguided.guidance)?,
        config: cfg.echo(),
    };
    if let Some(run) = out {
        run.create()?;
        write_report(&run.reports().join("dyadic.json"), &report)?;
        let csv = expression_norm_csv(require(&recs[0].face, "face codes")?, &g[0].face, &u[0].face);
        write_atomic(&run.reports().join("expression_norm.csv"), csv.as_bytes())?;
    }
    Ok(report)
}

/// A generated record and the model-only time spent producing it.
#[derive(Clone, Debug)]
pub struct Inference {
    pub record: CorpusRecord,
    pub model_seconds: f64,
}

/// Samples all streams for `tokens` and decodes the head latents back to raw pose.
pub fn infer(bundle: &ModelBundle, tokens: &Tensor, participant: Option<&CorpusRecord>, flow: &FlowConfig, seed: u64) -> Result<Inference> {
    let mut cond = ConditionBundle {
        tokens: tokens.clone(),
        times: vec![0.0],
        participant: None,
        audio_context: None,
        segment: tokens.rows(),
    };
    if bundle.guidance != Guidance::None {
        let p = participant.ok_or(Error::NoParticipantStreams)?;
        cond.participant = participant_input(p, bundle.guidance)?;
    }
    cond.validate()?;
    let mut rng = sample_rng(seed, 0);
    let start = Instant::now();
    let g = sample(&bundle.model, &bundle.normalizer, &cond, flow, &mut rng)?;
    let model_seconds = start.elapsed().as_secs_f64();
    let pose = bundle.head_vae.decode(&HeadLatent::new(g.head.clone())?)?;
    let mut record = CorpusRecord::tokens_only(tokens.clone());
    record.mel = Some(g.mel);
    record.face = Some(g.face);
    record.head_latent = Some(g.head);
    record.head_pose = Some(pose.pose().clone());
    Ok(Inference { record, model_seconds })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smile_events_are_rising_half_amplitude_crossings() {
        let mut v = vec![0.0f32; 2 * 20];
        for i in 5..9 {
            v[i * 2 + FACE_SMILE] = SMILE_AMPLITUDE;
        }
        let face = Tensor::new(&[20, 2], v).unwrap();
        assert_eq!(smile_events(&face), vec![5]);
    }

    #[test]
    fn missing_variant_is_reported() {
        let e = compare_variants(Vec::new(), 0.0, serde_json::Value::Null).unwrap_err();
        assert!(matches!(e, Error::MissingVariant(_)));
    }
}
