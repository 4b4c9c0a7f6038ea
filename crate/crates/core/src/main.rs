use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use avflow::avdit::{Guidance, Variant};
use avflow::codecs::FPS;
use avflow::harness::{
    evaluate_bundle, evaluate_corpora, infer, run_ablation, run_dyadic_eval, write_report, ModelBundle, RunConfig, RunDir, Trainer,
};
use avflow::synthcorpus::{generate, load_corpus, write_corpus, Corpus, CorpusHeader, CorpusRecord, GeneratorConfig};
use avflow::texttokens::{train_text_to_tokens, TextTokensConfig, TextTokensParams};

/// Audio-visual talking-avatar generation on synthetic corpora.
#[derive(Parser)]
#[command(name = "avflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the run-oriented subcommands.
#[derive(Args, Clone)]
struct Common {
    /// Run config (TOML). Unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output location: a run directory, or a file for single-file outputs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Full-size widths and batch instead of the desk-scale defaults.
    #[arg(long)]
    full_dims: bool,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if self.full_dims {
            cfg = cfg.with_full_dims();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    fn out(&self) -> Result<&Path> {
        self.out.as_deref().context("--out is required")
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dyadic corpus file.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        records: usize,
        /// Seconds per record.
        #[arg(long, default_value_t = 20.0)]
        seconds: f32,
        #[arg(long, default_value_t = 16)]
        face_dim: usize,
    },
    /// Train a model; `--out` is the run directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        guidance: Option<Guidance>,
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from the run directory's last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Train the text-to-tokens front end on a corpus; `--out` is the checkpoint file.
    TrainText {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate all streams for one token sequence; `--out` is a corpus file.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint file or run directory.
        #[arg(long)]
        ckpt: PathBuf,
        /// Corpus whose first record supplies the tokens (and participant streams).
        #[arg(long, conflicts_with = "text")]
        tokens: Option<PathBuf>,
        #[arg(long, requires = "text_ckpt")]
        text: Option<String>,
        /// Text-to-tokens checkpoint, required with `--text`.
        #[arg(long)]
        text_ckpt: Option<PathBuf>,
        /// Corpus whose first record supplies participant streams for guided models.
        #[arg(long)]
        participant: Option<PathBuf>,
        /// Solver steps; defaults to the run config.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score a model or a corpus of generated records against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "samples")]
        ckpt: Option<PathBuf>,
        #[arg(long, conflicts_with = "ckpt")]
        samples: Option<PathBuf>,
        /// Ground-truth corpus.
        #[arg(long)]
        against: PathBuf,
    },
    /// Train and compare the four architecture variants; `--out` is the root directory.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Compare smile reactions of a guided and an unguided model.
    DyadicEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        guided: PathBuf,
        #[arg(long)]
        unguided: PathBuf,
        #[arg(long)]
        against: PathBuf,
    },
    /// Convert text to a token-only corpus file.
    TokensFromText {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        text: String,
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn require_file(p: &Path, what: &str) -> Result<()> {
    if !p.is_file() {
        bail!("{what} {} does not exist", p.display());
    }
    Ok(())
}

/// Accepts a checkpoint file or a run directory containing `ckpt/model.avfl`.
fn bundle_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        RunDir::new(p).model_path()
    } else {
        p.to_path_buf()
    }
}

fn load_bundle(p: &Path) -> Result<ModelBundle> {
    let path = bundle_path(p);
    ModelBundle::load(&path).with_context(|| format!("loading {}", path.display()))
}

fn single_record(path: &Path, rec: CorpusRecord, face_dim: usize) -> Result<()> {
    let corpus = Corpus {
        header: CorpusHeader::plain(face_dim),
        records: vec![rec],
    };
    write_corpus(&corpus, path)?;
    Ok(())
}

fn first_record(path: &Path) -> Result<CorpusRecord> {
    let corpus = load_corpus(path)?;
    corpus.records.into_iter().next().context("corpus has no records")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus {
            common,
            records,
            seconds,
            face_dim,
        } => {
            let cfg = GeneratorConfig {
                records,
                frames: (seconds * FPS).round() as usize,
                face_dim,
                ..GeneratorConfig::default()
            };
            cfg.validate()?;
            let out = common.out()?;
            let corpus = generate(common.seed.unwrap_or(0), &cfg)?;
            write_corpus(&corpus, out)?;
            println!("wrote {} records of {} frames to {}", corpus.len(), cfg.frames, out.display());
        }
        Command::Train {
            common,
            corpus,
            variant,
            guidance,
            steps,
            resume,
        } => {
            let mut cfg = common.run_config()?;
            if let Some(c) = corpus {
                cfg.corpus = c;
            }
            if let Some(v) = variant {
                cfg.variant = v;
            }
            if let Some(g) = guidance {
                cfg.guidance = g;
            }
            if let Some(s) = steps {
                cfg.max_steps = s;
            }
            cfg.validate()?;
            require_file(&cfg.corpus, "corpus")?;
            let run = RunDir::new(common.out()?);
            let mut trainer = if resume { Trainer::resume(cfg, run)? } else { Trainer::new(cfg, run)? };
            trainer.run()?;
            let last = trainer.losses().last().copied();
            println!("trained to step {} in {}", trainer.step_count(), trainer.run_dir().root.display());
            if let Some(l) = last {
                println!("final loss {:.5} (audio {:.5} head {:.5} face {:.5})", l.total, l.audio, l.head, l.face);
            }
        }
        Command::TrainText { common, corpus, steps } => {
            let mut cfg = TextTokensConfig {
                seed: common.seed.unwrap_or(0),
                ..TextTokensConfig::default()
            };
            if let Some(s) = steps {
                cfg.steps = s;
            }
            require_file(&corpus, "corpus")?;
            let out = common.out()?;
            let corpus = load_corpus(&corpus)?;
            let (params, report) = train_text_to_tokens(&corpus, cfg)?;
            params.save(out)?;
            println!(
                "text-to-tokens: final loss {:.4}, duration loss {:.4}",
                report.losses.last().copied().unwrap_or(f64::NAN),
                report.duration_losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Infer {
            common,
            ckpt,
            tokens,
            text,
            text_ckpt,
            participant,
            steps,
        } => {
            let mut cfg = common.run_config()?;
            if let Some(s) = steps {
                cfg.flow.steps = s;
            }
            cfg.flow.validate()?;
            let out = common.out()?;
            require_file(&bundle_path(&ckpt), "checkpoint")?;
            let (tokens, tokens_rec) = match (tokens, text) {
                (Some(p), _) => {
                    let rec = first_record(&p)?;
                    (rec.tokens.clone(), Some(rec))
                }
                (None, Some(t)) => {
                    let tt = TextTokensParams::load(&text_ckpt.expect("clap enforces"))?;
                    (tt.text_to_tokens(&t)?.logits().clone(), None)
                }
                (None, None) => bail!("one of --tokens or --text is required"),
            };
            let participant = match participant {
                Some(p) => Some(first_record(&p)?),
                None => tokens_rec.filter(|r| r.has_participant()),
            };
            let bundle = load_bundle(&ckpt)?;
            let result = infer(&bundle, &tokens, participant.as_ref(), &cfg.flow, cfg.seed)?;
            let frames = result.record.frames();
            single_record(out, result.record, bundle.model.config().face_dim)?;
            println!(
                "generated {frames} frames ({:.2} s of content) in {:.3} s model time with {} steps",
                frames as f32 / FPS,
                result.model_seconds,
                cfg.flow.steps
            );
        }
        Command::Eval {
            common,
            ckpt,
            samples,
            against,
        } => {
            let cfg = common.run_config()?;
            cfg.validate()?;
            require_file(&against, "ground-truth corpus")?;
            let gt = load_corpus(&against)?;
            let report = match (ckpt, samples) {
                (_, Some(s)) => {
                    require_file(&s, "samples corpus")?;
                    evaluate_corpora(&load_corpus(&s)?, &gt, &cfg.metrics, cfg.echo())?
                }
                (Some(c), None) => {
                    let outcome = evaluate_bundle(&load_bundle(&c)?, &gt, &cfg)?;
                    if !outcome.bc.is_empty() {
                        println!("beat alignment above shuffled audio in {:.1}% of sequences", 100.0 * outcome.bc_pass_rate());
                    }
                    outcome.report
                }
                (None, None) => bail!("one of --ckpt or --samples is required"),
            };
            println!("{}", report.pretty());
            println!("{}", report.to_json());
            if let Some(out) = &common.out {
                let run = RunDir::new(out);
                run.create()?;
                write_report(&run.reports().join("eval.json"), &report)?;
            }
            if report.has_nan() {
                bail!("evaluation produced NaN metrics");
            }
        }
        Command::Ablate { common, corpus, steps } => {
            let mut cfg = common.run_config()?;
            if let Some(c) = corpus {
                cfg.corpus = c;
            }
            if let Some(s) = steps {
                cfg.max_steps = s;
            }
            cfg.validate()?;
            require_file(&cfg.corpus, "corpus")?;
            let report = run_ablation(&cfg, common.out()?)?;
            print!("{}", report.table());
        }
        Command::DyadicEval {
            common,
            guided,
            unguided,
            against,
        } => {
            let cfg = common.run_config()?;
            cfg.validate()?;
            require_file(&against, "corpus")?;
            let g = load_bundle(&guided)?;
            let u = load_bundle(&unguided)?;
            let corpus = load_corpus(&against)?;
            let run = common.out.as_ref().map(RunDir::new);
            let report = run_dyadic_eval(&g, &u, &corpus, &cfg, run.as_ref())?;
            for s in [&report.guided, &report.unguided] {
                println!(
                    "{:<12} smile F1 {:.3} ({} of {} predicted, {} expected)  FD_e {:.4}",
                    format!("{:?}", s.guidance),
                    s.smile_f1,
                    s.matched,
                    s.predicted,
                    s.expected,
                    s.fd_e
                );
            }
        }
        Command::TokensFromText { common, text, ckpt } => {
            require_file(&ckpt, "text-to-tokens checkpoint")?;
            let out = common.out()?;
            let tt = TextTokensParams::load(&ckpt)?;
            let tokens = tt.text_to_tokens(&text)?;
            let frames = tokens.frames();
            single_record(out, CorpusRecord::tokens_only(tokens.logits().clone()), GeneratorConfig::default().face_dim)?;
            println!("wrote {frames} token frames to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
