//! Trains a small fused model on a few generated records, then samples and scores a held-out one.
//!
//! Set `AVFLOW_EXAMPLE_STEPS` for a longer run.

use avflow::avdit::DitConfig;
use avflow::harness::{evaluate_bundle, smoothed_total, RunConfig, RunDir, Trainer};
use avflow::synthcorpus::{generate, load_corpus, write_corpus, GeneratorConfig};

pub fn run_example() -> avflow::Result<()> {
    let steps = std::env::var("AVFLOW_EXAMPLE_STEPS").ok().and_then(|s| s.parse().ok()).unwrap_or(60);
    let root = std::env::temp_dir().join(format!("avflow-train-example-{}", std::process::id()));
    std::fs::create_dir_all(&root)?;
    let corpus_path = root.join("corpus.avfc");
    let gen = GeneratorConfig {
        records: 6,
        frames: 258,
        ..GeneratorConfig::default()
    };
    write_corpus(&generate(1, &gen)?, &corpus_path)?;

    let cfg = RunConfig {
        corpus: corpus_path,
        max_steps: steps,
        holdout: 2,
        batch_segments: 4,
        segment_frames: 64,
        checkpoint_every: steps,
        model: DitConfig {
            width: 48,
            hidden: 96,
            heads: 2,
            ..DitConfig::default()
        },
        ..RunConfig::default()
    };
    let mut trainer = Trainer::new(cfg.clone(), RunDir::new(root.join("run")))?;
    trainer.run()?;
    let losses = trainer.losses();
    println!(
        "loss {:.3} -> {:.3} over {steps} steps",
        smoothed_total(losses, 10, 10),
        smoothed_total(losses, steps, 10)
    );

    let corpus = load_corpus(&cfg.corpus)?;
    let outcome = evaluate_bundle(trainer.bundle(), &corpus, &cfg)?;
    println!("{}", outcome.report.pretty());
    std::fs::remove_dir_all(&root)?;
    Ok(())
}

#[allow(dead_code)]
fn main() -> avflow::Result<()> {
    run_example()
}
