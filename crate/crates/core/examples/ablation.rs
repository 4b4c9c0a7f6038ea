//! Trains all four architecture variants briefly on one corpus and prints the comparison table.
//!
//! Set `AVFLOW_EXAMPLE_STEPS` for a longer run.

use avflow::avdit::DitConfig;
use avflow::harness::{run_ablation, RunConfig};
use avflow::synthcorpus::{generate, write_corpus, GeneratorConfig};

pub fn run_example() -> avflow::Result<()> {
    let steps = std::env::var("AVFLOW_EXAMPLE_STEPS").ok().and_then(|s| s.parse().ok()).unwrap_or(20);
    let root = std::env::temp_dir().join(format!("avflow-ablation-example-{}", std::process::id()));
    std::fs::create_dir_all(&root)?;
    let corpus = root.join("corpus.avfc");
    let gen = GeneratorConfig {
        records: 5,
        frames: 172,
        ..GeneratorConfig::default()
    };
    write_corpus(&generate(3, &gen)?, &corpus)?;
    let cfg = RunConfig {
        corpus,
        max_steps: steps,
        holdout: 2,
        batch_segments: 2,
        segment_frames: 64,
        checkpoint_every: steps,
        model: DitConfig {
            width: 32,
            hidden: 64,
            heads: 2,
            ..DitConfig::default()
        },
        ..RunConfig::default()
    };
    let report = run_ablation(&cfg, &root)?;
    print!("{}", report.table());
    std::fs::remove_dir_all(&root)?;
    Ok(())
}

#[allow(dead_code)]
fn main() -> avflow::Result<()> {
    run_example()
}
