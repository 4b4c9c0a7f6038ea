//! Generates a small synthetic dyadic corpus, writes it to disk and streams it back.

use avflow::synthcorpus::{generate, write_corpus, CorpusReader, GeneratorConfig};

pub fn run_example() -> avflow::Result<()> {
    let cfg = GeneratorConfig {
        records: 3,
        frames: 344,
        ..GeneratorConfig::default()
    };
    let corpus = generate(11, &cfg)?;
    let path = std::env::temp_dir().join(format!("avflow-example-{}.avfc", std::process::id()));
    write_corpus(&corpus, &path)?;

    let reader = CorpusReader::open(&path)?;
    println!("face width {}, {} fps", reader.header().face_dim, reader.header().fps);
    for (i, rec) in reader.enumerate() {
        let rec = rec?;
        let ann = rec.annotations.as_ref().expect("generated records are annotated");
        println!(
            "record {i}: {} frames, {} beats, {} closure frames, {} actor smiles",
            rec.frames(),
            ann.beat_frames.len(),
            ann.closure_frames.len(),
            ann.smile_frames.len()
        );
    }
    std::fs::remove_file(&path)?;
    Ok(())
}

#[allow(dead_code)]
fn main() -> avflow::Result<()> {
    run_example()
}
