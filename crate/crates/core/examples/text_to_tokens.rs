//! Trains the text front end on a generated corpus and turns a sentence into token logits.

use avflow::synthcorpus::{generate, GeneratorConfig};
use avflow::texttokens::{train_text_to_tokens, TextTokensConfig};

pub fn run_example() -> avflow::Result<()> {
    let corpus = generate(
        2,
        &GeneratorConfig {
            records: 8,
            frames: 344,
            participants: false,
            ..GeneratorConfig::default()
        },
    )?;
    let (model, report) = train_text_to_tokens(
        &corpus,
        TextTokensConfig {
            steps: 60,
            ..TextTokensConfig::default()
        },
    )?;
    println!(
        "loss {:.3} -> {:.3}",
        report.losses.first().copied().unwrap_or(f64::NAN),
        report.losses.last().copied().unwrap_or(f64::NAN)
    );
    let text = "hello there";
    println!("durations {:?}", model.predict_durations(text)?);
    let tokens = model.text_to_tokens(text)?;
    let decoded: String = tokens.argmax().iter().map(|&i| avflow::codecs::ALPHABET[i]).collect();
    println!("{} frames: {decoded}", tokens.frames());
    Ok(())
}

#[allow(dead_code)]
fn main() -> avflow::Result<()> {
    run_example()
}
