//! Times model-only sampling of 20 s of content at different solver step counts.

use avflow::avdit::{AvDit, DitConfig, Variant};
use avflow::codecs::{HeadVae, HeadVaeConfig};
use avflow::flowmatch::{FlowConfig, Normalizer};
use avflow::harness::data::raw_head;
use avflow::harness::{infer, ModelBundle};
use avflow::synthcorpus::{generate, GeneratorConfig};

pub fn run_example() -> avflow::Result<()> {
    let frames: usize = std::env::var("AVFLOW_EXAMPLE_FRAMES").ok().and_then(|s| s.parse().ok()).unwrap_or(1720);
    let corpus = generate(
        0,
        &GeneratorConfig {
            records: 1,
            frames,
            participants: false,
            ..GeneratorConfig::default()
        },
    )?;
    let cfg = DitConfig::default();
    // An untrained generator is as slow as a trained one; the VAE only needs to decode.
    let vae_cfg = HeadVaeConfig {
        steps: 5,
        ..HeadVaeConfig::default()
    };
    let (head_vae, _) = HeadVae::train(&[raw_head(&corpus.records[0])?], vae_cfg)?;
    let bundle = ModelBundle {
        normalizer: Normalizer::identity(cfg.face_dim),
        model: AvDit::new(cfg, Variant::AvFlow, 0)?,
        head_vae,
        guidance: Default::default(),
    };
    let tokens = &corpus.records[0].tokens;
    let mut base = None;
    for steps in [8, 16, 32] {
        let flow = FlowConfig {
            steps,
            ..FlowConfig::default()
        };
        let out = infer(&bundle, tokens, None, &flow, 0)?;
        let ratio = out.model_seconds / *base.get_or_insert(out.model_seconds);
        println!(
            "{steps:>2} steps: {} frames in {:.3} s ({ratio:.2}x the 8-step time)",
            out.record.frames(),
            out.model_seconds
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> avflow::Result<()> {
    run_example()
}
