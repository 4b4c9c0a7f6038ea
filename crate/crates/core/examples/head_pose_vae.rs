//! Fits the temporal head-pose VAE on generated head tracks and reports reconstruction error.

use avflow::codecs::{HeadVae, HeadVaeConfig, RawHeadPose};
use avflow::synthcorpus::{generate, GeneratorConfig};

pub fn run_example() -> avflow::Result<()> {
    let corpus = generate(
        5,
        &GeneratorConfig {
            records: 4,
            frames: 430,
            participants: false,
            ..GeneratorConfig::default()
        },
    )?;
    let poses = corpus
        .records
        .iter()
        .map(|r| RawHeadPose::from_unnormalized(r.head_pose.clone().expect("head pose")))
        .collect::<avflow::Result<Vec<_>>>()?;
    let cfg = HeadVaeConfig {
        steps: 150,
        ..HeadVaeConfig::default()
    };
    let (vae, report) = HeadVae::train(&poses[..3], cfg)?;
    println!("{} steps, final loss {:.4}", report.steps, report.final_loss);
    println!("train L1 {:.4}, held-out L1 {:.4}", report.recon_l1, vae.reconstruction_l1(&poses[3..])?);
    let latent = vae.encode(&poses[3])?;
    println!("latent track: {} frames x {}", latent.frames(), latent.latent().last_dim());
    Ok(())
}

#[allow(dead_code)]
fn main() -> avflow::Result<()> {
    run_example()
}
