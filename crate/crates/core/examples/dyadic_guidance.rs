//! Builds the participant conditioning for each guidance mode and shows that it reaches the output.

use avflow::avdit::{AvDit, DitConfig, Guidance, Variant};
use avflow::harness::{data::participant_input, record_condition};
use avflow::synthcorpus::{generate, GeneratorConfig};
use avflow::nn::normal_tensor;
use ndgrad::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> avflow::Result<()> {
    let corpus = generate(
        4,
        &GeneratorConfig {
            records: 1,
            frames: 172,
            smile_interval: 60.0,
            ..GeneratorConfig::default()
        },
    )?;
    let rec = &corpus.records[0];
    let ann = rec.annotations.as_ref().expect("annotations");
    println!("participant smiles answered at actor frames {:?}", ann.smile_frames);

    for g in [Guidance::None, Guidance::Audio, Guidance::Visual, Guidance::AudioVisual] {
        match participant_input(rec, g)? {
            Some(p) => {
                let live = (0..p.last_dim()).filter(|&c| (0..p.rows()).any(|i| p.row(i)[c] != 0.0)).count();
                println!("{g:<12} input {} wide, {live} channels in use", p.last_dim());
            }
            None => println!("{g:<12} no participant input"),
        }
    }

    // Give the fused model nonzero output weights so the conditioning path is visible.
    let mut model = AvDit::new(
        DitConfig {
            width: 32,
            hidden: 64,
            heads: 2,
            ..DitConfig::default()
        },
        Variant::AvFlow,
        0,
    )?;
    let out = model.params().id("vision.out.w").expect("vision output weights");
    let shape = model.params().get(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    model.params_mut().set(out, normal_tensor(&mut rng, &shape, 0.05))?;

    let n = rec.frames();
    let audio = Tensor::zeros(&[n, 80]);
    let vision = Tensor::zeros(&[n, model.config().vision_dim()]);
    let guided = record_condition(rec, Guidance::AudioVisual)?;
    let unguided = record_condition(rec, Guidance::None)?;
    let (_, vg) = model.predict(&audio, &vision, &guided)?;
    let (_, vu) = model.predict(&audio, &vision, &unguided)?;
    println!("largest change from guidance: {:.4}", vg.abs_diff_max(&vu));
    Ok(())
}

#[allow(dead_code)]
fn main() -> avflow::Result<()> {
    run_example()
}
