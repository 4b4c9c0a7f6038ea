//! Every evaluation metric on small hand-made inputs with known answers.

use avflow::metrics::{beat_align_frames, event_f1, frame_set_f1, frechet_gaussians, mcd};
use nalgebra::{DMatrix, DVector};
use ndgrad::Tensor;

pub fn run_example() -> avflow::Result<()> {
    // Two of three predicted closures land within one frame of the four true ones.
    println!("closure F1 {:.3}", frame_set_f1(&[10, 20, 40], &[11, 21, 30, 50], 1));
    println!("event F1 {:.3}", event_f1(&[5, 100], &[7, 60, 101], 3));

    println!("aligned beats {:.4}", beat_align_frames(&[10, 50], &[10, 50], 3.0)?);
    println!("one sigma off {:.4}", beat_align_frames(&[10], &[13], 3.0)?);

    // 1-d Gaussians N(0, 1) and N(2, 4): FD = 2^2 + 1 + 4 - 2 * 2 = 5.
    let fd = frechet_gaussians(
        &DVector::from_vec(vec![0.0]),
        &DMatrix::from_vec(1, 1, vec![1.0]),
        &DVector::from_vec(vec![2.0]),
        &DMatrix::from_vec(1, 1, vec![4.0]),
    )?;
    println!("Frechet distance {fd:.4}");

    let frames = 20;
    let a = Tensor::new(&[frames, 80], (0..frames * 80).map(|i| ((i % 80) as f32 * 0.1).sin().abs() + 0.1).collect())?;
    // A uniform gain only moves the zeroth cepstral coefficient, which MCD leaves out.
    let louder = a.map(|v| v * 1.5);
    let tilted = Tensor::new(&[frames, 80], (0..frames * 80).map(|i| a.data()[i] * (1.0 + (i % 80) as f32 / 80.0)).collect())?;
    println!(
        "MCD identical {:.4}, louder {:.4}, tilted {:.4}",
        mcd(&a, &a, 13)?,
        mcd(&a, &louder, 13)?,
        mcd(&a, &tilted, 13)?
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> avflow::Result<()> {
    run_example()
}
