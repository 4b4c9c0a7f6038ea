//! Fits a two-layer network to a sine with the tape-based autodiff and AdamW.

use ndgrad::{AdamState, AdamW, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> ndgrad::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let xs: Vec<f32> = (0..64).map(|i| i as f32 / 64.0 * 6.0 - 3.0).collect();
    let ys: Vec<f32> = xs.iter().map(|x| x.sin()).collect();
    let x = Tensor::new(&[64, 1], xs)?;
    let y = Tensor::new(&[64, 1], ys)?;

    let mut params = ParamStore::new();
    let mut init = |shape: &[usize], std: f32| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-std..std)).collect()).unwrap()
    };
    let w1 = params.insert("w1", init(&[1, 32], 1.0))?;
    let b1 = params.insert("b1", Tensor::zeros(&[32]))?;
    let w2 = params.insert("w2", init(&[32, 1], 0.3))?;
    let opt = AdamW {
        lr: 1e-2,
        ..AdamW::default()
    };
    let mut state = AdamState::new(&params);
    for step in 0..=400 {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (w1v, b1v, w2v) = (tape.param(&params, w1), tape.param(&params, b1), tape.param(&params, w2));
        let h = tape.matmul(xv, w1v)?;
        let h = tape.add(h, b1v)?;
        let h = tape.gelu(h)?;
        let pred = tape.matmul(h, w2v)?;
        let target = tape.constant(y.clone());
        let loss = tape.l2_loss(pred, target)?;
        if step % 100 == 0 {
            println!("step {step:>3}: mse {:.5}", tape.value(loss).item());
        }
        let grads = tape.backward(loss)?;
        opt.step(&mut params, &grads, &mut state)?;
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> ndgrad::Result<()> {
    run_example()
}
