//! The straight-line probability path, its velocity, and the Euler solver on a toy field.

use avflow::flowmatch::{euler_solve, midpoint_solve, ot_path, target_velocity};
use ndgrad::Tensor;

pub fn run_example() -> avflow::Result<()> {
    let x0 = Tensor::new(&[3], vec![0.5, -1.0, 2.0])?;
    let x1 = Tensor::new(&[3], vec![1.0, 1.0, 1.0])?;
    for t in [0.0, 0.25, 0.5, 1.0] {
        println!("t = {t:.2}: x_t = {:?}", ot_path(&x0, &x1, t, 1e-6)?.data());
    }
    println!("u = {:?}", target_velocity(&x0, &x1, 1e-6)?.data());

    // dx/dt = -x has the exact solution x0 * e^-1 at t = 1.
    let decay = |_t: f32, x: &Tensor| -> avflow::Result<Tensor> { Ok(x.map(|v| -v)) };
    let exact = (-1.0f32).exp();
    for steps in [8, 16, 32] {
        let e = euler_solve(decay, &Tensor::scalar(1.0), steps)?.item();
        let m = midpoint_solve(decay, &Tensor::scalar(1.0), steps)?.item();
        println!("{steps:>2} steps: euler err {:.2e}, midpoint err {:.2e}", (e - exact).abs(), (m - exact).abs());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> avflow::Result<()> {
    run_example()
}
