//! Highway fusion between the two stacks, attention bands, and the four architecture variants.

use avflow::avdit::{fuse, AvDit, DitConfig, Variant};
use ndgrad::Tensor;

pub fn run_example() -> avflow::Result<()> {
    let d = 4;
    let xa = Tensor::new(&[d], vec![1.0, 2.0, 3.0, 4.0])?;
    let xv = Tensor::new(&[d], vec![-1.0, 0.5, 0.0, 2.0])?;
    let zeros = Tensor::zeros(&[2 * d, d]);
    let (ya, yv) = fuse(&xa, &xv, &zeros, &Tensor::zeros(&[d]), &zeros, &Tensor::zeros(&[d]))?;
    println!("zero fusion keeps both streams: {} {}", ya == xa, yv == xv);

    // Route the vision stream into audio with U = [0; I].
    let mut u = vec![0.0; 2 * d * d];
    for i in 0..d {
        u[(d + i) * d + i] = 1.0;
    }
    let (ya, _) = fuse(&xa, &xv, &Tensor::new(&[2 * d, d], u)?, &Tensor::zeros(&[d]), &zeros, &Tensor::zeros(&[d]))?;
    println!("audio after fusion with U = [0; I]: {:?}", ya.data());

    let cfg = DitConfig::default();
    for l in 0..cfg.blocks {
        let band = cfg.band(l, 1720);
        println!("block {l}: attends {} frames back, {} ahead", band.behind, band.ahead);
    }
    println!("total lookahead {} frames", cfg.total_lookahead());
    for v in Variant::ALL {
        let model = AvDit::new(cfg.clone(), v, 0)?;
        println!("{:<9} {:>8} parameters", v.to_string(), model.num_params());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> avflow::Result<()> {
    run_example()
}
