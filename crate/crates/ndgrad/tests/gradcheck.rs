mod common;

use common::gradcheck::*;
use ndgrad::{ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn analytic_gradients_match_central_differences() {
    let mut failures = Vec::new();
    for c in cases() {
        let worst = worst_error(&c);
        println!("{:<14} worst rel err {worst:.2e}", c.name);
        if worst > REL_TOL {
            failures.push((c.name, worst));
        }
    }
    assert!(failures.is_empty(), "gradient check failures: {failures:?}");
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[8, 6], -1.0, 1.0);
    let w = random(&mut rng, &[6, 6], -1.0, 1.0);
    let run = || {
        let mut store = ParamStore::new();
        let wid = store.insert("w", w.clone()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.param(&store, wid);
        let h = tape.matmul(xv, wv).unwrap();
        let h = tape.gelu(h).unwrap();
        let s = tape.softmax(h).unwrap();
        let l = tape.mean(s).unwrap();
        tape.backward(l).unwrap().get(wid).unwrap().clone()
    };
    let a = run();
    let b = run();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn concat_then_slice_roundtrips(
            rows in 1usize..5,
            wa in 1usize..5,
            wb in 1usize..5,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, &[rows, wa], -1.0, 1.0);
            let b = random(&mut rng, &[rows, wb], -1.0, 1.0);
            let mut tape = Tape::new();
            let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
            let c = tape.concat_last(&[av, bv]).unwrap();
            let sa = tape.slice_last(c, 0, wa).unwrap();
            let sb = tape.slice_last(c, wa, wa + wb).unwrap();
            prop_assert_eq!(tape.value(sa), &a);
            prop_assert_eq!(tape.value(sb), &b);
        }

        #[test]
        fn rotary_preserves_pair_norms(pos in 0usize..500, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, &[1, 8], -1.0, 1.0);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let y = tape.rotary(xv, &[pos], 10_000.0).unwrap();
            let yv = tape.value(y).data();
            for i in 0..4 {
                let n0 = x.data()[2 * i].hypot(x.data()[2 * i + 1]);
                let n1 = yv[2 * i].hypot(yv[2 * i + 1]);
                prop_assert!((n0 - n1).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn checkpoint_roundtrip_through_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.avfl");
    let mut store = ParamStore::new();
    store.insert("audio.block0.attn.wq", Tensor::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap()).unwrap();
    store.insert("fusion.block0.b", Tensor::new(&[2], vec![-0.5, 0.25]).unwrap()).unwrap();
    let extra = Tensor::scalar(3.5);
    ndgrad::checkpoint::save_params(&path, &store, &[("norm.mean.audio", &extra)]).unwrap();
    let back = ndgrad::checkpoint::load(&path).unwrap();
    assert_eq!(back.len(), 3);
    assert_eq!(back[0].0, "audio.block0.attn.wq");
    assert_eq!(&back[0].1, store.by_name("audio.block0.attn.wq").unwrap());
    assert_eq!(back[2].1.item(), 3.5);
}
