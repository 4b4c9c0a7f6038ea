use avflow::avdit::{fuse, window_mask};
use avflow::flowmatch::{euler_solve, ot_path, target_velocity};
use avflow::metrics::{beat_align_frames, frame_set_f1, kinetic_velocity, mcd};
use avflow::synthcorpus::{generate, read_corpus, write_corpus, GeneratorConfig};
use ndgrad::checkpoint::{read_tensors, write_tensors};
use ndgrad::Tensor;
use proptest::prelude::*;

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f32..2.0, rows * cols).prop_map(move |v| Tensor::new(&[rows, cols], v).unwrap())
}

fn pair(max_rows: usize, max_cols: usize) -> impl Strategy<Value = (Tensor, Tensor)> {
    (1..max_rows, 1..max_cols).prop_flat_map(|(r, c)| (tensor(r, c), tensor(r, c)))
}

fn frames() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::btree_set(0usize..200, 0..20).prop_map(|s| s.into_iter().collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn path_moves_along_the_velocity((x0, x1) in pair(8, 12), s in 0.0f32..1.0, t in 0.0f32..1.0) {
        let sigma = 1e-6;
        let ps = ot_path(&x0, &x1, s, sigma).unwrap();
        let pt = ot_path(&x0, &x1, t, sigma).unwrap();
        let u = target_velocity(&x0, &x1, sigma).unwrap();
        prop_assert_eq!(ot_path(&x0, &x1, 0.0, sigma).unwrap(), x0.clone());
        for ((a, b), v) in ps.data().iter().zip(pt.data()).zip(u.data()) {
            prop_assert!((b - a - (t - s) * v).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_fusion_is_the_identity((xa, xv) in pair(6, 16)) {
        let d = xa.last_dim();
        let w = Tensor::zeros(&[2 * d, d]);
        let b = Tensor::zeros(&[d]);
        let (ya, yv) = fuse(&xa, &xv, &w, &b, &w, &b).unwrap();
        prop_assert_eq!(ya, xa);
        prop_assert_eq!(yv, xv);
    }

    #[test]
    fn euler_integrates_constant_fields_exactly(x in tensor(3, 4), c in tensor(3, 4), steps in 1usize..64) {
        let x = x.map(|v| (v * 64.0).round() / 64.0);
        let c = c.map(|v| (v * 64.0).round() / 64.0);
        let steps = steps.next_power_of_two();
        let out = euler_solve(|_, _| Ok(c.clone()), &x, steps).unwrap();
        let want = x.zip_map(&c, |a, b| a + b).unwrap();
        prop_assert_eq!(out, want);
    }

    #[test]
    fn window_rows_stay_in_band(n in 1usize..80, window in 1usize..16, look in 0usize..4) {
        prop_assume!(look < window);
        for (i, (lo, hi)) in window_mask(n, window, look).into_iter().enumerate() {
            prop_assert!(lo <= i && i <= hi);
            prop_assert!(hi <= i + look);
            prop_assert!(hi - lo < window);
        }
    }

    #[test]
    fn f1_is_bounded_and_reflexive(pred in frames(), gt in frames(), slack in 0usize..4) {
        let f = frame_set_f1(&pred, &gt, slack);
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert_eq!(frame_set_f1(&gt, &gt, slack), 1.0);
    }

    #[test]
    fn beat_align_is_a_proximity_score(audio in frames(), motion in frames()) {
        prop_assume!(!motion.is_empty());
        let s = beat_align_frames(&audio, &motion, 3.0).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
        let mut all = audio.clone();
        all.extend(&motion);
        prop_assert_eq!(beat_align_frames(&all, &motion, 3.0).unwrap(), 1.0);
    }

    #[test]
    fn mcd_is_a_nonnegative_distance((a, b) in (2usize..10).prop_flat_map(|r| (tensor(r, 80), tensor(r, 80)))) {
        let a = a.map(f32::abs);
        let b = b.map(f32::abs);
        prop_assert_eq!(mcd(&a, &a, 13).unwrap(), 0.0);
        let d = mcd(&a, &b, 13).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!((d - mcd(&b, &a, 13).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn kinetic_velocity_is_nonnegative(m in (1usize..30).prop_flat_map(|r| tensor(r, 5))) {
        let v = kinetic_velocity(&m);
        prop_assert_eq!(v.len(), m.rows());
        prop_assert!(v.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn tensors_roundtrip_through_the_checkpoint_format(ts in prop::collection::vec(pair(5, 7), 1..4)) {
        let named: Vec<(String, Tensor)> = ts.iter().enumerate().map(|(i, (a, _))| (format!("t{i}"), a.clone())).collect();
        let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &refs).unwrap();
        prop_assert_eq!(read_tensors(buf.as_slice()).unwrap(), named);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn corpora_roundtrip_through_the_file_format(seed in 0u64..1000, records in 1usize..3, frames in 20usize..120, participants: bool) {
        let cfg = GeneratorConfig { records, frames, participants, ..GeneratorConfig::default() };
        let corpus = generate(seed, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.avfc");
        write_corpus(&corpus, &path).unwrap();
        let back = read_corpus(&path).unwrap();
        prop_assert_eq!(back.records, corpus.records);
        prop_assert_eq!(back.header, corpus.header);
    }
}
