use avflow::metrics::{audio_beats, beat_align, kinetic_velocity, rising_crossings};
use avflow::synthcorpus::{
    generate, make_participant_reaction_oracle, random_script, record_rng, GeneratorConfig, SymbolLexicon,
    CLOSURE_THRESHOLD, SMILE_AMPLITUDE,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg(records: usize) -> GeneratorConfig {
    GeneratorConfig {
        records,
        frames: 1720,
        ..GeneratorConfig::default()
    }
}

#[test]
fn audio_beats_recover_annotated_beats() {
    let corpus = generate(7, &cfg(10)).unwrap();
    let (mut hit, mut total, mut found, mut spurious) = (0, 0, 0, 0);
    for rec in &corpus.records {
        let ann = rec.annotations.as_ref().unwrap();
        let beats = audio_beats(rec.mel.as_ref().unwrap());
        for &b in &ann.beat_frames {
            total += 1;
            if beats.iter().any(|&d| d.abs_diff(b as usize) <= 1) {
                hit += 1;
            }
        }
        for &d in &beats {
            found += 1;
            if !ann.beat_frames.iter().any(|&b| d.abs_diff(b as usize) <= 1) {
                spurious += 1;
            }
        }
    }
    let recall = hit as f64 / total as f64;
    let precision = 1.0 - spurious as f64 / found as f64;
    println!("beat recall {recall:.3} precision {precision:.3} ({total} annotated, {found} detected)");
    assert!(recall >= 0.95 && precision >= 0.95);
}

#[test]
fn closures_match_annotations() {
    let corpus = generate(8, &cfg(4)).unwrap();
    for rec in &corpus.records {
        let ann = rec.annotations.as_ref().unwrap();
        let face = rec.face.as_ref().unwrap();
        let closed: Vec<u32> = (0..face.rows()).filter(|&i| face.row(i)[0] < CLOSURE_THRESHOLD).map(|i| i as u32).collect();
        assert_eq!(closed, ann.closure_frames);
        assert!(!closed.is_empty() && closed.len() < face.rows());
    }
}

#[test]
fn ground_truth_beats_beat_shuffled_audio() {
    let corpus = generate(9, &cfg(12)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (which, pick) in [("head", 0usize), ("face", 1)] {
        let mut wins = 0;
        for (i, rec) in corpus.records.iter().enumerate() {
            let motion = if pick == 0 { rec.head_pose.as_ref().unwrap() } else { rec.face.as_ref().unwrap() };
            let truth = beat_align(rec.mel.as_ref().unwrap(), motion, 3.0).unwrap();
            let mut others: Vec<usize> = (0..corpus.records.len()).filter(|&j| j != i).collect();
            others.shuffle(&mut rng);
            let shuffled: Vec<f64> = others
                .iter()
                .cycle()
                .take(20)
                .map(|&j| beat_align(corpus.records[j].mel.as_ref().unwrap(), motion, 3.0).unwrap())
                .collect();
            let best = shuffled.iter().cloned().fold(f64::MIN, f64::max);
            println!("{which} record {i}: truth {truth:.3}, best shuffled {best:.3}");
            if shuffled.iter().all(|&s| truth > s) {
                wins += 1;
            }
        }
        assert_eq!(wins, corpus.records.len(), "{which}");
    }
}

#[test]
fn actor_smiles_start_at_oracle_frames() {
    let lex = SymbolLexicon::standard(16).unwrap();
    let c = cfg(1);
    let mut rng = record_rng(3, 0);
    let script = random_script(&mut rng, &lex, &c);
    let oracle = make_participant_reaction_oracle(&script);
    assert!(!oracle.is_empty());
    let corpus = generate(3, &c).unwrap();
    let face = corpus.records[0].face.as_ref().unwrap();
    let smile: Vec<f32> = (0..face.rows()).map(|i| face.row(i)[1]).collect();
    let events = rising_crossings(&smile, 0.5 * SMILE_AMPLITUDE);
    assert_eq!(events.len(), oracle.len());
    for (e, o) in events.iter().zip(&oracle) {
        assert!(e.abs_diff(o.frame as usize) <= 3, "event {e} vs oracle {}", o.frame);
    }
    assert!(kinetic_velocity(face).iter().all(|v| v.is_finite()));
}
