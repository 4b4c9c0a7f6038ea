use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

use avflow::synthcorpus::{random_script, record_rng, synthesize, CorpusHeader, CorpusReader, CorpusWriter, GeneratorConfig, SymbolLexicon};

struct Counting;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = LIVE.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        LIVE.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

fn reset_peak() -> usize {
    let live = LIVE.load(Ordering::Relaxed);
    PEAK.store(live, Ordering::Relaxed);
    live
}

#[test]
fn hundred_records_stream_under_a_memory_ceiling() {
    let cfg = GeneratorConfig {
        records: 100,
        frames: 430,
        ..GeneratorConfig::default()
    };
    let lex = SymbolLexicon::standard(cfg.face_dim).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.avfc");

    let mut record_bytes = 0;
    let base = reset_peak();
    let mut w = CorpusWriter::create(&path, &CorpusHeader::new(&lex, Some(4), Some(cfg.clone()))).unwrap();
    for i in 0..cfg.records {
        let mut rng = record_rng(4, i);
        let script = random_script(&mut rng, &lex, &cfg);
        let rec = synthesize(&mut rng, &lex, &script, &cfg).unwrap();
        if i == 0 {
            record_bytes = [&Some(rec.tokens.clone()), &rec.mel, &rec.face, &rec.head_pose, &rec.participant_features, &rec.participant_tokens]
                .iter()
                .filter_map(|t| t.as_ref())
                .map(|t| t.numel() * 4)
                .sum::<usize>();
        }
        w.write_record(&rec).unwrap();
    }
    assert_eq!(w.finish().unwrap(), 100);
    let write_peak = PEAK.load(Ordering::Relaxed) - base;

    let base = reset_peak();
    let mut frames = 0;
    for rec in CorpusReader::open(&path).unwrap() {
        frames += rec.unwrap().frames();
    }
    let read_peak = PEAK.load(Ordering::Relaxed) - base;

    assert_eq!(frames, 100 * 430);
    let corpus_bytes = 100 * record_bytes;
    println!("record {record_bytes} B, corpus {corpus_bytes} B, write peak {write_peak} B, read peak {read_peak} B");
    // A handful of records' worth at most, far below the whole corpus.
    assert!(read_peak < 4 * record_bytes, "read peak {read_peak} B");
    assert!(write_peak < 10 * record_bytes, "write peak {write_peak} B");
}
