use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::{Path, PathBuf};

use ndgrad::Tensor;
use serde::{Deserialize, Serialize};

use super::generate::GeneratorConfig;
use super::lexicon::SymbolLexicon;
use super::record::{Annotations, CorpusRecord};
use crate::codecs::{FPS, HEAD_LATENT_DIM, HEAD_POSE_DIM, MEL_BINS, PARTICIPANT_FEATURE_DIM, TOKEN_DIM};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AVFC";
pub const FORMAT_VERSION: u32 = 1;
const END_MARKER: u32 = u32::MAX;
const MAX_HEADER: u32 = 1 << 20;
const MAX_PAYLOAD: u32 = 1 << 30;

const HAS_MEL: u32 = 1;
const HAS_FACE: u32 = 1 << 1;
const HAS_HEAD_POSE: u32 = 1 << 2;
const HAS_HEAD_LATENT: u32 = 1 << 3;
const HAS_PARTICIPANT_FEATURES: u32 = 1 << 4;
const HAS_PARTICIPANT_TOKENS: u32 = 1 << 5;
const HAS_ANNOTATIONS: u32 = 1 << 6;

/// JSON header at the start of every corpus file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub version: u32,
    pub fps: f32,
    pub face_dim: usize,
    pub mel_bins: usize,
    pub token_dim: usize,
    pub lexicon_hash: Option<u32>,
    pub seed: Option<u64>,
    pub generator: Option<GeneratorConfig>,
}

impl CorpusHeader {
    pub fn new(lex: &SymbolLexicon, seed: Option<u64>, generator: Option<GeneratorConfig>) -> Self {
        Self {
            lexicon_hash: Some(lex.hash()),
            seed,
            generator,
            ..Self::plain(lex.face_dim)
        }
    }

    /// Header for corpora not produced by the generator, such as inference outputs.
    pub fn plain(face_dim: usize) -> Self {
        Self {
            version: FORMAT_VERSION,
            fps: FPS,
            face_dim,
            mel_bins: MEL_BINS,
            token_dim: TOKEN_DIM,
            lexicon_hash: None,
            seed: None,
            generator: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub records: Vec<CorpusRecord>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn face_dim(&self) -> usize {
        self.header.face_dim
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptRecord(msg.into())
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    buf.reserve(t.numel() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_record(rec: &CorpusRecord, face_dim: usize) -> Result<Vec<u8>> {
    rec.validate(face_dim)?;
    let optional = [
        (HAS_MEL, &rec.mel),
        (HAS_FACE, &rec.face),
        (HAS_HEAD_POSE, &rec.head_pose),
        (HAS_HEAD_LATENT, &rec.head_latent),
        (HAS_PARTICIPANT_FEATURES, &rec.participant_features),
        (HAS_PARTICIPANT_TOKENS, &rec.participant_tokens),
    ];
    let mut flags = optional.iter().filter(|(_, t)| t.is_some()).fold(0, |f, (bit, _)| f | bit);
    if rec.annotations.is_some() {
        flags |= HAS_ANNOTATIONS;
    }
    let mut buf = Vec::new();
    put_u32(&mut buf, flags);
    put_u32(&mut buf, rec.frames() as u32);
    put_u32(&mut buf, face_dim as u32);
    put_tensor(&mut buf, &rec.tokens);
    for (_, t) in optional {
        if let Some(t) = t {
            put_tensor(&mut buf, t);
        }
    }
    if let Some(a) = &rec.annotations {
        let json = serde_json::to_vec(a).map_err(|e| corrupt(format!("annotations: {e}")))?;
        put_u32(&mut buf, json.len() as u32);
        buf.extend_from_slice(&json);
    }
    Ok(buf)
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.0.len() < n {
            return Err(corrupt("record payload shorter than its streams"));
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        let bytes = self.take(rows * cols * 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Tensor::new(&[rows, cols], data)?)
    }
}

fn decode_record(payload: &[u8], face_dim: usize) -> Result<CorpusRecord> {
    let mut c = Cursor(payload);
    let flags = c.u32()?;
    let n = c.u32()? as usize;
    let fd = c.u32()? as usize;
    if fd != face_dim {
        return Err(corrupt(format!("record face width {fd}, header says {face_dim}")));
    }
    let tokens = c.tensor(n, TOKEN_DIM)?;
    let mut opt = |bit: u32, cols: usize| -> Result<Option<Tensor>> {
        if flags & bit != 0 {
            c.tensor(n, cols).map(Some)
        } else {
            Ok(None)
        }
    };
    let mel = opt(HAS_MEL, MEL_BINS)?;
    let face = opt(HAS_FACE, face_dim)?;
    let head_pose = opt(HAS_HEAD_POSE, HEAD_POSE_DIM)?;
    let head_latent = opt(HAS_HEAD_LATENT, HEAD_LATENT_DIM)?;
    let participant_features = opt(HAS_PARTICIPANT_FEATURES, PARTICIPANT_FEATURE_DIM)?;
    let participant_tokens = opt(HAS_PARTICIPANT_TOKENS, TOKEN_DIM)?;
    let annotations = if flags & HAS_ANNOTATIONS != 0 {
        let len = c.u32()? as usize;
        let json = c.take(len)?;
        Some(serde_json::from_slice::<Annotations>(json).map_err(|e| corrupt(format!("annotations: {e}")))?)
    } else {
        None
    };
    if !c.0.is_empty() {
        return Err(corrupt("trailing bytes in record payload"));
    }
    let rec = CorpusRecord {
        tokens,
        mel,
        face,
        head_pose,
        head_latent,
        participant_features,
        participant_tokens,
        annotations,
    };
    rec.validate(face_dim)?;
    Ok(rec)
}

/// Appends records to a corpus file one at a time.
pub struct CorpusWriter {
    out: BufWriter<File>,
    face_dim: usize,
    count: u64,
}

impl CorpusWriter {
    pub fn create(path: impl AsRef<Path>, header: &CorpusHeader) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        let json = serde_json::to_vec(header).map_err(|e| corrupt(format!("header: {e}")))?;
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(json.len() as u32).to_le_bytes())?;
        out.write_all(&json)?;
        Ok(Self {
            out,
            face_dim: header.face_dim,
            count: 0,
        })
    }

    pub fn write_record(&mut self, rec: &CorpusRecord) -> Result<()> {
        let payload = encode_record(rec, self.face_dim)?;
        self.out.write_all(&(payload.len() as u32).to_le_bytes())?;
        self.out.write_all(&payload)?;
        self.out.write_all(&crc32fast::hash(&payload).to_le_bytes())?;
        self.count += 1;
        Ok(())
    }

    /// Writes the end marker and flushes. Returns the record count.
    pub fn finish(mut self) -> Result<u64> {
        self.out.write_all(&END_MARKER.to_le_bytes())?;
        self.out.write_all(&self.count.to_le_bytes())?;
        self.out.flush()?;
        self.out.get_ref().sync_all()?;
        Ok(self.count)
    }
}

/// Streams records from a corpus file, holding one record in memory at a time.
pub struct CorpusReader<R: Read = BufReader<File>> {
    input: R,
    header: CorpusHeader,
    read: u64,
    done: bool,
}

impl CorpusReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

fn read_exact_or_corrupt<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => corrupt(format!("file truncated inside {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_corrupt(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

impl<R: Read> CorpusReader<R> {
    pub fn new(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact_or_corrupt(&mut input, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(corrupt("not a corpus file (bad magic)"));
        }
        let version = read_u32(&mut input, "header")?;
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let len = read_u32(&mut input, "header")?;
        if len > MAX_HEADER {
            return Err(corrupt(format!("header length {len} is implausible")));
        }
        let mut json = vec![0u8; len as usize];
        read_exact_or_corrupt(&mut input, &mut json, "header")?;
        let header: CorpusHeader = serde_json::from_slice(&json).map_err(|e| corrupt(format!("header: {e}")))?;
        Ok(Self {
            input,
            header,
            read: 0,
            done: false,
        })
    }

    pub fn header(&self) -> &CorpusHeader {
        &self.header
    }

    fn next_record(&mut self) -> Result<Option<CorpusRecord>> {
        let len = read_u32(&mut self.input, "record length")?;
        if len == END_MARKER {
            let mut b = [0u8; 8];
            read_exact_or_corrupt(&mut self.input, &mut b, "end marker")?;
            let count = u64::from_le_bytes(b);
            if count != self.read {
                return Err(corrupt(format!("end marker counts {count} records, read {}", self.read)));
            }
            return Ok(None);
        }
        if len > MAX_PAYLOAD {
            return Err(corrupt(format!("record length {len} is implausible")));
        }
        let mut payload = vec![0u8; len as usize];
        read_exact_or_corrupt(&mut self.input, &mut payload, "record")?;
        let crc = read_u32(&mut self.input, "record checksum")?;
        if crc != crc32fast::hash(&payload) {
            return Err(corrupt(format!("checksum mismatch in record {}", self.read)));
        }
        let rec = decode_record(&payload, self.header.face_dim)?;
        self.read += 1;
        Ok(Some(rec))
    }
}

impl<R: Read> Iterator for CorpusReader<R> {
    type Item = Result<CorpusRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let out = self.next_record().transpose();
        if !matches!(out, Some(Ok(_))) {
            self.done = true;
        }
        out
    }
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let mut w = CorpusWriter::create(path, &corpus.header)?;
    for r in &corpus.records {
        w.write_record(r)?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let reader = CorpusReader::open(path)?;
    let header = reader.header().clone();
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok(Corpus { header, records })
}

/// Like [`read_corpus`] but reports any failure as unreadable, naming the path.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    read_corpus(path).map_err(|e| Error::CorpusUnreadable {
        path: PathBuf::from(path),
        reason: e.to_string(),
    })
}
