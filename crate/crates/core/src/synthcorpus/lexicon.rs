use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codecs::{char_index, MEL_BINS};
use crate::error::{Error, Result};

pub const LEXICON_SEED: u64 = 0x1e_c51c0;
/// Face-code dimensions with a fixed meaning: lip aperture and smile.
pub const FACE_APERTURE: usize = 0;
pub const FACE_SMILE: usize = 1;
pub const FACE_FIXED_DIMS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Symbol {
    pub ch: char,
    /// Sustained mel magnitude while the symbol sounds.
    pub mel: Vec<f32>,
    /// Expression target over face dims `2..D_f` (dims 0 and 1 are zero).
    pub stroke: Vec<f32>,
    /// Signed lip aperture in scene units; negative means pressed lips.
    pub aperture: f32,
    /// Inclusive duration range in frames.
    pub duration: (u32, u32),
}

impl Symbol {
    pub fn is_silence(&self) -> bool {
        self.ch == ' '
    }
}

/// Phoneme-like symbol inventory. Index 0 is always silence.
#[derive(Clone, Debug, PartialEq)]
pub struct SymbolLexicon {
    pub symbols: Vec<Symbol>,
    pub face_dim: usize,
}

const STANDARD: [(char, f32, (u32, u32)); 12] = [
    (' ', 0.0, (6, 16)),
    ('a', 0.060, (8, 14)),
    ('e', 0.045, (7, 12)),
    ('i', 0.040, (6, 11)),
    ('o', 0.050, (8, 13)),
    ('u', 0.035, (7, 12)),
    ('m', -0.020, (6, 10)),
    ('b', -0.020, (5, 8)),
    ('p', -0.020, (5, 8)),
    ('s', 0.030, (6, 11)),
    ('t', 0.030, (4, 7)),
    ('n', 0.025, (5, 9)),
];

impl SymbolLexicon {
    /// The default 12-symbol lexicon with seeded mel templates and strokes.
    pub fn standard(face_dim: usize) -> Result<Self> {
        if face_dim < FACE_FIXED_DIMS + 1 {
            return Err(Error::BadLexicon(format!("face width {face_dim} leaves no expression dims")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(LEXICON_SEED);
        let mut symbols = Vec::with_capacity(STANDARD.len());
        for &(ch, aperture, duration) in &STANDARD {
            let silent = ch == ' ';
            let mut mel = vec![0.0f32; MEL_BINS];
            let mut stroke = vec![0.0f32; face_dim];
            if !silent {
                for _ in 0..3 {
                    let centre = rng.random_range(2.0..(MEL_BINS as f32 - 2.0));
                    let width = rng.random_range(2.0..5.0f32);
                    let amp = rng.random_range(0.6..1.5f32);
                    for (b, m) in mel.iter_mut().enumerate() {
                        *m += amp * (-((b as f32 - centre) / width).powi(2) / 2.0).exp();
                    }
                }
                let mut norm = 0.0f32;
                for s in stroke.iter_mut().skip(FACE_FIXED_DIMS) {
                    *s = rng.random_range(-1.0..1.0f32);
                    norm += *s * *s;
                }
                let norm = norm.sqrt().max(1e-6);
                stroke.iter_mut().skip(FACE_FIXED_DIMS).for_each(|s| *s /= norm);
            }
            symbols.push(Symbol {
                ch,
                mel,
                stroke,
                aperture,
                duration,
            });
        }
        let lex = Self { symbols, face_dim };
        lex.validate()?;
        Ok(lex)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.symbols.first().ok_or_else(|| Error::BadLexicon("no symbols".into()))?;
        if !first.is_silence() {
            return Err(Error::BadLexicon("symbol 0 must be silence".into()));
        }
        if first.mel.iter().any(|&m| m != 0.0) || first.aperture != 0.0 {
            return Err(Error::BadLexicon("silence must have zero energy and closed lips".into()));
        }
        for (i, s) in self.symbols.iter().enumerate() {
            if char_index(s.ch).is_none() {
                return Err(Error::BadLexicon(format!("symbol {:?} outside the token alphabet", s.ch)));
            }
            if self.symbols[..i].iter().any(|o| o.ch == s.ch) {
                return Err(Error::BadLexicon(format!("duplicate symbol {:?}", s.ch)));
            }
            if s.mel.len() != MEL_BINS || s.stroke.len() != self.face_dim {
                return Err(Error::BadLexicon(format!("symbol {:?} has wrong template widths", s.ch)));
            }
            if s.duration.0 == 0 || s.duration.0 > s.duration.1 {
                return Err(Error::BadLexicon(format!("symbol {:?} has duration range {:?}", s.ch, s.duration)));
            }
            if s.mel.iter().chain(&s.stroke).any(|v| !v.is_finite()) || s.mel.iter().any(|&v| v < 0.0) {
                return Err(Error::BadLexicon(format!("symbol {:?} has invalid template values", s.ch)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn index_of(&self, ch: char) -> Option<usize> {
        self.symbols.iter().position(|s| s.ch == ch)
    }

    /// Checksum of every value that shapes generated data.
    pub fn hash(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        h.update(&(self.face_dim as u32).to_le_bytes());
        for s in &self.symbols {
            h.update(&(s.ch as u32).to_le_bytes());
            for v in s.mel.iter().chain(&s.stroke).chain(std::iter::once(&s.aperture)) {
                h.update(&v.to_le_bytes());
            }
            h.update(&s.duration.0.to_le_bytes());
            h.update(&s.duration.1.to_le_bytes());
        }
        h.finalize()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_lexicon_is_valid_and_stable() {
        let a = SymbolLexicon::standard(16).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(a, SymbolLexicon::standard(16).unwrap());
        assert_eq!(a.hash(), SymbolLexicon::standard(16).unwrap().hash());
        assert_ne!(a.hash(), SymbolLexicon::standard(17).unwrap().hash());
    }

    #[test]
    fn broken_lexicons_are_rejected() {
        let mut lex = SymbolLexicon::standard(8).unwrap();
        lex.symbols[0].aperture = 0.1;
        assert!(matches!(lex.validate(), Err(Error::BadLexicon(_))));
        let mut lex = SymbolLexicon::standard(8).unwrap();
        lex.symbols[3].ch = '#';
        assert!(lex.validate().is_err());
        let mut lex = SymbolLexicon::standard(8).unwrap();
        lex.symbols.swap(0, 1);
        assert!(lex.validate().is_err());
        assert!(SymbolLexicon::standard(2).is_err());
    }
}
