//! Procedural dyadic corpus with ground truth known by construction, and the
//! AVFC container used to store it.

pub mod generate;
pub mod io;
pub mod lexicon;
pub mod record;

pub use generate::{
    generate, make_participant_reaction_oracle, random_script, record_rng, synthesize, timeline, DyadScript,
    ExpectedReaction, GeneratorConfig, ReactionKind, Segment, CLOSURE_THRESHOLD, SMILE_AMPLITUDE, TOKEN_NOISE,
    TOKEN_PEAK,
};
pub use io::{load_corpus, read_corpus, write_corpus, Corpus, CorpusHeader, CorpusReader, CorpusWriter, MAGIC};
pub use lexicon::{Symbol, SymbolLexicon, FACE_APERTURE, FACE_FIXED_DIMS, FACE_SMILE, LEXICON_SEED};
pub use record::{Annotations, CorpusRecord, ReactionLink};
