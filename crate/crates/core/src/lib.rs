//! Joint audio and visual generation for talking avatars with flow matching.

pub mod avdit;
pub mod codecs;
pub mod error;
pub mod flowmatch;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod synthcorpus;
pub mod texttokens;

pub use error::{Error, Result};
