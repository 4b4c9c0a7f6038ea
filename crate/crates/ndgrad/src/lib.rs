//! Minimal dense-tensor library with reverse-mode automatic differentiation.
//!
//! Values are stored as `f32`; matrix products and reductions accumulate in
//! `f64`. A [`Tape`] is built fresh for every forward pass and consumed by
//! [`Tape::backward`], which returns a [`Gradients`] map keyed by the
//! [`ParamId`]s of the [`ParamStore`] the parameters came from.
//!
//! ```
//! use ndgrad::{ParamStore, Tape, Tensor};
//!
//! let mut params = ParamStore::new();
//! let w = params.insert("w", Tensor::ones(&[3])).unwrap();
//! let mut tape = Tape::new();
//! let wv = tape.param(&params, w);
//! let loss = tape.sum(wv).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);
//! ```

pub mod checkpoint;
mod error;
pub mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{GradError, Result};
pub use optim::{AdamState, AdamW};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{Band, Tape, Var, MASKED_SCORE};
pub use tensor::Tensor;
