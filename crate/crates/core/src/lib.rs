//! Reflective decoding network for image captioning.
//!
//! A two-layer LSTM decoder with visual attention over region features,
//! reflective attention over its own past hidden states, and a supervised
//! relative-position head, together with the autodiff engine it trains on,
//! a synthetic long-dependency captioning corpus, beam search, and caption
//! metrics (BLEU, ROUGE-L, CIDEr-D).

pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod reference;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
