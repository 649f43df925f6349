//! Bandwidth-limited federated language modeling on a bigram testbed.
//!
//! The crate simulates a hub-and-spoke swarm that trains a global bigram
//! model by exchanging dither-quantized probe logits, then serves it with a
//! federated conformal predictor whose calibration is itself quantized.

pub mod bounds;
pub mod error;
pub mod fcrag;
pub mod fpld;
pub mod harness;
pub mod ngram;
pub mod quant;
pub mod seed;
pub mod softmax;
pub mod transport;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/quantizer.md")]
    mod quantizer {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/conformal.md")]
    mod conformal {}
    #[doc = include_str!("../../../book/src/bounds.md")]
    mod bounds {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/json-schema.md")]
    mod json_schema {}
}
