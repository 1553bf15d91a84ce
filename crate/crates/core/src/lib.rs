//! Building blocks of a codec-input audio captioning pipeline.
//!
//! Frames are quantized into parallel code sequences ([`rvq`]), combined with
//! a clip-level embedding and fed to a small encoder-decoder trained with a
//! masked-code auxiliary loss ([`model`]). Captions are produced by beam
//! search or nucleus sampling ([`decoding`]), reranked ([`rerank`]) and
//! scored with the usual captioning metrics ([`metrics`]). [`synthworld`]
//! supplies a synthetic acoustic-scene world to run all of it on.

pub mod dataio;
pub mod decoding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rerank;
pub mod rvq;
pub mod synthworld;

pub use error::{Error, Result};
