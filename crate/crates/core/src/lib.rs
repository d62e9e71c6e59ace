//! Semantic image transmission over multi-hop AWGN relays.
//!
//! A DeepJSCC encoder/decoder pair is trained against pixel MSE plus a cosine alignment term
//! between deep hashes of the source and its reconstruction, computed by a frozen deep hash
//! distillation module. Decode-and-forward chains and quantize-and-forward pipelines are
//! evaluated across SNR, hop count and quantizer rate.

pub mod channel;
pub mod checkpoint;
pub mod data;
pub mod dhd;
pub mod error;
pub mod image;
pub mod jscc;
pub mod metrics;
pub mod optim;
pub mod perceptual;
pub mod relay;
pub mod seed;
pub mod training;
pub mod vq;

pub use error::{Error, Result};
