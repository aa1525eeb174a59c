//! Parameter-level audio watermarking for neural waveform decoders.
//!
//! The crate trains watermark-conditioned low-rank adapters inside a frozen
//! generator, merges them into standalone watermarked instances, and ships an
//! attack battery plus evaluation metrics for measuring how well the embedded
//! payload survives signal-level distortion.

pub mod adapter;
pub mod attacks;
pub mod error;
pub mod evaluation;
pub mod grad_project;
pub mod models;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod watermark;
pub mod wav;

pub use error::{Error, Result};
