//! Audio models: mel analysis, toy generators, and discriminators.

pub mod codec;
pub mod disc;
pub mod mel;
pub mod vocoder;

pub use codec::{ToyCodec, ToyCodecConfig};
pub use disc::{DiscriminatorConfig, DiscriminatorSet};
pub use mel::{MelAnalyzer, MelConfig};
pub use vocoder::{ToyVocoder, ToyVocoderConfig};
