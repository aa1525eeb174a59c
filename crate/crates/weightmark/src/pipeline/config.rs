//! Run configuration: one TOML file fully determines a training run.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::models::{DiscriminatorConfig, MelConfig, ToyCodecConfig, ToyVocoderConfig};
use crate::objectives::LossWeights;
use crate::watermark::WatermarkDecoderConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Vocoder,
    Codec,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Vocoder => write!(f, "vocoder"),
            Mode::Codec => write!(f, "codec"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub mode: Mode,
    /// Payload length in bits.
    pub payload_len: usize,
    /// Adapter rank.
    pub rank: usize,
    pub batch_size: usize,
    pub segment_length: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub lr_watermark: f64,
    pub max_iterations: u64,
    pub seed: u64,
    pub wgopo_enabled: bool,
    pub weights: LossWeights,
    pub mel: MelConfig,
    pub vocoder: ToyVocoderConfig,
    /// Present iff `mode` is `codec`.
    pub codec: Option<ToyCodecConfig>,
    pub disc: DiscriminatorConfig,
    pub wm_decoder: WatermarkDecoderConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Vocoder,
            payload_len: 16,
            rank: 16,
            batch_size: 16,
            segment_length: 8192,
            lr_generator: 2e-4,
            lr_discriminator: 2e-4,
            lr_watermark: 2e-4,
            max_iterations: 1000,
            seed: 0,
            wgopo_enabled: true,
            weights: LossWeights::default(),
            mel: MelConfig::default(),
            vocoder: ToyVocoderConfig::default(),
            codec: None,
            disc: DiscriminatorConfig::default(),
            wm_decoder: WatermarkDecoderConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("payload_len", self.payload_len),
            ("rank", self.rank),
            ("batch_size", self.batch_size),
            ("segment_length", self.segment_length),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        // The payload embedding table has orthogonal rows in rank space, so
        // it cannot hold more bits than the adapter rank.
        if self.payload_len > self.rank {
            return Err(Error::Config(format!(
                "payload_len {} exceeds rank {}; each bit needs its own embedding direction",
                self.payload_len, self.rank
            )));
        }
        for (name, lr) in [
            ("lr_generator", self.lr_generator),
            ("lr_discriminator", self.lr_discriminator),
            ("lr_watermark", self.lr_watermark),
        ] {
            if !lr.is_finite() || lr <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive and finite")));
            }
        }
        self.weights.validate()?;
        self.vocoder.validate()?;
        self.disc.validate()?;
        match (self.mode, &self.codec) {
            (Mode::Codec, None) => {
                return Err(Error::Config("codec mode needs a [codec] section".into()))
            }
            (Mode::Vocoder, Some(_)) => {
                return Err(Error::Config("vocoder mode must not carry a [codec] section".into()))
            }
            (Mode::Codec, Some(codec)) => {
                codec.validate()?;
                if self.segment_length % codec.frame_stride() != 0 {
                    return Err(Error::Config(format!(
                        "segment_length {} is not a multiple of the codec frame stride {}",
                        self.segment_length,
                        codec.frame_stride()
                    )));
                }
            }
            (Mode::Vocoder, None) => {}
        }

        // The generator, analysis front end, and extractor must agree on the
        // spectrogram geometry before any tensor flows between them.
        if self.mode == Mode::Vocoder {
            if self.vocoder.n_mels != self.mel.n_mels {
                return Err(Error::Config(format!(
                    "vocoder consumes {} mel bins but the front end produces {}",
                    self.vocoder.n_mels, self.mel.n_mels
                )));
            }
            if self.vocoder.upsample_product() != self.mel.hop {
                return Err(Error::Config(format!(
                    "vocoder upsamples by {} but the mel hop is {}; frames would not align",
                    self.vocoder.upsample_product(),
                    self.mel.hop
                )));
            }
        }
        if self.wm_decoder.n_mels != self.mel.n_mels {
            return Err(Error::Config(format!(
                "extractor reads {} mel bins but the front end produces {}",
                self.wm_decoder.n_mels, self.mel.n_mels
            )));
        }
        if self.wm_decoder.payload_len != self.payload_len {
            return Err(Error::Config(format!(
                "extractor emits {} bits but payload_len is {}",
                self.wm_decoder.payload_len, self.payload_len
            )));
        }
        if self.segment_length % self.mel.hop != 0 {
            return Err(Error::Config(format!(
                "segment_length {} is not a multiple of the mel hop {}",
                self.segment_length, self.mel.hop
            )));
        }
        if self.segment_length < self.mel.n_fft {
            return Err(Error::Config(format!(
                "segment_length {} is shorter than one analysis window of {}",
                self.segment_length, self.mel.n_fft
            )));
        }
        Ok(())
    }

    /// Generator structure for the active mode.
    pub fn decoder_config(&self) -> ToyVocoderConfig {
        match (&self.mode, &self.codec) {
            (Mode::Codec, Some(c)) => c.decoder_config(),
            _ => self.vocoder.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of the canonical serialization, so formatting and comment noise
    /// in the source file never change identity.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_toml().as_bytes());
        hex(&h.finalize())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parse and validate a config from TOML text.
pub fn parse_config(text: &str) -> Result<TrainingConfig> {
    let cfg: TrainingConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &std::path::Path) -> Result<TrainingConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn save_config(path: &std::path::Path, cfg: &TrainingConfig) -> Result<()> {
    std::fs::write(path, cfg.to_toml())?;
    Ok(())
}
