//! Minimal RIFF/WAVE reader and writer.
//!
//! Accepts mono 16-bit PCM and 32-bit IEEE float files; writes canonical
//! 16-bit PCM. The parser walks the chunk list with explicit bounds checks
//! and never panics on malformed bytes, whatever their origin.

use std::path::Path;

use crate::{Error, Result};

/// Decoded mono audio, samples in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct WavData {
    pub sample_rate: u32,
    pub samples: Vec<f32>,
}

fn ingest(msg: impl Into<String>) -> Error {
    Error::Ingestion(msg.into())
}

fn u16_at(bytes: &[u8], at: usize) -> Result<u16> {
    bytes
        .get(at..at + 2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .ok_or_else(|| ingest(format!("truncated file at offset {at}")))
}

fn u32_at(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| ingest(format!("truncated file at offset {at}")))
}

struct FmtChunk {
    audio_format: u16,
    channels: u16,
    sample_rate: u32,
    bits_per_sample: u16,
}

/// Parse a complete WAV file from memory.
pub fn parse_wav(bytes: &[u8]) -> Result<WavData> {
    if bytes.len() < 12 {
        return Err(ingest("file too short for a RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(ingest("missing RIFF magic"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(ingest("missing WAVE form type"));
    }

    let mut fmt: Option<FmtChunk> = None;
    let mut data: Option<&[u8]> = None;
    let mut at = 12usize;
    while at + 8 <= bytes.len() {
        let id = &bytes[at..at + 4];
        let size = u32_at(bytes, at + 4)? as usize;
        let body_start = at + 8;
        let body_end = body_start
            .checked_add(size)
            .ok_or_else(|| ingest("chunk size overflows"))?;
        if body_end > bytes.len() {
            return Err(ingest(format!(
                "chunk {:?} declares {size} bytes but only {} remain",
                String::from_utf8_lossy(id),
                bytes.len() - body_start
            )));
        }
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(ingest("fmt chunk shorter than 16 bytes"));
                }
                fmt = Some(FmtChunk {
                    audio_format: u16_at(body, 0)?,
                    channels: u16_at(body, 2)?,
                    sample_rate: u32_at(body, 4)?,
                    bits_per_sample: u16_at(body, 14)?,
                });
            }
            b"data" => {
                data = Some(body);
                // Trailing chunks after data carry nothing we need.
            }
            _ => {}
        }
        // Chunk bodies are word-aligned; odd sizes are followed by a pad byte.
        at = body_end + (size & 1);
    }

    let fmt = fmt.ok_or_else(|| ingest("no fmt chunk"))?;
    let data = data.ok_or_else(|| ingest("no data chunk"))?;
    if fmt.channels != 1 {
        return Err(ingest(format!(
            "expected mono audio, file has {} channels",
            fmt.channels
        )));
    }
    if fmt.sample_rate == 0 {
        return Err(ingest("sample rate is zero"));
    }

    let samples = match (fmt.audio_format, fmt.bits_per_sample) {
        (1, 16) => {
            if data.len() % 2 != 0 {
                return Err(ingest("16-bit data chunk has an odd byte count"));
            }
            data.chunks_exact(2)
                .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0)
                .collect::<Vec<f32>>()
        }
        (3, 32) => {
            if data.len() % 4 != 0 {
                return Err(ingest("32-bit float data chunk is not a multiple of 4 bytes"));
            }
            let samples: Vec<f32> = data
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if let Some(bad) = samples.iter().find(|v| !v.is_finite()) {
                return Err(ingest(format!("non-finite sample value {bad}")));
            }
            samples
        }
        (f, b) => {
            return Err(ingest(format!(
                "unsupported encoding: format {f} at {b} bits (need PCM16 or float32)"
            )))
        }
    };
    if samples.is_empty() {
        return Err(ingest("data chunk holds no samples"));
    }
    Ok(WavData { sample_rate: fmt.sample_rate, samples })
}

/// Encode as canonical mono 16-bit PCM.
pub fn encode_wav(wav: &WavData) -> Vec<u8> {
    let n = wav.samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&wav.sample_rate.to_le_bytes());
    out.extend_from_slice(&(wav.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &wav.samples {
        let q = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<WavData> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)
        .map_err(|e| ingest(format!("cannot read {}: {e}", path.display())))?;
    parse_wav(&bytes).map_err(|e| match e {
        Error::Ingestion(msg) => ingest(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_wav(path: impl AsRef<Path>, wav: &WavData) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_wav(wav))
        .map_err(|e| ingest(format!("cannot write {}: {e}", path.display())))
}
