//! Robustness attacks applied to generated audio before payload extraction.
//!
//! Every attack is a pure function of (wave, sample rate, spec); stochastic
//! kinds draw from a seeded generator. Compression attacks shell out to an
//! external encoder named by `WEIGHTMARK_AUDIO_CODEC` and degrade to a
//! skipped result when none is usable.

pub mod filter;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::{Error, Result};
use filter::{design, sosfilt, Response};

/// What to do to the audio. Parameter defaults follow the standard battery.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackKind {
    PinkNoise { std: f32 },
    WhiteNoise { std: f32 },
    Lowpass { cutoff_hz: f32 },
    Bandpass { low_hz: f32, high_hz: f32 },
    Highpass { cutoff_hz: f32 },
    Boost { factor: f32 },
    Duck { factor: f32 },
    Mp3 { bitrate_kbps: u32 },
    Aac { bitrate_kbps: u32 },
    Resample { via_hz: u32 },
    Echo { delay_s: f32, decay: f32 },
    Crop,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub seed: u64,
}

impl AttackKind {
    /// Table row label.
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::PinkNoise { .. } => "Pink",
            AttackKind::WhiteNoise { .. } => "White",
            AttackKind::Lowpass { .. } => "Lowpass",
            AttackKind::Bandpass { .. } => "Bandpass",
            AttackKind::Highpass { .. } => "Highpass",
            AttackKind::Boost { .. } => "Boost",
            AttackKind::Duck { .. } => "Duck",
            AttackKind::Mp3 { .. } => "MP3",
            AttackKind::Aac { .. } => "AAC",
            AttackKind::Resample { .. } => "Resample",
            AttackKind::Echo { .. } => "Echo",
            AttackKind::Crop => "Crop",
        }
    }

    /// Human-readable parameter summary for reports.
    pub fn params(&self) -> String {
        match self {
            AttackKind::PinkNoise { std } | AttackKind::WhiteNoise { std } => format!("std={std}"),
            AttackKind::Lowpass { cutoff_hz } => format!("cutoff={cutoff_hz} Hz"),
            AttackKind::Bandpass { low_hz, high_hz } => format!("band={low_hz}-{high_hz} Hz"),
            AttackKind::Highpass { cutoff_hz } => format!("cutoff={cutoff_hz} Hz"),
            AttackKind::Boost { factor } | AttackKind::Duck { factor } => {
                format!("factor={factor}")
            }
            AttackKind::Mp3 { bitrate_kbps } | AttackKind::Aac { bitrate_kbps } => {
                format!("{bitrate_kbps} kbps")
            }
            AttackKind::Resample { via_hz } => format!("via {via_hz} Hz"),
            AttackKind::Echo { delay_s, decay } => format!("delay={delay_s}s decay={decay}"),
            AttackKind::Crop => "first half".into(),
        }
    }

    fn validate(&self, sr: u32) -> Result<()> {
        let nyquist = sr as f32 / 2.0;
        let band_ok = |f: f32| f > 0.0 && f < nyquist;
        let ok = match self {
            AttackKind::PinkNoise { std } | AttackKind::WhiteNoise { std } => *std >= 0.0,
            AttackKind::Lowpass { cutoff_hz } | AttackKind::Highpass { cutoff_hz } => {
                band_ok(*cutoff_hz)
            }
            AttackKind::Bandpass { low_hz, high_hz } => {
                band_ok(*low_hz) && band_ok(*high_hz) && low_hz < high_hz
            }
            AttackKind::Boost { factor } | AttackKind::Duck { factor } => *factor > 0.0,
            AttackKind::Mp3 { bitrate_kbps } | AttackKind::Aac { bitrate_kbps } => {
                *bitrate_kbps > 0
            }
            AttackKind::Resample { via_hz } => *via_hz > 0,
            AttackKind::Echo { delay_s, decay } => *delay_s >= 0.0 && decay.is_finite(),
            AttackKind::Crop => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "invalid parameters for {} attack: {}",
                self.name(),
                self.params()
            )))
        }
    }
}

/// Attack result: compression rows can be skipped without failing the run.
#[derive(Clone, Debug, PartialEq)]
pub enum AttackOutcome {
    Applied(Vec<f32>),
    Skipped(String),
}

impl AttackOutcome {
    pub fn wave(&self) -> Option<&[f32]> {
        match self {
            AttackOutcome::Applied(w) => Some(w),
            AttackOutcome::Skipped(_) => None,
        }
    }
}

pub fn apply_attack(wave: &[f32], sr: u32, spec: &AttackSpec) -> Result<AttackOutcome> {
    if wave.is_empty() {
        return Err(Error::Domain("attack input wave is empty".into()));
    }
    if sr == 0 {
        return Err(Error::Domain("sample rate must be positive".into()));
    }
    spec.kind.validate(sr)?;

    let out = match &spec.kind {
        AttackKind::PinkNoise { std } => add_pink_noise(wave, sr, *std, spec.seed),
        AttackKind::WhiteNoise { std } => add_white_noise(wave, *std, spec.seed),
        AttackKind::Lowpass { cutoff_hz } => {
            sosfilt(&design(Response::Lowpass, *cutoff_hz as f64, sr as f64), wave)
        }
        AttackKind::Highpass { cutoff_hz } => {
            sosfilt(&design(Response::Highpass, *cutoff_hz as f64, sr as f64), wave)
        }
        AttackKind::Bandpass { low_hz, high_hz } => {
            let hp = sosfilt(&design(Response::Highpass, *low_hz as f64, sr as f64), wave);
            sosfilt(&design(Response::Lowpass, *high_hz as f64, sr as f64), &hp)
        }
        AttackKind::Boost { factor } | AttackKind::Duck { factor } => {
            wave.iter().map(|&v| v * factor).collect()
        }
        AttackKind::Mp3 { bitrate_kbps } => {
            return codec_round_trip(wave, sr, "mp3", *bitrate_kbps)
        }
        AttackKind::Aac { bitrate_kbps } => {
            return codec_round_trip(wave, sr, "aac", *bitrate_kbps)
        }
        AttackKind::Resample { via_hz } => {
            let up = resample(wave, sr, *via_hz);
            resample(&up, *via_hz, sr)
        }
        AttackKind::Echo { delay_s, decay } => {
            let delay = (delay_s * sr as f32).round() as usize;
            let mut out = wave.to_vec();
            for t in delay..out.len() {
                out[t] += decay * wave[t - delay];
            }
            out
        }
        AttackKind::Crop => wave[..wave.len().div_ceil(2)].to_vec(),
    };
    Ok(AttackOutcome::Applied(out))
}

fn add_white_noise(wave: &[f32], std: f32, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0f32, std).unwrap();
    wave.iter().map(|&v| v + dist.sample(&mut rng)).collect()
}

/// 1/f-shaped noise: spectrally weight seeded white noise by 1/sqrt(f), then
/// rescale to the requested standard deviation.
fn add_pink_noise(wave: &[f32], sr: u32, std: f32, seed: u64) -> Vec<f32> {
    let n = wave.len();
    if std == 0.0 || n < 2 {
        return wave.to_vec();
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0f64, 1.0).unwrap();
    let mut spectrum: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(dist.sample(&mut rng), 0.0))
        .collect();

    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut spectrum);
    spectrum[0] = Complex64::new(0.0, 0.0);
    for k in 1..n {
        // Hermitian bins share a frequency; both get the same weight.
        let bin = k.min(n - k);
        let f = bin as f64 * sr as f64 / n as f64;
        spectrum[k] *= 1.0 / f.sqrt();
    }
    planner.plan_fft_inverse(n).process(&mut spectrum);

    let noise: Vec<f64> = spectrum.iter().map(|c| c.re / n as f64).collect();
    let mean = noise.iter().sum::<f64>() / n as f64;
    let var = noise.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let scale = std as f64 / var.sqrt().max(1e-30);
    wave.iter()
        .zip(&noise)
        .map(|(&v, &nz)| v + ((nz - mean) * scale) as f32)
        .collect()
}

/// Windowed-sinc resampling at arbitrary rate ratios, DC-normalized.
fn resample(wave: &[f32], sr_in: u32, sr_out: u32) -> Vec<f32> {
    if sr_in == sr_out {
        return wave.to_vec();
    }
    let n = wave.len();
    let ratio = sr_out as f64 / sr_in as f64;
    let out_len = ((n as f64 * ratio).round() as usize).max(1);
    // Shrink the kernel bandwidth when decimating so aliases stay below the
    // new Nyquist.
    let cut = ratio.min(1.0);
    let half_width = 24.0f64;
    let reach = (half_width / cut).ceil() as isize;

    let mut out = Vec::with_capacity(out_len);
    for m in 0..out_len {
        let t = m as f64 / ratio;
        let center = t.floor() as isize;
        let mut acc = 0.0f64;
        let mut wsum = 0.0f64;
        for k in (center - reach)..=(center + reach) {
            if k < 0 || k >= n as isize {
                continue;
            }
            let u = (k as f64 - t) * cut;
            if u.abs() > half_width {
                continue;
            }
            let sinc = if u.abs() < 1e-12 {
                1.0
            } else {
                let pu = std::f64::consts::PI * u;
                pu.sin() / pu
            };
            let window = 0.5 * (1.0 + (std::f64::consts::PI * u / half_width).cos());
            let w = sinc * window;
            acc += w * wave[k as usize] as f64;
            wsum += w;
        }
        out.push(if wsum.abs() > 1e-12 { (acc / wsum * cut) as f32 } else { 0.0 });
    }
    // DC normalization above divides by the kernel sum; undo the extra `cut`
    // factor it introduced so amplitudes pass through unchanged.
    if (cut - 1.0).abs() > 1e-12 {
        for v in out.iter_mut() {
            *v /= cut as f32;
        }
    }
    out
}

/// Self-cleaning scratch directory under the system temp root.
struct ScratchDir {
    path: std::path::PathBuf,
}

impl ScratchDir {
    fn create() -> std::io::Result<Self> {
        use std::sync::atomic::{AtomicU64, Ordering};
        static COUNTER: AtomicU64 = AtomicU64::new(0);
        let tag = format!(
            "weightmark-{}-{}",
            std::process::id(),
            COUNTER.fetch_add(1, Ordering::Relaxed)
        );
        let path = std::env::temp_dir().join(tag);
        std::fs::create_dir_all(&path)?;
        Ok(Self { path })
    }
}

impl Drop for ScratchDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.path);
    }
}

/// Round-trip through an external encoder named by `WEIGHTMARK_AUDIO_CODEC`.
///
/// The command is expected to speak the ffmpeg CLI dialect. Output is padded
/// or trimmed back to the input length so downstream alignment holds.
fn codec_round_trip(wave: &[f32], sr: u32, codec: &str, bitrate_kbps: u32) -> Result<AttackOutcome> {
    let Ok(cmd) = std::env::var("WEIGHTMARK_AUDIO_CODEC") else {
        return Ok(AttackOutcome::Skipped(format!(
            "{codec}: WEIGHTMARK_AUDIO_CODEC not set"
        )));
    };
    let dir = match ScratchDir::create() {
        Ok(d) => d,
        Err(e) => return Ok(AttackOutcome::Skipped(format!("{codec}: tempdir failed: {e}"))),
    };
    let input = dir.path.join("in.wav");
    let compressed = dir.path.join(format!("out.{codec}"));
    let decoded = dir.path.join("back.wav");
    let data = crate::wav::WavData { sample_rate: sr, samples: wave.to_vec() };
    if let Err(e) = crate::wav::write_wav(&input, &data) {
        return Ok(AttackOutcome::Skipped(format!("{codec}: {e}")));
    }

    let encoder_name = match codec {
        "mp3" => "libmp3lame",
        other => other,
    };
    let encode = std::process::Command::new(&cmd)
        .args(["-y", "-hide_banner", "-loglevel", "error", "-i"])
        .arg(&input)
        .args(["-c:a", encoder_name, "-b:a", &format!("{bitrate_kbps}k")])
        .arg(&compressed)
        .status();
    match encode {
        Ok(s) if s.success() => {}
        Ok(s) => return Ok(AttackOutcome::Skipped(format!("{codec}: encoder exited {s}"))),
        Err(e) => return Ok(AttackOutcome::Skipped(format!("{codec}: cannot run {cmd}: {e}"))),
    }
    let decode = std::process::Command::new(&cmd)
        .args(["-y", "-hide_banner", "-loglevel", "error", "-i"])
        .arg(&compressed)
        .args(["-ar", &sr.to_string(), "-ac", "1"])
        .arg(&decoded)
        .status();
    match decode {
        Ok(s) if s.success() => {}
        Ok(s) => return Ok(AttackOutcome::Skipped(format!("{codec}: decoder exited {s}"))),
        Err(e) => return Ok(AttackOutcome::Skipped(format!("{codec}: cannot run {cmd}: {e}"))),
    }
    let mut back = match crate::wav::read_wav(&decoded) {
        Ok(d) => d.samples,
        Err(e) => return Ok(AttackOutcome::Skipped(format!("{codec}: decode read failed: {e}"))),
    };
    back.resize(wave.len(), 0.0);
    Ok(AttackOutcome::Applied(back))
}

/// One row of the standard battery.
#[derive(Clone, Debug)]
pub struct BatteryRow {
    pub name: &'static str,
    pub params: String,
    pub outcome: AttackOutcome,
}

/// The attack kinds of the standard battery, with their stated parameters.
pub fn standard_kinds() -> Vec<AttackKind> {
    vec![
        AttackKind::PinkNoise { std: 0.1 },
        AttackKind::WhiteNoise { std: 0.05 },
        AttackKind::Lowpass { cutoff_hz: 500.0 },
        AttackKind::Bandpass { low_hz: 500.0, high_hz: 1_500.0 },
        AttackKind::Highpass { cutoff_hz: 1_500.0 },
        AttackKind::Boost { factor: 10.0 },
        AttackKind::Duck { factor: 0.1 },
        AttackKind::Mp3 { bitrate_kbps: 128 },
        AttackKind::Aac { bitrate_kbps: 128 },
        AttackKind::Resample { via_hz: 44_100 },
        AttackKind::Echo { delay_s: 0.5, decay: 0.5 },
        AttackKind::Crop,
    ]
}

/// Apply every standard attack independently to the clean input, identity
/// row first. Compression rows come back marked skipped when no external
/// encoder is available.
pub fn attack_battery(wave: &[f32], sr: u32, seed: u64) -> Result<Vec<BatteryRow>> {
    let mut rows = vec![BatteryRow {
        name: "None",
        params: String::new(),
        outcome: AttackOutcome::Applied(wave.to_vec()),
    }];
    for (i, kind) in standard_kinds().into_iter().enumerate() {
        let spec = AttackSpec { kind, seed: seed.wrapping_add(i as u64) };
        let outcome = apply_attack(wave, sr, &spec)?;
        rows.push(BatteryRow {
            name: spec.kind.name(),
            params: spec.kind.params(),
            outcome,
        });
    }
    Ok(rows)
}
