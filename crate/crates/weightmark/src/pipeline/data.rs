//! Training data: a deterministic synthetic corpus plus WAV ingestion.

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::attacks::filter::{design, sosfilt, Response};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct Dataset {
    pub sample_rate: u32,
    pub clips: Vec<Vec<f32>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

/// Seeded mixtures of band-limited harmonic tones and lowpassed noise,
/// loosely speech-shaped. Clip `i` depends only on `(seed, i)`.
pub fn synthetic_dataset(n_clips: usize, clip_len: usize, sample_rate: u32, seed: u64) -> Dataset {
    let clips = (0..n_clips)
        .map(|i| synthetic_clip(clip_len, sample_rate, seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)))
        .collect();
    Dataset { sample_rate, clips }
}

fn synthetic_clip(clip_len: usize, sample_rate: u32, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let sr = sample_rate as f32;
    let nyquist = sr / 2.0;

    let f0: f32 = rng.random_range(80.0..400.0);
    let n_harmonics = rng.random_range(3..=8usize);
    // Slow amplitude envelope so clips are not stationary.
    let env_rate: f32 = rng.random_range(0.5..4.0);
    let env_phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);

    let mut wave = vec![0.0f32; clip_len];
    for h in 1..=n_harmonics {
        let freq = f0 * h as f32;
        if freq >= nyquist * 0.9 {
            break;
        }
        let amp = 1.0 / h as f32;
        let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        for (t, v) in wave.iter_mut().enumerate() {
            let arg = std::f32::consts::TAU * freq * t as f32 / sr + phase;
            *v += amp * arg.sin();
        }
    }
    for (t, v) in wave.iter_mut().enumerate() {
        let env = 0.6 + 0.4 * (std::f32::consts::TAU * env_rate * t as f32 / sr + env_phase).sin();
        *v *= env;
    }

    // Filtered noise bed.
    let cutoff: f64 = rng.random_range(800.0..(nyquist as f64 * 0.8));
    let noise_amp: f32 = rng.random_range(0.02..0.15);
    let dist = Normal::new(0.0f32, 1.0).unwrap();
    let noise: Vec<f32> = (0..clip_len).map(|_| dist.sample(&mut rng)).collect();
    let shaped = sosfilt(&design(Response::Lowpass, cutoff, sr as f64), &noise);
    for (v, n) in wave.iter_mut().zip(&shaped) {
        *v += noise_amp * n;
    }

    let peak = wave.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    if peak > 0.0 {
        let scale = 0.8 / peak;
        for v in wave.iter_mut() {
            *v *= scale;
        }
    }
    wave
}

/// Read WAV files into clips of exactly `segment_length` samples.
///
/// Longer clips are randomly cropped (offset drawn from the seeded stream in
/// path order), shorter ones reflect-padded. Peaks above full scale are
/// normalized back into `[-1, 1]`. All unreadable files are reported
/// together rather than failing on the first.
pub fn ingest_audio(paths: &[std::path::PathBuf], segment_length: usize, seed: u64) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::Ingestion("no input files given".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut clips = Vec::with_capacity(paths.len());
    let mut sample_rate = None;
    let mut failures = Vec::new();
    for path in paths {
        match ingest_one(path, segment_length, &mut rng, &mut sample_rate) {
            Ok(clip) => clips.push(clip),
            Err(e) => failures.push(format!("{}: {e}", path.display())),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Ingestion(format!(
            "{} of {} files unusable: {}",
            failures.len(),
            paths.len(),
            failures.join("; ")
        )));
    }
    Ok(Dataset { sample_rate: sample_rate.unwrap(), clips })
}

fn ingest_one(
    path: &Path,
    segment_length: usize,
    rng: &mut ChaCha20Rng,
    sample_rate: &mut Option<u32>,
) -> Result<Vec<f32>> {
    let data = crate::wav::read_wav(path)?;
    match sample_rate {
        Some(sr) if *sr != data.sample_rate => {
            return Err(Error::Ingestion(format!(
                "sample rate {} differs from the run's {}",
                data.sample_rate, sr
            )))
        }
        Some(_) => {}
        None => *sample_rate = Some(data.sample_rate),
    }
    let mut samples = data.samples;
    let peak = samples.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    if peak > 1.0 {
        for v in samples.iter_mut() {
            *v /= peak;
        }
    }
    Ok(fit_segment(&samples, segment_length, rng))
}

/// Crop or reflect-pad to exactly `segment_length`.
pub fn fit_segment(samples: &[f32], segment_length: usize, rng: &mut impl Rng) -> Vec<f32> {
    if samples.len() >= segment_length {
        let max_offset = samples.len() - segment_length;
        let offset = if max_offset == 0 { 0 } else { rng.random_range(0..=max_offset) };
        return samples[offset..offset + segment_length].to_vec();
    }
    let mut out = samples.to_vec();
    // Reflect without repeating the edge sample; degenerate one-sample clips
    // can only repeat.
    while out.len() < segment_length {
        let n = out.len();
        if n == 1 {
            out.push(out[0]);
            continue;
        }
        let take = (segment_length - out.len()).min(n - 1);
        for i in 0..take {
            out.push(out[n - 2 - i]);
        }
    }
    out
}

/// Draw a `(batch, 1, segment_length)` batch of random crops.
pub fn sample_batch(
    dataset: &Dataset,
    batch_size: usize,
    segment_length: usize,
    rng: &mut impl Rng,
) -> Result<Array3<f32>> {
    if dataset.is_empty() {
        return Err(Error::Ingestion("dataset holds no clips".into()));
    }
    let mut batch = Array3::<f32>::zeros((batch_size, 1, segment_length));
    for b in 0..batch_size {
        let clip = &dataset.clips[rng.random_range(0..dataset.clips.len())];
        let segment = fit_segment(clip, segment_length, rng);
        for (t, &v) in segment.iter().enumerate() {
            batch[[b, 0, t]] = v;
        }
    }
    Ok(batch)
}
