//! Quality metrics, extraction scoring, and the standardized robustness report.
//!
//! Quality is always measured against the pretrained generator's output for
//! the same input, never against the raw source. The pretrained model has its
//! own reconstruction error, and charging that to the watermark would make
//! every instance look worse than it is; the question the metrics answer is
//! what the payload cost on top of the model it was merged into.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use sha2::{Digest, Sha256};

use crate::attacks::{attack_battery, AttackOutcome};
use crate::models::MelAnalyzer;
use crate::pipeline::config::hex;
use crate::pipeline::{Dataset, FinetuneSystem, InstanceSystem};
use crate::watermark::{bit_accuracy, Watermark};
use crate::{Error, Result};

/// FFT sizes of the multi-resolution spectral distance; hop is a quarter of
/// the window at every resolution.
pub const STFT_RESOLUTIONS: [usize; 3] = [512, 1_024, 2_048];

/// Magnitudes below this are clamped before the log term so silence does not
/// blow up the distance.
const MAG_FLOOR: f64 = 1e-5;

/// How many hex digits of each identity hash end up in report filenames.
const NAME_HASH_LEN: usize = 12;

/// Mean absolute difference between the log-mel spectrograms of two equal
/// length waveforms, computed through the analyzer's f64 path so the metric
/// itself adds no rounding noise.
pub fn mel_distance(mel: &MelAnalyzer, a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::FeatureShape(format!(
            "mel distance needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let row = |x: &[f32]| Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape");
    let la = mel.log_mel_f64(&row(a))?;
    let lb = mel.log_mel_f64(&row(b))?;
    let total: f64 = la.iter().zip(lb.iter()).map(|(x, y)| (x - y).abs()).sum();
    Ok(total / la.len() as f64)
}

/// Multi-resolution STFT distance: spectral convergence plus log-magnitude L1
/// at each resolution in [`STFT_RESOLUTIONS`], averaged over resolutions.
/// The first argument is the reference that normalizes the convergence term.
pub fn stft_distance(reference: &[f32], other: &[f32]) -> Result<f64> {
    if reference.len() != other.len() {
        return Err(Error::FeatureShape(format!(
            "stft distance needs equal lengths, got {} and {}",
            reference.len(),
            other.len()
        )));
    }
    let largest = *STFT_RESOLUTIONS.iter().max().expect("non-empty resolutions");
    if reference.len() < largest {
        return Err(Error::Config(format!(
            "audio length {} is shorter than the largest analysis window {largest}",
            reference.len()
        )));
    }
    let mut total = 0.0;
    for &n_fft in &STFT_RESOLUTIONS {
        let ma = stft_mag(reference, n_fft);
        let mb = stft_mag(other, n_fft);
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        let mut log_l1 = 0.0f64;
        for (x, y) in ma.iter().zip(mb.iter()) {
            num += (x - y) * (x - y);
            den += x * x;
            log_l1 += (x.max(MAG_FLOOR).ln() - y.max(MAG_FLOOR).ln()).abs();
        }
        let sc = num.sqrt() / den.sqrt().max(1e-12);
        total += sc + log_l1 / ma.len() as f64;
    }
    Ok(total / STFT_RESOLUTIONS.len() as f64)
}

/// Hann-windowed magnitude spectrogram `(n_fft/2 + 1, frames)` with hop
/// `n_fft / 4` and no padding. Callers guarantee `x.len() >= n_fft`.
fn stft_mag(x: &[f32], n_fft: usize) -> Array2<f64> {
    let hop = n_fft / 4;
    let frames = 1 + (x.len() - n_fft) / hop;
    let n_freq = n_fft / 2 + 1;
    let window: Vec<f64> = (0..n_fft)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n_fft as f64).cos())
        .collect();
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let mut mag = Array2::<f64>::zeros((n_freq, frames));
    let mut buf = vec![Complex64::default(); n_fft];
    for t in 0..frames {
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex64::new(x[t * hop + i] as f64 * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, slot) in buf.iter().take(n_freq).enumerate() {
            mag[[k, t]] = slot.norm();
        }
    }
    mag
}

/// One attack's aggregate over the evaluation clips. `acc` is NaN when the
/// attack was skipped on every clip (codec hook not configured).
#[derive(Debug, Clone)]
pub struct AttackRow {
    pub name: &'static str,
    pub params: String,
    pub acc: f64,
    pub skipped: bool,
    /// Skip reason, present only when `skipped`.
    pub note: Option<String>,
}

/// Everything `evaluate_instance` measures. `pesq` and `stoi` are reserved
/// for external perceptual scorers and stay `None`; the report writers emit
/// them as empty fields so downstream tooling keeps a stable schema.
#[derive(Debug)]
pub struct EvalReport {
    pub watermark: Watermark,
    pub clips: usize,
    /// Bit accuracy on unattacked audio; identical to the "None" row.
    pub clean_acc: f64,
    pub mel_distance: f64,
    pub stft_distance: f64,
    pub pesq: Option<f64>,
    pub stoi: Option<f64>,
    pub rows: Vec<AttackRow>,
}

impl EvalReport {
    pub fn row(&self, name: &str) -> Option<&AttackRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Run the full robustness protocol for one minted instance.
///
/// Every clip is regenerated twice: through the instance (payload in the
/// weights) and through `reference` with conditioning disabled (the frozen
/// pretrained model). Quality compares those two outputs; extraction runs the
/// reference system's decoder on the instance output, clean and after each
/// battery attack. Accuracies are means over clips.
pub fn evaluate_instance(
    inst: &InstanceSystem,
    reference: &FinetuneSystem,
    dataset: &Dataset,
    seed: u64,
) -> Result<EvalReport> {
    if dataset.clips.is_empty() {
        return Err(Error::Ingestion("evaluation needs at least one clip".into()));
    }
    if dataset.sample_rate != inst.cfg.mel.sample_rate {
        return Err(Error::Config(format!(
            "dataset sample rate {} does not match the instance's {}",
            dataset.sample_rate, inst.cfg.mel.sample_rate
        )));
    }
    if inst.cfg.mode != reference.cfg.mode
        || inst.cfg.mel != reference.cfg.mel
        || inst.cfg.payload_len != reference.cfg.payload_len
    {
        return Err(Error::Checkpoint(
            "instance and reference checkpoints come from different configurations".into(),
        ));
    }

    let sr = dataset.sample_rate;
    let mut mel_sum = 0.0;
    let mut stft_sum = 0.0;
    let mut rows: Vec<(AttackRow, usize)> = Vec::new();
    for (i, clip) in dataset.clips.iter().enumerate() {
        let wave = lift(clip);
        let marked3 = inst.synthesize(&wave)?;
        let base3 = reference.synthesize(&wave, None)?;
        let marked: Vec<f32> = marked3.iter().copied().collect();
        let base: Vec<f32> = base3.iter().copied().collect();
        mel_sum += mel_distance(&reference.mel, &marked, &base)?;
        stft_sum += stft_distance(&base, &marked)?;

        // Disjoint per-clip seed ranges; the battery itself offsets per kind.
        let battery = attack_battery(&marked, sr, seed.wrapping_add((i as u64) << 32))?;
        if rows.is_empty() {
            rows = battery
                .iter()
                .map(|r| {
                    let row = AttackRow {
                        name: r.name,
                        params: r.params.clone(),
                        acc: 0.0,
                        skipped: false,
                        note: None,
                    };
                    (row, 0)
                })
                .collect();
        }
        for (slot, got) in rows.iter_mut().zip(battery) {
            match got.outcome {
                AttackOutcome::Applied(attacked) => {
                    slot.0.acc += extraction_accuracy(reference, &attacked, &inst.watermark)?;
                    slot.1 += 1;
                }
                AttackOutcome::Skipped(reason) => {
                    slot.0.skipped = true;
                    slot.0.note.get_or_insert(reason);
                }
            }
        }
    }

    let n = dataset.clips.len() as f64;
    let rows: Vec<AttackRow> = rows
        .into_iter()
        .map(|(mut row, hits)| {
            row.acc = if hits == 0 { f64::NAN } else { row.acc / hits as f64 };
            row
        })
        .collect();
    let clean_acc = rows[0].acc;
    Ok(EvalReport {
        watermark: inst.watermark.clone(),
        clips: dataset.clips.len(),
        clean_acc,
        mel_distance: mel_sum / n,
        stft_distance: stft_sum / n,
        pesq: None,
        stoi: None,
        rows,
    })
}

/// Decode one mono clip with the reference system and score it against the
/// expected payload.
pub fn extraction_accuracy(
    reference: &FinetuneSystem,
    wave: &[f32],
    expected: &Watermark,
) -> Result<f64> {
    let (_, decoded) = reference.extract(&lift(wave))?;
    bit_accuracy(&decoded[0], expected)
}

fn lift(x: &[f32]) -> Array3<f32> {
    Array3::from_shape_vec((1, 1, x.len()), x.to_vec()).expect("mono clip shape")
}

/// Hex SHA-256 of the payload's bitstring form, the instance's identity in
/// report filenames.
pub fn watermark_hash(w: &Watermark) -> String {
    let mut h = Sha256::new();
    h.update(w.to_string().as_bytes());
    hex(&h.finalize())
}

fn short(s: &str) -> &str {
    &s[..s.len().min(NAME_HASH_LEN)]
}

/// Stem shared by the CSV and text reports, tying the files to one instance
/// and one configuration.
pub fn report_stem(w: &Watermark, config_hash: &str) -> String {
    let wm = watermark_hash(w);
    format!("robustness-{}-{}", short(&wm), short(config_hash))
}

pub fn report_basename(report: &EvalReport, config_hash: &str) -> String {
    report_stem(&report.watermark, config_hash)
}

/// Write `<stem>.csv` (one header line plus one line per attack) and
/// `<stem>.txt` (human-readable summary) into `dir`; returns both paths.
pub fn write_robustness_report(
    dir: &Path,
    report: &EvalReport,
    config_hash: &str,
) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let stem = report_basename(report, config_hash);
    let csv_path = dir.join(format!("{stem}.csv"));
    let txt_path = dir.join(format!("{stem}.txt"));

    let mut csv = String::from("attack,params,acc,skipped\n");
    for row in &report.rows {
        let acc = if row.skipped { String::new() } else { format!("{:.6}", row.acc) };
        csv.push_str(&format!("{},{},{},{}\n", row.name, row.params, acc, row.skipped));
    }
    fs::write(&csv_path, csv)?;

    let fmt_opt = |v: Option<f64>| v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"));
    let mut txt = String::new();
    txt.push_str(&format!("watermark: {}\n", report.watermark));
    txt.push_str(&format!("watermark hash: {}\n", short(&watermark_hash(&report.watermark))));
    txt.push_str(&format!("config hash: {}\n", short(config_hash)));
    txt.push_str(&format!("clips: {}\n", report.clips));
    txt.push_str(&format!("clean bit accuracy: {:.6}\n", report.clean_acc));
    txt.push_str(&format!("mel distance vs pretrained: {:.6e}\n", report.mel_distance));
    txt.push_str(&format!("stft distance vs pretrained: {:.6e}\n", report.stft_distance));
    txt.push_str(&format!("pesq: {}\n", fmt_opt(report.pesq)));
    txt.push_str(&format!("stoi: {}\n", fmt_opt(report.stoi)));
    txt.push_str("\nattack            params                    acc\n");
    for row in &report.rows {
        let acc = match (&row.note, row.skipped) {
            (Some(reason), true) => format!("skipped ({reason})"),
            _ => format!("{:.6}", row.acc),
        };
        txt.push_str(&format!("{:<18}{:<26}{}\n", row.name, row.params, acc));
    }
    fs::write(&txt_path, txt)?;
    Ok((csv_path, txt_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::MelConfig;
    use crate::pipeline::{finetune, load_finetuned, load_instance, mint, pretrain, synthetic_dataset, TrainingConfig};
    use std::f64::consts::LN_2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use std::sync::OnceLock;
    use tempfile::TempDir;

    fn noise(len: usize, amp: f32, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-amp..amp)).collect()
    }

    fn analyzer() -> MelAnalyzer {
        MelAnalyzer::new(MelConfig {
            sample_rate: 16_000,
            n_fft: 256,
            hop: 64,
            window: 256,
            n_mels: 32,
            fmin: 0.0,
            fmax: 8_000.0,
        })
        .unwrap()
    }

    #[test]
    fn distances_vanish_on_identical_audio() {
        let x = noise(4_096, 0.3, 1);
        let mel = analyzer();
        assert_eq!(mel_distance(&mel, &x, &x).unwrap(), 0.0);
        assert_eq!(stft_distance(&x, &x).unwrap(), 0.0);
    }

    // Halving the signal scales every spectral magnitude by exactly 0.5 (a
    // dyadic factor is exact in binary floats), so the log-mel L1 collapses
    // to ln 2 per bin as long as nothing hits the floor clamp.
    #[test]
    fn mel_distance_of_a_halved_signal_is_ln_2() {
        let x = noise(4_096, 0.5, 2);
        let half: Vec<f32> = x.iter().map(|v| v * 0.5).collect();
        let d = mel_distance(&analyzer(), &x, &half).unwrap();
        assert!((d - LN_2).abs() < 1e-9, "d = {d}");
    }

    // Same dyadic argument per resolution: spectral convergence is exactly
    // 0.5 and the log-magnitude term is ln 2, at every resolution.
    #[test]
    fn stft_distance_of_a_halved_signal_is_half_plus_ln_2() {
        let x = noise(8_192, 0.5, 3);
        let half: Vec<f32> = x.iter().map(|v| v * 0.5).collect();
        let d = stft_distance(&x, &half).unwrap();
        assert!((d - (0.5 + LN_2)).abs() < 1e-6, "d = {d}");
    }

    #[test]
    fn mel_distance_satisfies_the_triangle_inequality() {
        let mel = analyzer();
        let a = noise(2_048, 0.4, 10);
        let b = noise(2_048, 0.4, 11);
        let c = noise(2_048, 0.4, 12);
        let ab = mel_distance(&mel, &a, &b).unwrap();
        let bc = mel_distance(&mel, &b, &c).unwrap();
        let ac = mel_distance(&mel, &a, &c).unwrap();
        assert!(ac <= ab + bc + 1e-12);
    }

    #[test]
    fn short_audio_is_rejected_with_a_config_error() {
        let x = noise(1_024, 0.3, 4);
        match stft_distance(&x, &x) {
            Err(Error::Config(_)) => {}
            other => panic!("expected Config error, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let x = noise(4_096, 0.3, 5);
        assert!(matches!(stft_distance(&x, &x[..4_000]), Err(Error::FeatureShape(_))));
        assert!(matches!(mel_distance(&analyzer(), &x, &x[..4_000]), Err(Error::FeatureShape(_))));
    }

    struct Fixture {
        _tmp: TempDir,
        report: EvalReport,
        config_hash: String,
    }

    fn fixture() -> &'static Fixture {
        static FIX: OnceLock<Fixture> = OnceLock::new();
        FIX.get_or_init(|| {
            let cfg = TrainingConfig {
                mode: crate::pipeline::Mode::Vocoder,
                payload_len: 4,
                rank: 4,
                batch_size: 2,
                segment_length: 256,
                max_iterations: 2,
                seed: 7,
                mel: MelConfig {
                    sample_rate: 16_000,
                    n_fft: 64,
                    hop: 16,
                    window: 64,
                    n_mels: 8,
                    fmin: 0.0,
                    fmax: 8_000.0,
                },
                vocoder: crate::models::ToyVocoderConfig {
                    n_mels: 8,
                    upsample_factors: vec![4, 4],
                    initial_channels: 8,
                    resblock_kernel: 3,
                    resblock_dilations: vec![1],
                },
                disc: crate::models::DiscriminatorConfig {
                    periods: vec![2],
                    scales: 1,
                    base_channels: 4,
                },
                wm_decoder: crate::watermark::WatermarkDecoderConfig {
                    n_mels: 8,
                    payload_len: 4,
                    channels: 4,
                    blocks: 1,
                },
                ..TrainingConfig::default()
            };

            let tmp = TempDir::new().unwrap();
            let pre = tmp.path().join("pre");
            let ft = tmp.path().join("ft");
            let inst_dir = tmp.path().join("inst");
            let train_data = synthetic_dataset(4, 4_000, 16_000, 11);
            pretrain(&cfg, &train_data, &pre).unwrap();
            finetune(&cfg, &train_data, &pre, &ft).unwrap();
            let w = Watermark::parse("1010").unwrap();
            mint(&ft, &w, &inst_dir).unwrap();

            let inst = load_instance(&inst_dir).unwrap();
            let reference = load_finetuned(&ft).unwrap();
            let eval_data = synthetic_dataset(2, 4_096, 16_000, 99);
            let report = evaluate_instance(&inst, &reference, &eval_data, 5).unwrap();
            let config_hash = cfg.hash();
            Fixture { _tmp: tmp, report, config_hash }
        })
    }

    #[test]
    fn evaluation_covers_the_whole_battery() {
        let report = &fixture().report;
        assert_eq!(report.rows.len(), 13);
        assert_eq!(report.rows[0].name, "None");
        assert_eq!(report.clean_acc, report.rows[0].acc);
        assert_eq!(report.clips, 2);
        for row in &report.rows {
            if row.skipped {
                assert!(row.acc.is_nan());
                assert!(row.note.is_some());
            } else {
                assert!((0.0..=1.0).contains(&row.acc), "{}: {}", row.name, row.acc);
            }
        }
        assert!(report.mel_distance.is_finite() && report.mel_distance >= 0.0);
        assert!(report.stft_distance.is_finite() && report.stft_distance >= 0.0);
        assert!(report.pesq.is_none() && report.stoi.is_none());
    }

    #[test]
    fn report_files_carry_both_identity_hashes() {
        let fix = fixture();
        let out = TempDir::new().unwrap();
        let (csv, txt) = write_robustness_report(out.path(), &fix.report, &fix.config_hash).unwrap();
        let wm = watermark_hash(&fix.report.watermark);
        let expect = format!("robustness-{}-{}", &wm[..12], &fix.config_hash[..12]);
        assert_eq!(csv.file_stem().unwrap().to_str().unwrap(), expect);
        assert_eq!(txt.file_stem().unwrap().to_str().unwrap(), expect);

        let body = std::fs::read_to_string(&csv).unwrap();
        let lines: Vec<&str> = body.lines().collect();
        assert_eq!(lines.len(), 14, "header plus one line per attack");
        assert_eq!(lines[0], "attack,params,acc,skipped");
        assert!(lines[1].starts_with("None,,"));
        for line in &lines[1..] {
            assert_eq!(line.matches(',').count(), 3, "line {line:?}");
        }

        let summary = std::fs::read_to_string(&txt).unwrap();
        assert!(summary.contains("clean bit accuracy"));
        assert!(summary.contains("pesq: n/a"));
    }

    #[test]
    fn mismatched_sample_rate_is_rejected() {
        let fix = fixture();
        // Rebuild systems cheaply from the already-written checkpoints.
        let report = &fix.report;
        assert_eq!(report.rows.len(), 13);
        let bad = synthetic_dataset(1, 4_096, 22_050, 1);
        let tmp = &fix._tmp;
        let inst = load_instance(&tmp.path().join("inst")).unwrap();
        let reference = load_finetuned(&tmp.path().join("ft")).unwrap();
        match evaluate_instance(&inst, &reference, &bad, 0) {
            Err(Error::Config(_)) => {}
            other => panic!("expected Config error, got {:?}", other.map(|r| r.clips)),
        }
    }
}
