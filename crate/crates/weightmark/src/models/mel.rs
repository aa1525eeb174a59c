//! Differentiable log-mel spectrogram front-end.
//!
//! The short-time transform is expressed as two matrix products (windowed
//! cosine and sine bases against a frame matrix), so the backward pass is a
//! pair of transposed products plus an overlap-add scatter. Padding is
//! reflective with `(n_fft - hop) / 2` samples per side, which keeps the frame
//! count at exactly `len / hop` for hop-divisible inputs.

use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::nn::ops;

/// Natural-log floor applied to mel magnitudes. Digital silence maps every
/// output entry to exactly `LOG_FLOOR.ln()`.
pub const LOG_FLOOR: f32 = 1e-5;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub window: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for MelConfig {
    /// 16 kHz analysis whose hop matches the default vocoder upsampling.
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_fft: 1024,
            hop: 256,
            window: 1024,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8_000.0,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.n_fft == 0 || self.hop == 0 || self.n_mels == 0 {
            return Err(crate::Error::Config("mel sizes must be positive".into()));
        }
        if self.hop > self.window || self.window > self.n_fft {
            return Err(crate::Error::Config(format!(
                "need hop <= window <= n_fft, got {} / {} / {}",
                self.hop, self.window, self.n_fft
            )));
        }
        if (self.n_fft - self.window) % 2 != 0 {
            return Err(crate::Error::Config(format!(
                "n_fft {} minus window {} must be even to center the window",
                self.n_fft, self.window
            )));
        }
        if (self.n_fft - self.hop) % 2 != 0 {
            return Err(crate::Error::Config(format!(
                "n_fft {} minus hop {} must be even to split the pad",
                self.n_fft, self.hop
            )));
        }
        if !(0.0..self.fmax).contains(&self.fmin) || self.fmax > self.sample_rate as f64 / 2.0 {
            return Err(crate::Error::Config(format!(
                "mel band [{}, {}] must sit inside [0, {})",
                self.fmin,
                self.fmax,
                self.sample_rate as f64 / 2.0
            )));
        }
        Ok(())
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank `(n_mels, n_fft/2 + 1)` with unit peaks.
pub fn mel_filterbank(cfg: &MelConfig) -> Array2<f32> {
    let n_freq = cfg.n_fft / 2 + 1;
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(cfg.fmax);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz: Vec<f64> = (0..n_freq)
        .map(|k| k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64)
        .collect();
    let mut fb = Array2::<f32>::zeros((cfg.n_mels, n_freq));
    for m in 0..cfg.n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_freq {
            let f = bin_hz[k];
            let up = (f - lo) / (mid - lo);
            let down = (hi - f) / (hi - mid);
            let v = up.min(down).max(0.0);
            fb[[m, k]] = v as f32;
        }
    }
    fb
}

/// Forward state consumed by [`MelAnalyzer::backward`].
pub struct MelCache {
    mag: Array3<f32>,
    mel: Array3<f32>,
    re: Array3<f32>,
    im: Array3<f32>,
    input_len: usize,
}

pub struct MelAnalyzer {
    cfg: MelConfig,
    /// `(n_freq, n_fft)` windowed cosine basis.
    basis_re: Array2<f32>,
    /// `(n_freq, n_fft)` windowed negative-sine basis.
    basis_im: Array2<f32>,
    filterbank: Array2<f32>,
    // f64 promotions of the same matrices, for the high-precision value path.
    basis_re64: Array2<f64>,
    basis_im64: Array2<f64>,
    filterbank64: Array2<f64>,
}

impl MelAnalyzer {
    pub fn new(cfg: MelConfig) -> crate::Result<Self> {
        cfg.validate()?;
        let n = cfg.n_fft;
        let n_freq = n / 2 + 1;
        // Periodic Hann over `window` samples, centered in the FFT frame.
        let offset = (n - cfg.window) / 2;
        let mut window = vec![0.0f64; n];
        for i in 0..cfg.window {
            window[offset + i] =
                0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / cfg.window as f64).cos());
        }
        let mut basis_re = Array2::<f32>::zeros((n_freq, n));
        let mut basis_im = Array2::<f32>::zeros((n_freq, n));
        for f in 0..n_freq {
            for i in 0..n {
                let angle = 2.0 * std::f64::consts::PI * f as f64 * i as f64 / n as f64;
                basis_re[[f, i]] = (window[i] * angle.cos()) as f32;
                basis_im[[f, i]] = (window[i] * -angle.sin()) as f32;
            }
        }
        let filterbank = mel_filterbank(&cfg);
        let basis_re64 = basis_re.mapv(f64::from);
        let basis_im64 = basis_im.mapv(f64::from);
        let filterbank64 = filterbank.mapv(f64::from);
        Ok(Self { cfg, basis_re, basis_im, filterbank, basis_re64, basis_im64, filterbank64 })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    pub fn n_frames(&self, len: usize) -> usize {
        let padded = len + self.cfg.n_fft - self.cfg.hop;
        (padded - self.cfg.n_fft) / self.cfg.hop + 1
    }

    /// Log-mel spectrogram of `(B, L)` audio as `(B, n_mels, T)`.
    pub fn forward(&self, x: &Array2<f32>) -> crate::Result<(Array3<f32>, MelCache)> {
        let (bsz, len) = x.dim();
        if len < self.cfg.n_fft {
            return Err(crate::Error::Domain(format!(
                "input length {len} is shorter than one analysis window ({})",
                self.cfg.n_fft
            )));
        }
        let pad = (self.cfg.n_fft - self.cfg.hop) / 2;
        let x3 = x.view().insert_axis(Axis(1));
        let padded = ops::reflect_pad_1d(x3, pad, pad);
        let frames_per = self.n_frames(len);
        let n_freq = self.cfg.n_fft / 2 + 1;

        let mut re = Array3::<f32>::zeros((bsz, n_freq, frames_per));
        let mut im = Array3::<f32>::zeros((bsz, n_freq, frames_per));
        let mut mag = Array3::<f32>::zeros((bsz, n_freq, frames_per));
        let mut mel = Array3::<f32>::zeros((bsz, self.cfg.n_mels, frames_per));
        let mut logmel = Array3::<f32>::zeros((bsz, self.cfg.n_mels, frames_per));

        for b in 0..bsz {
            let sig = padded.index_axis(Axis(0), b);
            let sig = sig.index_axis(Axis(0), 0);
            let mut frames = Array2::<f32>::zeros((self.cfg.n_fft, frames_per));
            for t in 0..frames_per {
                let start = t * self.cfg.hop;
                frames
                    .column_mut(t)
                    .assign(&sig.slice(ndarray::s![start..start + self.cfg.n_fft]));
            }
            let re_b = self.basis_re.dot(&frames);
            let im_b = self.basis_im.dot(&frames);
            let mag_b = ndarray::Zip::from(&re_b)
                .and(&im_b)
                .map_collect(|&r, &i| (r * r + i * i).sqrt());
            let mel_b = self.filterbank.dot(&mag_b);
            re.index_axis_mut(Axis(0), b).assign(&re_b);
            im.index_axis_mut(Axis(0), b).assign(&im_b);
            mag.index_axis_mut(Axis(0), b).assign(&mag_b);
            mel.index_axis_mut(Axis(0), b).assign(&mel_b);
            logmel
                .index_axis_mut(Axis(0), b)
                .assign(&mel_b.mapv(|v| v.max(LOG_FLOOR).ln()));
        }
        let cache = MelCache { mag, mel, re, im, input_len: len };
        Ok((logmel, cache))
    }

    /// Log-mel spectrogram evaluated with f64 accumulation throughout.
    ///
    /// Same basis values as [`forward`](Self::forward), so this is the exact
    /// function the f32 path approximates; loss values built on it are free
    /// of single-precision summation noise, which finite-difference checks
    /// would otherwise pick up.
    pub fn log_mel_f64(&self, x: &Array2<f32>) -> crate::Result<Array3<f64>> {
        let (bsz, len) = x.dim();
        if len < self.cfg.n_fft {
            return Err(crate::Error::Domain(format!(
                "input length {len} is shorter than one analysis window ({})",
                self.cfg.n_fft
            )));
        }
        let pad = (self.cfg.n_fft - self.cfg.hop) / 2;
        let x3 = x.view().insert_axis(Axis(1));
        let padded = ops::reflect_pad_1d(x3, pad, pad);
        let frames_per = self.n_frames(len);
        let floor = LOG_FLOOR as f64;

        let mut logmel = Array3::<f64>::zeros((bsz, self.cfg.n_mels, frames_per));
        for b in 0..bsz {
            let sig = padded.index_axis(Axis(0), b);
            let sig = sig.index_axis(Axis(0), 0);
            let mut frames = Array2::<f64>::zeros((self.cfg.n_fft, frames_per));
            for t in 0..frames_per {
                let start = t * self.cfg.hop;
                for (dst, &src) in frames
                    .column_mut(t)
                    .iter_mut()
                    .zip(sig.slice(ndarray::s![start..start + self.cfg.n_fft]))
                {
                    *dst = src as f64;
                }
            }
            let re_b = self.basis_re64.dot(&frames);
            let im_b = self.basis_im64.dot(&frames);
            let mag_b = ndarray::Zip::from(&re_b)
                .and(&im_b)
                .map_collect(|&r, &i| (r * r + i * i).sqrt());
            let mel_b = self.filterbank64.dot(&mag_b);
            logmel
                .index_axis_mut(Axis(0), b)
                .assign(&mel_b.mapv(|v| v.max(floor).ln()));
        }
        Ok(logmel)
    }

    /// Propagate `(B, n_mels, T)` log-mel gradients back to `(B, L)` audio.
    ///
    /// The floor and the magnitude at zero both contribute zero subgradient,
    /// so silent regions receive no signal.
    pub fn backward(&self, cache: &MelCache, dlogmel: &Array3<f32>) -> Array2<f32> {
        let (bsz, _, frames_per) = dlogmel.dim();
        let pad = (self.cfg.n_fft - self.cfg.hop) / 2;
        let padded_len = cache.input_len + 2 * pad;
        let mut dx = Array2::<f32>::zeros((bsz, cache.input_len));
        for b in 0..bsz {
            let dmel = ndarray::Zip::from(&dlogmel.index_axis(Axis(0), b))
                .and(&cache.mel.index_axis(Axis(0), b))
                .map_collect(|&g, &m| if m > LOG_FLOOR { g / m } else { 0.0 });
            let dmag = self.filterbank.t().dot(&dmel);
            let mag_b = cache.mag.index_axis(Axis(0), b);
            let dre = ndarray::Zip::from(&dmag)
                .and(&cache.re.index_axis(Axis(0), b))
                .and(&mag_b)
                .map_collect(|&g, &r, &m| if m > 0.0 { g * r / m } else { 0.0 });
            let dim = ndarray::Zip::from(&dmag)
                .and(&cache.im.index_axis(Axis(0), b))
                .and(&mag_b)
                .map_collect(|&g, &i, &m| if m > 0.0 { g * i / m } else { 0.0 });
            let dframes = self.basis_re.t().dot(&dre) + self.basis_im.t().dot(&dim);
            let mut dpadded = Array1::<f32>::zeros(padded_len);
            for t in 0..frames_per {
                let start = t * self.cfg.hop;
                let mut seg = dpadded.slice_mut(ndarray::s![start..start + self.cfg.n_fft]);
                seg += &dframes.column(t);
            }
            let dpad3 = dpadded.insert_axis(Axis(0)).insert_axis(Axis(0));
            let dx_b = ops::reflect_pad_1d_backward(dpad3.view(), pad, pad);
            dx.row_mut(b).assign(&dx_b.index_axis(Axis(0), 0).index_axis(Axis(0), 0));
        }
        dx
    }
}
