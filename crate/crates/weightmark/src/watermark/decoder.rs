//! Watermark extraction network.
//!
//! Consumes log-mel spectrograms, subtracts the per-example mean (which makes
//! the logits invariant to uniform gain above the mel floor), runs a small 2-D
//! residual stack, pools over time, and maps to one logit per payload bit.

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Watermark;
use crate::nn::layers::{Conv2d, Linear};
use crate::nn::{ops, GradStore, ParamStore};
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct WatermarkDecoderConfig {
    pub n_mels: usize,
    pub payload_len: usize,
    pub channels: usize,
    pub blocks: usize,
}

impl Default for WatermarkDecoderConfig {
    fn default() -> Self {
        Self { n_mels: 80, payload_len: 16, channels: 32, blocks: 4 }
    }
}

const SLOPE: f32 = 0.1;

struct ResBlock2d {
    conv1: Conv2d,
    conv2: Conv2d,
}

pub struct WatermarkDecoder {
    cfg: WatermarkDecoderConfig,
    stem: Conv2d,
    blocks: Vec<ResBlock2d>,
    head: Linear,
}

struct BlockCache {
    x: Array4<f32>,
    mid_pre: Array4<f32>,
    mid_act: Array4<f32>,
    z: Array4<f32>,
}

pub struct DecoderCache {
    x0: Array4<f32>,
    stem_pre: Array4<f32>,
    stem_act: Array4<f32>,
    blocks: Vec<BlockCache>,
    frames: usize,
}

impl WatermarkDecoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: WatermarkDecoderConfig) -> Result<Self> {
        if cfg.n_mels == 0 || cfg.payload_len == 0 || cfg.channels == 0 {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        let c = cfg.channels;
        let stem = Conv2d::new(store, rng, "wm_dec.stem", 1, c, (3, 3), (1, 1), (1, 1));
        let blocks = (0..cfg.blocks)
            .map(|i| ResBlock2d {
                conv1: Conv2d::new(store, rng, &format!("wm_dec.block{i}.conv1"), c, c, (3, 3), (1, 1), (1, 1)),
                conv2: Conv2d::new(store, rng, &format!("wm_dec.block{i}.conv2"), c, c, (3, 3), (1, 1), (1, 1)),
            })
            .collect();
        let head = Linear::new(store, rng, "wm_dec.head", c * cfg.n_mels, cfg.payload_len);
        Ok(Self { cfg, stem, blocks, head })
    }

    pub fn config(&self) -> &WatermarkDecoderConfig {
        &self.cfg
    }

    /// Logits for each payload bit from `(B, n_mels, T)` log-mels.
    pub fn forward(&self, store: &ParamStore, logmel: &Array3<f32>) -> Result<(Array2<f32>, DecoderCache)> {
        let (bsz, mels, frames) = logmel.dim();
        if mels != self.cfg.n_mels {
            return Err(Error::FeatureShape(format!(
                "decoder configured for {} mel bins, input has {mels}",
                self.cfg.n_mels
            )));
        }
        // Per-example mean subtraction: uniform input gain shifts log-mels by
        // a constant, which cancels here.
        let mut x0 = Array4::<f32>::zeros((bsz, 1, mels, frames));
        for b in 0..bsz {
            let ex = logmel.index_axis(Axis(0), b);
            let mean = ex.iter().map(|v| *v as f64).sum::<f64>() / ex.len() as f64;
            let mean = mean as f32;
            let mut out = x0.index_axis_mut(Axis(0), b);
            let mut out = out.index_axis_mut(Axis(0), 0);
            ndarray::Zip::from(&mut out).and(&ex).for_each(|o, &v| *o = v - mean);
        }

        let stem_pre = self.stem.forward(store, &x0);
        let stem_act = ops::leaky_relu(&stem_pre, SLOPE);
        let mut x = stem_act.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let mid_pre = block.conv1.forward(store, &x);
            let mid_act = ops::leaky_relu(&mid_pre, SLOPE);
            let z = &block.conv2.forward(store, &mid_act) + &x;
            let y = ops::leaky_relu(&z, SLOPE);
            blocks.push(BlockCache { x, mid_pre, mid_act, z });
            x = y;
        }

        // (B, C, M, T) -> mean over time -> (B, C*M).
        let pooled = x.mean_axis(Axis(3)).unwrap();
        let flat = pooled
            .into_shape_with_order((bsz, self.cfg.channels * mels))
            .unwrap();
        let logits = self.head.forward(store, &flat);
        let cache = DecoderCache { x0, stem_pre, stem_act, blocks, frames };
        Ok((logits, cache))
    }

    /// Backward from logit gradients to log-mel gradients.
    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut GradStore,
        cache: &DecoderCache,
        dlogits: &Array2<f32>,
    ) -> Array3<f32> {
        let (bsz, _, mels, frames) = cache.x0.dim();
        let c = self.cfg.channels;

        // Rebuild the flattened pooled features the head saw.
        let last = cache
            .blocks
            .last()
            .map(|b| ops::leaky_relu(&b.z, SLOPE))
            .unwrap_or_else(|| cache.stem_act.clone());
        let flat = last
            .mean_axis(Axis(3))
            .unwrap()
            .into_shape_with_order((bsz, c * mels))
            .unwrap();
        let dflat = self.head.backward(store, grads, &flat, dlogits);
        let dpooled = dflat.into_shape_with_order((bsz, c, mels)).unwrap();

        let mut dx = Array4::<f32>::zeros((bsz, c, mels, frames));
        let inv_t = 1.0 / frames as f32;
        for t in 0..frames {
            let mut slice = dx.index_axis_mut(Axis(3), t);
            slice.assign(&dpooled.mapv(|v| v * inv_t));
        }

        for (block, bc) in self.blocks.iter().zip(cache.blocks.iter()).rev() {
            let dz = ops::leaky_relu_backward(&bc.z, &dx, SLOPE);
            let dmid_act = block.conv2.backward(store, grads, &bc.mid_act, &dz);
            let dmid_pre = ops::leaky_relu_backward(&bc.mid_pre, &dmid_act, SLOPE);
            let dthrough = block.conv1.backward(store, grads, &bc.x, &dmid_pre);
            dx = &dz + &dthrough;
        }

        let dstem_pre = ops::leaky_relu_backward(&cache.stem_pre, &dx, SLOPE);
        let dx0 = self.stem.backward(store, grads, &cache.x0, &dstem_pre);

        // Mean subtraction is symmetric: backward applies the same centering.
        let mut dmel = Array3::<f32>::zeros((bsz, mels, frames));
        for b in 0..bsz {
            let ex = dx0.index_axis(Axis(0), b);
            let ex = ex.index_axis(Axis(0), 0);
            let mean = ex.iter().map(|v| *v as f64).sum::<f64>() / ex.len() as f64;
            let mean = mean as f32;
            let mut out = dmel.index_axis_mut(Axis(0), b);
            ndarray::Zip::from(&mut out).and(&ex).for_each(|o, &v| *o = v - mean);
        }
        let _ = cache.frames;
        dmel
    }

    /// Sigmoid probabilities and hard bit decisions (`p >= 0.5` maps to 1).
    pub fn extract(&self, store: &ParamStore, logmel: &Array3<f32>) -> Result<(Array2<f32>, Vec<Watermark>)> {
        let (logits, _) = self.forward(store, logmel)?;
        let probs = ops::sigmoid(&logits);
        let bits = probs
            .rows()
            .into_iter()
            .map(|row| {
                Watermark::new(row.iter().map(|&p| if p >= 0.5 { 1u8 } else { 0 }).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((probs, bits))
    }
}

/// Per-bit probabilities for one example, convenience over [`WatermarkDecoder::extract`].
pub fn probabilities_to_bits(probs: &Array1<f32>) -> Result<Watermark> {
    Watermark::new(probs.iter().map(|&p| if p >= 0.5 { 1u8 } else { 0 }).collect())
}
