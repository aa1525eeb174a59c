//! Toy neural audio codec: conv downsampler, residual vector quantizer,
//! and a mirror-image decoder.
//!
//! The decoder reuses the vocoder trunk with latent channels in place of mel
//! bins, so adapter injection and merging work identically in both modes.
//! The quantizer keeps entry 0 of every codebook at the zero vector, which
//! makes per-stage residual norms non-increasing: the nearest entry is never
//! worse than adding nothing.

use ndarray::{s, Array1, Array2, Array3, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::AdaptSite;
use crate::models::vocoder::{Conditioning, ToyVocoder, ToyVocoderConfig, VocoderCache};
use crate::nn::layers::Conv1d;
use crate::nn::{init, ops, GradStore, ParamId, ParamStore};
use crate::{Error, Result};

const SLOPE: f32 = 0.1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ToyCodecConfig {
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub n_quantizers: usize,
    /// Decoder upsample order; the encoder downsamples through the reverse.
    pub factors: Vec<usize>,
    pub initial_channels: usize,
    pub resblock_kernel: usize,
    pub resblock_dilations: Vec<usize>,
}

impl Default for ToyCodecConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            codebook_size: 64,
            n_quantizers: 4,
            factors: vec![8, 8, 4],
            initial_channels: 128,
            resblock_kernel: 3,
            resblock_dilations: vec![1, 3],
        }
    }
}

impl ToyCodecConfig {
    pub fn decoder_config(&self) -> ToyVocoderConfig {
        ToyVocoderConfig {
            n_mels: self.latent_dim,
            upsample_factors: self.factors.clone(),
            initial_channels: self.initial_channels,
            resblock_kernel: self.resblock_kernel,
            resblock_dilations: self.resblock_dilations.clone(),
        }
    }

    /// Samples per latent frame.
    pub fn frame_stride(&self) -> usize {
        self.factors.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("codebooks need at least two entries".into()));
        }
        if self.n_quantizers == 0 {
            return Err(Error::Config("n_quantizers must be positive".into()));
        }
        self.decoder_config().validate()
    }
}

struct EncResUnit {
    conv: Conv1d,
}

struct EncStage {
    res: Vec<EncResUnit>,
    down: Conv1d,
}

pub struct CodecEncoder {
    conv_pre: Conv1d,
    stages: Vec<EncStage>,
    conv_post: Conv1d,
}

struct EncResCache {
    x: Array3<f32>,
    act: Array3<f32>,
}

struct EncStageCache {
    res: Vec<EncResCache>,
    down_in_pre: Array3<f32>,
    down_in_act: Array3<f32>,
}

pub struct EncoderCache {
    wave: Array3<f32>,
    stages: Vec<EncStageCache>,
    post_in_pre: Array3<f32>,
    post_in_act: Array3<f32>,
}

impl CodecEncoder {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ToyCodecConfig) -> Self {
        let n = cfg.factors.len();
        let mut ch = cfg.initial_channels >> n;
        let conv_pre = Conv1d::new(store, rng, "codec.enc.conv_pre", 1, ch, 7, 1, 3, 1);
        let mut stages = Vec::with_capacity(n);
        for (j, &u) in cfg.factors.iter().rev().enumerate() {
            let res = cfg
                .resblock_dilations
                .iter()
                .enumerate()
                .map(|(k, &d)| {
                    let pad = d * (cfg.resblock_kernel - 1) / 2;
                    EncResUnit {
                        conv: Conv1d::new(
                            store,
                            rng,
                            &format!("codec.enc.stage{j}.res{k}"),
                            ch,
                            ch,
                            cfg.resblock_kernel,
                            1,
                            pad,
                            d,
                        ),
                    }
                })
                .collect();
            let down = Conv1d::new(
                store,
                rng,
                &format!("codec.enc.stage{j}.down"),
                ch,
                2 * ch,
                2 * u,
                u,
                u / 2,
                1,
            );
            stages.push(EncStage { res, down });
            ch *= 2;
        }
        let conv_post = Conv1d::new(store, rng, "codec.enc.conv_post", ch, cfg.latent_dim, 7, 1, 3, 1);
        Self { conv_pre, stages, conv_post }
    }

    /// `(B, 1, L)` audio to `(B, D, F)` latent frames.
    pub fn forward(&self, store: &ParamStore, wave: &Array3<f32>) -> (Array3<f32>, EncoderCache) {
        let mut h = self.conv_pre.forward(store, wave);
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let mut res_caches = Vec::with_capacity(stage.res.len());
            for unit in &stage.res {
                let x = h;
                let act = ops::leaky_relu(&x, SLOPE);
                let conv_out = unit.conv.forward(store, &act);
                h = &x + &conv_out;
                res_caches.push(EncResCache { x, act });
            }
            let down_in_pre = h;
            let down_in_act = ops::leaky_relu(&down_in_pre, SLOPE);
            h = stage.down.forward(store, &down_in_act);
            stage_caches.push(EncStageCache { res: res_caches, down_in_pre, down_in_act });
        }
        let post_in_pre = h;
        let post_in_act = ops::leaky_relu(&post_in_pre, SLOPE);
        let z = self.conv_post.forward(store, &post_in_act);
        let cache = EncoderCache { wave: wave.clone(), stages: stage_caches, post_in_pre, post_in_act };
        (z, cache)
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut GradStore,
        cache: &EncoderCache,
        dz: &Array3<f32>,
    ) -> Array3<f32> {
        let dpost_act = self.conv_post.backward(store, grads, &cache.post_in_act, dz);
        let mut dh = ops::leaky_relu_backward(&cache.post_in_pre, &dpost_act, SLOPE);
        for (stage, sc) in self.stages.iter().zip(&cache.stages).rev() {
            let ddown_act = stage.down.backward(store, grads, &sc.down_in_act, &dh);
            dh = ops::leaky_relu_backward(&sc.down_in_pre, &ddown_act, SLOPE);
            for (unit, rc) in stage.res.iter().zip(&sc.res).rev() {
                let dact = unit.conv.backward(store, grads, &rc.act, &dh);
                let dthrough = ops::leaky_relu_backward(&rc.x, &dact, SLOPE);
                dh += &dthrough;
            }
        }
        self.conv_pre.backward(store, grads, &cache.wave, &dh)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.conv_pre.weight, self.conv_pre.bias];
        for stage in &self.stages {
            for unit in &stage.res {
                ids.push(unit.conv.weight);
                ids.push(unit.conv.bias);
            }
            ids.push(stage.down.weight);
            ids.push(stage.down.bias);
        }
        ids.push(self.conv_post.weight);
        ids.push(self.conv_post.bias);
        ids
    }
}

/// Residual vector quantizer: each stage snaps the running residual to its
/// nearest codebook entry and the quantized latent is the sum of the picks.
pub struct Rvq {
    codebooks: Vec<ParamId>,
    v: usize,
    d: usize,
}

pub struct RvqOutput {
    pub zq: Array3<f32>,
    /// `(B, N_q, F)` selected entry indices.
    pub tokens: Array3<u32>,
    /// `(B, N_q, F)` residual L2 norms after each stage.
    pub residual_norms: Array3<f32>,
}

impl Rvq {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ToyCodecConfig) -> Self {
        let codebooks = (0..cfg.n_quantizers)
            .map(|q| {
                let mut table = init::normal(rng, &[cfg.codebook_size, cfg.latent_dim], 0.0, 0.5);
                table.slice_mut(s![0, ..]).fill(0.0);
                store.add(format!("codec.rvq.codebook{q}"), table, true)
            })
            .collect();
        Self { codebooks, v: cfg.codebook_size, d: cfg.latent_dim }
    }

    pub fn n_quantizers(&self) -> usize {
        self.codebooks.len()
    }

    pub fn codebook_ids(&self) -> &[ParamId] {
        &self.codebooks
    }

    fn codebook<'a>(&self, store: &'a ParamStore, q: usize) -> ndarray::ArrayView2<'a, f32> {
        store.get(self.codebooks[q]).view().into_dimensionality().unwrap()
    }

    fn nearest(codebook: &ndarray::ArrayView2<f32>, r: ArrayView1<f32>) -> usize {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (v, row) in codebook.rows().into_iter().enumerate() {
            let mut dist = 0.0f64;
            for (&a, &b) in r.iter().zip(row.iter()) {
                let diff = a as f64 - b as f64;
                dist += diff * diff;
            }
            if dist < best_d {
                best_d = dist;
                best = v;
            }
        }
        best
    }

    pub fn quantize(&self, store: &ParamStore, z: &Array3<f32>) -> Result<RvqOutput> {
        let (bsz, d, frames) = z.dim();
        if d != self.d {
            return Err(Error::Config(format!(
                "latent dimension {d} does not match codebook dimension {}",
                self.d
            )));
        }
        let n_q = self.codebooks.len();
        let mut zq = Array3::<f32>::zeros((bsz, d, frames));
        let mut tokens = Array3::<u32>::zeros((bsz, n_q, frames));
        let mut norms = Array3::<f32>::zeros((bsz, n_q, frames));
        for b in 0..bsz {
            for t in 0..frames {
                let mut residual: Array1<f32> = z.slice(s![b, .., t]).to_owned();
                for q in 0..n_q {
                    let codebook = self.codebook(store, q);
                    let pick = Self::nearest(&codebook, residual.view());
                    tokens[[b, q, t]] = pick as u32;
                    let row = codebook.row(pick);
                    residual -= &row;
                    for (i, &c) in row.iter().enumerate() {
                        zq[[b, i, t]] += c;
                    }
                    let norm: f64 = residual.iter().map(|&x| (x as f64).powi(2)).sum();
                    norms[[b, q, t]] = norm.sqrt() as f32;
                }
            }
        }
        Ok(RvqOutput { zq, tokens, residual_norms: norms })
    }

    /// Straight-through training terms: per-stage codebook pull plus the
    /// commitment penalty. Returns the scalar loss and the encoder-side
    /// latent gradient; codebook gradients are accumulated into `grads`
    /// unless the codebooks are frozen.
    pub fn vq_terms(
        &self,
        store: &ParamStore,
        grads: &mut GradStore,
        z: &Array3<f32>,
        out: &RvqOutput,
        beta: f32,
    ) -> (f32, Array3<f32>) {
        let (bsz, d, frames) = z.dim();
        let n_q = self.codebooks.len();
        let count = (bsz * d * frames) as f64;
        let mut loss = 0.0f64;

        let mut cb_grads: Vec<Array2<f32>> = (0..n_q).map(|_| Array2::zeros((self.v, self.d))).collect();
        for b in 0..bsz {
            for t in 0..frames {
                let mut residual: Array1<f32> = z.slice(s![b, .., t]).to_owned();
                for q in 0..n_q {
                    let codebook = self.codebook(store, q);
                    let pick = out.tokens[[b, q, t]] as usize;
                    residual -= &codebook.row(pick);
                    // Stage loss mean((entry - residual_in)^2) == mean(residual_out^2).
                    loss += residual.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / count;
                    let mut row = cb_grads[q].row_mut(pick);
                    for (g, &r) in row.iter_mut().zip(residual.iter()) {
                        *g += -2.0 * r / count as f32;
                    }
                }
            }
        }
        for (q, grad) in cb_grads.into_iter().enumerate() {
            if store.meta(self.codebooks[q]).trainable {
                grads.accumulate(self.codebooks[q], grad.into_dyn());
            }
        }

        let mut dz = Array3::<f32>::zeros(z.raw_dim());
        let mut commit = 0.0f64;
        ndarray::Zip::from(&mut dz).and(z).and(&out.zq).for_each(|g, &zv, &qv| {
            let diff = zv - qv;
            commit += (diff as f64).powi(2);
            *g = 2.0 * beta * diff / count as f32;
        });
        loss += beta as f64 * commit / count;
        (loss as f32, dz)
    }
}

pub struct ToyCodec {
    cfg: ToyCodecConfig,
    pub encoder: CodecEncoder,
    pub rvq: Rvq,
    pub decoder: ToyVocoder,
}

impl ToyCodec {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: ToyCodecConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = CodecEncoder::new(store, rng, &cfg);
        let rvq = Rvq::new(store, rng, &cfg);
        let decoder = ToyVocoder::new(store, rng, "codec.dec", cfg.decoder_config())?;
        Ok(Self { cfg, encoder, rvq, decoder })
    }

    pub fn config(&self) -> &ToyCodecConfig {
        &self.cfg
    }

    /// Only decoder layers are adaptable; encoder and quantizer stay frozen
    /// carriers of the token interface.
    pub fn adapt_sites(&self) -> Vec<AdaptSite<'_>> {
        self.decoder.adapt_sites()
    }

    pub fn encode(&self, store: &ParamStore, wave: &Array3<f32>) -> (Array3<f32>, EncoderCache) {
        self.encoder.forward(store, wave)
    }

    pub fn decode(
        &self,
        store: &ParamStore,
        zq: &Array3<f32>,
        cond: Option<&Conditioning<'_>>,
    ) -> Result<(Array3<f32>, VocoderCache)> {
        self.decoder.forward(store, zq, cond)
    }

    /// Frozen-interface parameters: encoder convs plus all codebooks.
    pub fn frozen_interface_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.param_ids();
        ids.extend_from_slice(self.rvq.codebook_ids());
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn tiny_cfg() -> ToyCodecConfig {
        ToyCodecConfig {
            latent_dim: 6,
            codebook_size: 5,
            n_quantizers: 3,
            factors: vec![2, 2],
            initial_channels: 8,
            resblock_kernel: 3,
            resblock_dilations: vec![1, 3],
        }
    }

    fn build(seed: u64) -> (ParamStore, ToyCodec) {
        let mut store = ParamStore::default();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let codec = ToyCodec::new(&mut store, &mut rng, tiny_cfg()).unwrap();
        (store, codec)
    }

    fn rand_wave(rng: &mut ChaCha20Rng, b: usize, l: usize) -> Array3<f32> {
        let mut x = Array3::zeros((b, 1, l));
        x.mapv_inplace(|_| rng.random_range(-1.0f32..1.0));
        x
    }

    #[test]
    fn codebooks_start_with_a_zero_entry_and_finite_values() {
        let (store, codec) = build(1);
        for &id in codec.rvq.codebook_ids() {
            let table = store.get(id);
            assert!(table.iter().all(|v| v.is_finite()));
            let zero_row = table.slice(s![0, ..]);
            assert!(zero_row.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn round_trip_length_is_within_one_frame_stride() {
        let (store, codec) = build(2);
        let stride = codec.config().frame_stride();
        assert_eq!(stride, 4);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for len in [64usize, 100, 101, 103, 257] {
            let wave = rand_wave(&mut rng, 1, len);
            let (z, _) = codec.encode(&store, &wave);
            let out = codec.rvq.quantize(&store, &z).unwrap();
            let (recon, _) = codec.decode(&store, &out.zq, None).unwrap();
            let got = recon.dim().2;
            assert!(
                got <= len && len - got < stride,
                "len {len} -> recon {got}, stride {stride}"
            );
        }
    }

    #[test]
    fn exact_codebook_hit_reconstructs_the_latent_bitwise() {
        let (mut store, codec) = build(4);
        let ids = codec.rvq.codebook_ids().to_vec();
        // Stage 1 entry 3 is the target; later codebooks keep their zero row.
        let target: Vec<f32> = vec![0.25, -1.5, 0.75, 2.0, -0.125, 0.5];
        store
            .get_mut(ids[0])
            .slice_mut(s![3, ..])
            .assign(&Array1::from_vec(target.clone()));
        let mut z = Array3::<f32>::zeros((1, 6, 1));
        z.slice_mut(s![0, .., 0]).assign(&Array1::from_vec(target));
        let out = codec.rvq.quantize(&store, &z).unwrap();
        assert_eq!(out.tokens[[0, 0, 0]], 3);
        assert_eq!(out.tokens[[0, 1, 0]], 0);
        assert_eq!(out.tokens[[0, 2, 0]], 0);
        assert_eq!(out.residual_norms[[0, 0, 0]], 0.0);
        assert_eq!(out.zq, z);
    }

    #[test]
    fn single_stage_matches_brute_force_nearest_neighbor() {
        let mut cfg = tiny_cfg();
        cfg.n_quantizers = 1;
        let mut store = ParamStore::default();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let codec = ToyCodec::new(&mut store, &mut rng, cfg).unwrap();
        let codebook: Array2<f32> =
            store.get(codec.rvq.codebook_ids()[0]).view().into_dimensionality().unwrap().to_owned();
        let mut z = Array3::<f32>::zeros((2, 6, 3));
        z.mapv_inplace(|_| rng.random_range(-2.0f32..2.0));
        let out = codec.rvq.quantize(&store, &z).unwrap();
        for b in 0..2 {
            for t in 0..3 {
                let frame = z.slice(s![b, .., t]);
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (v, row) in codebook.rows().into_iter().enumerate() {
                    let d: f64 = frame
                        .iter()
                        .zip(row.iter())
                        .map(|(&a, &c)| (a as f64 - c as f64).powi(2))
                        .sum();
                    if d < best_d {
                        best_d = d;
                        best = v;
                    }
                }
                assert_eq!(out.tokens[[b, 0, t]] as usize, best);
                let picked = codebook.row(best);
                assert_eq!(out.zq.slice(s![b, .., t]), picked);
            }
        }
    }

    #[test]
    fn latent_dimension_mismatch_is_a_config_error() {
        let (store, codec) = build(6);
        let z = Array3::<f32>::zeros((1, 7, 2));
        match codec.rvq.quantize(&store, &z) {
            Err(Error::Config(_)) => {}
            Err(other) => panic!("expected config error, got {other:?}"),
            Ok(_) => panic!("expected config error, got tokens"),
        }
    }

    #[test]
    fn encoder_backward_matches_finite_differences() {
        let (store, codec) = build(7);
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let wave = rand_wave(&mut rng, 1, 16);
        let (z, cache) = codec.encode(&store, &wave);
        let mut probe = Array3::<f32>::zeros(z.raw_dim());
        probe.mapv_inplace(|_| rng.random_range(-1.0f32..1.0));

        let loss = |w: &Array3<f32>| -> f64 {
            let (z, _) = codec.encode(&store, w);
            z.iter().zip(probe.iter()).map(|(&a, &b)| a as f64 * b as f64).sum()
        };
        let mut grads = GradStore::zeroed(&store);
        let dwave = codec.encoder.backward(&store, &mut grads, &cache, &probe);

        for idx in [[0usize, 0, 0], [0, 0, 7], [0, 0, 15]] {
            let mut plus = wave.clone();
            plus[idx] += 1e-3;
            let mut minus = wave.clone();
            minus[idx] -= 1e-3;
            let fd = (loss(&plus) - loss(&minus)) / 2e-3;
            let an = dwave[idx] as f64;
            assert!(
                (fd - an).abs() <= 1e-3 + 2e-2 * fd.abs().max(an.abs()),
                "index {idx:?}: fd {fd} vs analytic {an}"
            );
        }
        assert!(codec.encoder.param_ids().iter().all(|&id| grads.get(id).is_some()));
    }

    #[test]
    fn vq_terms_report_commitment_gradient_and_respect_frozen_codebooks() {
        let (mut store, codec) = build(9);
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let mut z = Array3::<f32>::zeros((1, 6, 2));
        z.mapv_inplace(|_| rng.random_range(-1.0f32..1.0));
        let out = codec.rvq.quantize(&store, &z).unwrap();
        let beta = 0.25f32;

        let mut grads = GradStore::zeroed(&store);
        let (loss, dz) = codec.rvq.vq_terms(&store, &mut grads, &z, &out, beta);
        assert!(loss >= 0.0);
        let count = z.len() as f32;
        for (g, (&zv, &qv)) in dz.iter().zip(z.iter().zip(out.zq.iter())) {
            let expect = 2.0 * beta * (zv - qv) / count;
            assert!((g - expect).abs() <= 1e-6 * expect.abs().max(1.0));
        }
        assert!(codec.rvq.codebook_ids().iter().any(|&id| grads.get(id).is_some()));

        for &id in codec.rvq.codebook_ids() {
            store.set_trainable(id, false);
        }
        let mut frozen_grads = GradStore::zeroed(&store);
        let (loss2, _) = codec.rvq.vq_terms(&store, &mut frozen_grads, &z, &out, beta);
        assert_eq!(loss, loss2);
        assert!(codec.rvq.codebook_ids().iter().all(|&id| frozen_grads.get(id).is_none()));
    }

    #[test]
    fn frozen_interface_covers_encoder_and_codebooks() {
        let (store, codec) = build(11);
        let ids = codec.frozen_interface_ids();
        assert_eq!(ids.len(), codec.encoder.param_ids().len() + 3);
        for id in ids {
            let name = &store.meta(id).name;
            assert!(
                name.starts_with("codec.enc.") || name.starts_with("codec.rvq."),
                "unexpected frozen-interface member {name}"
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn residual_norms_never_increase_with_zero_rows_present(
            seed in 0u64..1000,
            d in 1usize..=4,
            v in 2usize..=16,
            n_q in 1usize..=4,
        ) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut store = ParamStore::default();
            let cfg = ToyCodecConfig {
                latent_dim: d,
                codebook_size: v,
                n_quantizers: n_q,
                factors: vec![2],
                initial_channels: 2,
                resblock_kernel: 3,
                resblock_dilations: vec![1],
            };
            let codec = ToyCodec::new(&mut store, &mut rng, cfg).unwrap();
            let mut z = Array3::<f32>::zeros((1, d, 3));
            z.mapv_inplace(|_| rng.random_range(-2.0f32..2.0));
            let out = codec.rvq.quantize(&store, &z).unwrap();
            for t in 0..3 {
                let z0: f64 = z.slice(s![0, .., t]).iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                let mut prev = z0 as f32;
                for q in 0..n_q {
                    let norm = out.residual_norms[[0, q, t]];
                    prop_assert!(
                        norm <= prev + 1e-6,
                        "stage {} norm {} exceeds previous {}", q, norm, prev
                    );
                    prev = norm;
                }
            }
        }
    }

    #[test]
    fn reconstruction_error_is_non_increasing_in_quantizer_depth() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        for trial in 0..6 {
            let d = 1 + (trial % 4);
            let mut store = ParamStore::default();
            let cfg = ToyCodecConfig {
                latent_dim: d,
                codebook_size: 9,
                n_quantizers: 4,
                factors: vec![2],
                initial_channels: 2,
                resblock_kernel: 3,
                resblock_dilations: vec![1],
            };
            let codec = ToyCodec::new(&mut store, &mut rng, cfg).unwrap();
            let mut z = Array3::<f32>::zeros((1, d, 2));
            z.mapv_inplace(|_| rng.random_range(-2.0f32..2.0));
            let out = codec.rvq.quantize(&store, &z).unwrap();
            // residual_norms[q] is exactly the reconstruction error of the
            // depth-(q+1) prefix, so monotonicity in depth is the same chain.
            for t in 0..2 {
                for q in 1..4 {
                    assert!(
                        out.residual_norms[[0, q, t]] <= out.residual_norms[[0, q - 1, t]] + 1e-6
                    );
                }
            }
        }
    }
}
