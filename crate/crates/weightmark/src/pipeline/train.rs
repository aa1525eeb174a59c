//! Adversarial pretraining of the base generator and watermark fine-tuning
//! with payload-conditioned adapters.
//!
//! Both loops share the discriminator update and the adversarial generator
//! signal. Fine-tuning adds the extraction objective and, when enabled,
//! projects the perceptual gradient off any conflicting watermark direction
//! before the generator step. Both gradients are evaluated at the same
//! parameter point; the watermark update is applied first.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayD, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::adapter::{AdaptSite, AdapterSet, LayerSelector};
use crate::grad_project::{GradientLayout, Projector};
use crate::models::codec::ToyCodec;
use crate::models::disc::{DiscriminatorSet, SubGrad};
use crate::models::mel::MelAnalyzer;
use crate::models::vocoder::{Conditioning, ToyVocoder, VocoderCache};
use crate::nn::{Adam, GradStore, ParamId, ParamStore};
use crate::objectives::{
    adversarial_d_grads, adversarial_g_grads, feature_matching_grads, generator_loss,
    mel_loss_grad, watermark_loss_from_logits,
};
use crate::pipeline::checkpoint::{self, CheckpointMeta};
use crate::pipeline::config::{Mode, TrainingConfig};
use crate::pipeline::data::{sample_batch, Dataset};
use crate::watermark::{Watermark, WatermarkDecoder, WatermarkEncoder};
use crate::{Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";

const BETA1: f32 = 0.8;
const BETA2: f32 = 0.99;
/// Commitment weight for the codec's quantizer terms during pretraining.
const VQ_BETA: f32 = 0.25;
/// Parameter init and batch sampling draw from separate streams of the same
/// seed so a change in model size cannot shift the data order.
const INIT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;

pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Waveform generator under training: a mel-driven vocoder, or the decoder
/// half of a codec behind its frozen encode/quantize front end.
pub enum GeneratorKind {
    Vocoder(ToyVocoder),
    Codec(ToyCodec),
}

impl GeneratorKind {
    pub(crate) fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        cfg: &TrainingConfig,
    ) -> Result<Self> {
        match cfg.mode {
            Mode::Vocoder => {
                Ok(Self::Vocoder(ToyVocoder::new(store, rng, "voc", cfg.vocoder.clone())?))
            }
            Mode::Codec => {
                let codec_cfg = cfg
                    .codec
                    .clone()
                    .ok_or_else(|| Error::Config("codec mode needs a [codec] section".into()))?;
                Ok(Self::Codec(ToyCodec::new(store, rng, codec_cfg)?))
            }
        }
    }

    /// Store prefix every generator parameter name starts with.
    pub fn prefix(&self) -> &'static str {
        match self {
            Self::Vocoder(_) => "voc.",
            Self::Codec(_) => "codec.",
        }
    }

    /// The trainable waveform-producing half.
    pub fn decoder(&self) -> &ToyVocoder {
        match self {
            Self::Vocoder(v) => v,
            Self::Codec(c) => &c.decoder,
        }
    }

    fn adapt_sites(&self) -> Vec<AdaptSite<'_>> {
        match self {
            Self::Vocoder(v) => v.adapt_sites(),
            Self::Codec(c) => c.adapt_sites(),
        }
    }
}

/// Pretraining bundle: generator, discriminator, and the mel front end.
pub struct BaseSystem {
    pub store: ParamStore,
    pub cfg: TrainingConfig,
    pub gen: GeneratorKind,
    pub disc: DiscriminatorSet,
    pub mel: MelAnalyzer,
}

impl BaseSystem {
    pub fn build(cfg: &TrainingConfig, rng: &mut ChaCha20Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let gen = GeneratorKind::build(&mut store, rng, cfg)?;
        let disc = DiscriminatorSet::new(&mut store, rng, "disc", cfg.disc.clone())?;
        let mel = MelAnalyzer::new(cfg.mel.clone())?;
        Ok(Self { store, cfg: cfg.clone(), gen, disc, mel })
    }
}

/// Fine-tuning bundle: the frozen base generator plus adapters, payload
/// encoder, extractor, discriminator, and the mel front end.
pub struct FinetuneSystem {
    pub store: ParamStore,
    pub cfg: TrainingConfig,
    pub gen: GeneratorKind,
    pub adapters: AdapterSet,
    pub wm_encoder: WatermarkEncoder,
    pub wm_decoder: WatermarkDecoder,
    pub disc: DiscriminatorSet,
    pub mel: MelAnalyzer,
}

/// One conditioned generation pass kept around for the backward passes.
pub struct ConditionedBatch {
    pub fake: Array3<f32>,
    caches: Vec<VocoderCache>,
    svecs: Vec<Array1<f32>>,
}

impl FinetuneSystem {
    /// Build with fresh parameter values. Injection freezes everything that
    /// exists before it runs, so the generator must come first and the
    /// trainable heads after.
    pub fn build(cfg: &TrainingConfig, rng: &mut ChaCha20Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let gen = GeneratorKind::build(&mut store, rng, cfg)?;
        let adapters = {
            let sites = gen.adapt_sites();
            AdapterSet::inject(&mut store, rng, &sites, cfg.rank, LayerSelector::AllConvs)?
        };
        let wm_encoder = WatermarkEncoder::new(&mut store, rng, cfg.payload_len, cfg.rank)?;
        let wm_decoder = WatermarkDecoder::new(&mut store, rng, cfg.wm_decoder.clone())?;
        let disc = DiscriminatorSet::new(&mut store, rng, "disc", cfg.disc.clone())?;
        let mel = MelAnalyzer::new(cfg.mel.clone())?;
        Ok(Self { store, cfg: cfg.clone(), gen, adapters, wm_encoder, wm_decoder, disc, mel })
    }

    /// Adapter and payload-encoder parameters: everything the generator-side
    /// updates may touch.
    pub fn generator_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.adapters.param_ids();
        ids.push(self.wm_encoder.v);
        ids.push(self.wm_encoder.g);
        ids
    }

    /// Generator input features for a real batch: log-mels for the vocoder,
    /// quantized latents for the codec.
    pub fn features(&self, wave: &Array3<f32>) -> Result<Array3<f32>> {
        plain_features(&self.gen, &self.store, &self.mel, wave)
    }

    /// Regenerate audio through the generator. `w == None` bypasses the
    /// adapters entirely, which reproduces the frozen pretrained model.
    pub fn synthesize(&self, wave: &Array3<f32>, w: Option<&Watermark>) -> Result<Array3<f32>> {
        let feats = self.features(wave)?;
        let out = match w {
            None => self.gen.decoder().forward(&self.store, &feats, None)?.0,
            Some(w) => {
                let svec = self.wm_encoder.encode(&self.store, w)?;
                let cond = Conditioning { set: &self.adapters, s: &svec };
                self.gen.decoder().forward(&self.store, &feats, Some(&cond))?.0
            }
        };
        Ok(out)
    }

    /// Run the extractor, returning per-bit probabilities and hard payloads.
    pub fn extract(&self, wave: &Array3<f32>) -> Result<(Array2<f32>, Vec<Watermark>)> {
        let (logmel, _) = self.mel.forward(&drop_channel(wave))?;
        self.wm_decoder.extract(&self.store, &logmel)
    }

    /// Generate one batch with a distinct payload per item. The conditioning
    /// scale is a single vector, so items run through the decoder one at a
    /// time; the analysis and scoring stages downstream stay batched.
    pub fn conditioned_forward(
        &self,
        real: &Array3<f32>,
        wms: &[Watermark],
    ) -> Result<ConditionedBatch> {
        let feats = self.features(real)?;
        let (bsz, _, t) = real.dim();
        if wms.len() != bsz {
            return Err(Error::PayloadShape(format!(
                "{} payloads for a batch of {bsz}",
                wms.len()
            )));
        }
        let mut svecs = Vec::with_capacity(bsz);
        for w in wms {
            svecs.push(self.wm_encoder.encode(&self.store, w)?);
        }
        let mut fake = Array3::<f32>::zeros((bsz, 1, t));
        let mut caches = Vec::with_capacity(bsz);
        for b in 0..bsz {
            let feat = feats.slice(s![b..b + 1, .., ..]).to_owned();
            let cond = Conditioning { set: &self.adapters, s: &svecs[b] };
            let (out, cache) = self.gen.decoder().forward(&self.store, &feat, Some(&cond))?;
            fake.slice_mut(s![b..b + 1, .., ..]).assign(&out);
            caches.push(cache);
        }
        Ok(ConditionedBatch { fake, caches, svecs })
    }

    /// Push a waveform gradient through every item of a conditioned batch,
    /// accumulating adapter grads and routing scale grads into the payload
    /// encoder.
    fn backward_conditioned(
        &self,
        grads: &mut GradStore,
        dwave: &Array3<f32>,
        batch: &ConditionedBatch,
        wms: &[Watermark],
    ) -> Result<()> {
        for (b, w) in wms.iter().enumerate() {
            let dy = dwave.slice(s![b..b + 1, .., ..]).to_owned();
            let cond = Conditioning { set: &self.adapters, s: &batch.svecs[b] };
            let (_, ds) = self.gen.decoder().backward(
                &self.store,
                grads,
                &batch.caches[b],
                Some(&cond),
                &dy,
            );
            let ds = ds.ok_or_else(|| {
                Error::Sequencing("conditioned backward produced no scale gradient".into())
            })?;
            self.wm_encoder.backward(&self.store, grads, w, &ds);
        }
        Ok(())
    }
}

/// One independent payload per batch item.
pub fn sample_watermarks(rng: &mut impl Rng, l: usize, n: usize) -> Result<Vec<Watermark>> {
    (0..n).map(|_| Watermark::random(l, rng)).collect()
}

/// Mode-appropriate generator input for audio that is not being trained on.
pub(crate) fn plain_features(
    gen: &GeneratorKind,
    store: &ParamStore,
    mel: &MelAnalyzer,
    wave: &Array3<f32>,
) -> Result<Array3<f32>> {
    match gen {
        GeneratorKind::Vocoder(_) => Ok(mel.forward(&drop_channel(wave))?.0),
        GeneratorKind::Codec(c) => {
            let (z, _) = c.encode(store, wave);
            Ok(c.rvq.quantize(store, &z)?.zq)
        }
    }
}

#[derive(Debug)]
pub struct PretrainReport {
    pub iterations: u64,
    pub first_mel_loss: Option<f64>,
    pub final_mel_loss: Option<f64>,
}

#[derive(Debug)]
pub struct FinetuneReport {
    pub iterations: u64,
    pub projection_fired: u64,
    pub final_batch_acc: Option<f64>,
}

/// Adversarially train the base generator and write a checkpoint of every
/// parameter (generator and discriminator) to `out_dir`.
pub fn pretrain(cfg: &TrainingConfig, dataset: &Dataset, out_dir: &Path) -> Result<PretrainReport> {
    cfg.validate()?;
    check_dataset(cfg, dataset)?;
    let mut sys = BaseSystem::build(cfg, &mut seeded_rng(cfg.seed, INIT_STREAM))?;
    let mut train_rng = seeded_rng(cfg.seed, TRAIN_STREAM);

    let gen_ids: Vec<ParamId> = sys.store.ids_with_prefix(sys.gen.prefix()).collect();
    let disc_ids: Vec<ParamId> = sys.store.ids_with_prefix("disc.").collect();
    let mut opt_g = Adam::new(&sys.store, gen_ids, cfg.lr_generator as f32, BETA1, BETA2);
    let mut opt_d =
        Adam::new(&sys.store, disc_ids.clone(), cfg.lr_discriminator as f32, BETA1, BETA2);

    let mut metrics = MetricsWriter::create(out_dir)?;
    let mut first_mel = None;
    let mut final_mel = None;

    for it in 0..cfg.max_iterations {
        let real = sample_batch(dataset, cfg.batch_size, cfg.segment_length, &mut train_rng)?;

        // Generation at the current parameters; the caches feed the G step.
        let (fake, dec_cache, codec_fwd) = match &sys.gen {
            GeneratorKind::Vocoder(v) => {
                let (logmel, _) = sys.mel.forward(&drop_channel(&real))?;
                let (fake, cache) = v.forward(&sys.store, &logmel, None)?;
                (fake, cache, None)
            }
            GeneratorKind::Codec(c) => {
                let (z, enc_cache) = c.encode(&sys.store, &real);
                let q = c.rvq.quantize(&sys.store, &z)?;
                let (fake, cache) = c.decode(&sys.store, &q.zq, None)?;
                (fake, cache, Some((z, enc_cache, q)))
            }
        };

        let l_d = d_step(&sys.disc, &mut sys.store, &mut opt_d, &real, &fake, it)?;

        let mut grads_g = GradStore::zeroed(&sys.store);
        let (l_adv, l_fm, mut dwave) = adversarial_signal(
            &sys.disc,
            &mut sys.store,
            &disc_ids,
            &mut grads_g,
            &real,
            &fake,
            cfg.weights.lambda_fm,
        )?;
        let (l_mel, dwave_mel) = mel_loss_grad(&sys.mel, &real, &fake)?;
        dwave.scaled_add(cfg.weights.lambda_mel as f32, &dwave_mel);

        let (d_input, _) = sys.gen.decoder().backward(&sys.store, &mut grads_g, &dec_cache, None, &dwave);
        let mut l_vq = 0.0f64;
        if let (GeneratorKind::Codec(c), Some((z, enc_cache, q))) = (&sys.gen, &codec_fwd) {
            let (vq, dz_commit) = c.rvq.vq_terms(&sys.store, &mut grads_g, z, q, VQ_BETA);
            l_vq = vq as f64;
            // Straight-through: the decoder gradient passes the quantizer
            // unchanged and picks up the commitment pull on the way.
            let dz = &d_input + &dz_commit;
            c.encoder.backward(&sys.store, &mut grads_g, enc_cache, &dz);
        }

        let l_g = generator_loss(l_adv, l_fm, l_mel, &cfg.weights) + l_vq;
        for (v, term) in [
            (l_adv, "adversarial"),
            (l_fm, "feature_matching"),
            (l_mel, "mel"),
            (l_vq, "vq"),
        ] {
            check_finite(v, it, term)?;
        }
        opt_g.step(&mut sys.store, &grads_g);

        metrics.row(it, l_d, 0.0, l_adv, l_fm, l_mel, l_g, 0.0, 0)?;
        if first_mel.is_none() {
            first_mel = Some(l_mel);
        }
        final_mel = Some(l_mel);
    }

    metrics.finish()?;
    let ids: Vec<ParamId> = sys.store.ids().collect();
    checkpoint::save_checkpoint(
        out_dir,
        &sys.store,
        &ids,
        cfg,
        &CheckpointMeta {
            mode: cfg.mode,
            iteration: cfg.max_iterations,
            watermark: None,
            pretrained_hash: None,
        },
    )?;
    Ok(PretrainReport { iterations: cfg.max_iterations, first_mel_loss: first_mel, final_mel_loss: final_mel })
}

/// Watermark fine-tuning on top of a pretrained checkpoint. Writes the full
/// adapter checkpoint (frozen base included) to `out_dir`.
pub fn finetune(
    cfg: &TrainingConfig,
    dataset: &Dataset,
    pretrained_dir: &Path,
    out_dir: &Path,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    check_dataset(cfg, dataset)?;
    let pre = checkpoint::load_checkpoint(pretrained_dir)?;
    ensure_compatible(cfg, &pre.config)?;

    let mut sys = FinetuneSystem::build(cfg, &mut seeded_rng(cfg.seed, INIT_STREAM))?;
    checkpoint::apply_tensors(&mut sys.store, &pre.tensors)?;
    let mut train_rng = seeded_rng(cfg.seed, TRAIN_STREAM);

    let gen_ids = sys.generator_param_ids();
    let disc_ids: Vec<ParamId> = sys.store.ids_with_prefix("disc.").collect();
    let wm_ids: Vec<ParamId> = {
        let mut v: Vec<ParamId> = sys.store.ids_with_prefix("wm_dec.").collect();
        v.extend(gen_ids.iter().copied());
        v
    };
    let mut opt_d =
        Adam::new(&sys.store, disc_ids.clone(), cfg.lr_discriminator as f32, BETA1, BETA2);
    let mut opt_wm = Adam::new(&sys.store, wm_ids, cfg.lr_watermark as f32, BETA1, BETA2);
    let mut opt_g = Adam::new(&sys.store, gen_ids.clone(), cfg.lr_generator as f32, BETA1, BETA2);
    let mut projector = if cfg.wgopo_enabled {
        Some(Projector::new(GradientLayout::from_params(&sys.store, &gen_ids)))
    } else {
        None
    };

    let mut metrics = MetricsWriter::create(out_dir)?;
    let mut final_acc = None;

    for it in 0..cfg.max_iterations {
        let real = sample_batch(dataset, cfg.batch_size, cfg.segment_length, &mut train_rng)?;
        let wms = sample_watermarks(&mut train_rng, cfg.payload_len, cfg.batch_size)?;
        let gen_out = sys.conditioned_forward(&real, &wms)?;

        let l_d = d_step(&sys.disc, &mut sys.store, &mut opt_d, &real, &gen_out.fake, it)?;

        // Extraction objective, evaluated at the same generator point as the
        // perceptual one below.
        let mut grads_wm = GradStore::zeroed(&sys.store);
        let (logmel_fake, mel_cache) = sys.mel.forward(&drop_channel(&gen_out.fake))?;
        let (logits, dec_cache) = sys.wm_decoder.forward(&sys.store, &logmel_fake)?;
        let (l_wm, dlogits) = watermark_loss_from_logits(&logits, &wms)?;
        check_finite(l_wm, it, "watermark")?;
        let dmel = sys.wm_decoder.backward(&sys.store, &mut grads_wm, &dec_cache, &dlogits);
        let dwave_wm = sys.mel.backward(&mel_cache, &dmel);
        sys.backward_conditioned(&mut grads_wm, &lift_channel(dwave_wm), &gen_out, &wms)?;
        let acc = batch_bit_accuracy(&logits, &wms);
        if let Some(p) = projector.as_mut() {
            p.capture_watermark_grad(&grads_wm)?;
        }

        // Perceptual objective against the just-updated discriminator.
        let mut grads_g = GradStore::zeroed(&sys.store);
        let (l_adv, l_fm, mut dwave) = adversarial_signal(
            &sys.disc,
            &mut sys.store,
            &disc_ids,
            &mut grads_g,
            &real,
            &gen_out.fake,
            cfg.weights.lambda_fm,
        )?;
        let (l_mel, dwave_mel) = mel_loss_grad(&sys.mel, &real, &gen_out.fake)?;
        dwave.scaled_add(cfg.weights.lambda_mel as f32, &dwave_mel);
        sys.backward_conditioned(&mut grads_g, &dwave, &gen_out, &wms)?;
        let l_g = generator_loss(l_adv, l_fm, l_mel, &cfg.weights);
        for (v, term) in [(l_adv, "adversarial"), (l_fm, "feature_matching"), (l_mel, "mel")] {
            check_finite(v, it, term)?;
        }

        opt_wm.step(&mut sys.store, &grads_wm);
        if let Some(p) = projector.as_mut() {
            p.project_generator_grads(&mut grads_g)?;
        }
        opt_g.step(&mut sys.store, &grads_g);

        let fired = projector.as_ref().map_or(0, |p| p.fired_count());
        metrics.row(it, l_d, l_wm, l_adv, l_fm, l_mel, l_g, acc, fired)?;
        final_acc = Some(acc);
    }

    metrics.finish()?;
    let ids: Vec<ParamId> = sys.store.ids().collect();
    checkpoint::save_checkpoint(
        out_dir,
        &sys.store,
        &ids,
        cfg,
        &CheckpointMeta {
            mode: cfg.mode,
            iteration: cfg.max_iterations,
            watermark: None,
            pretrained_hash: Some(pre.blob_hash.clone()),
        },
    )?;
    Ok(FinetuneReport {
        iterations: cfg.max_iterations,
        projection_fired: projector.as_ref().map_or(0, |p| p.fired_count()),
        final_batch_acc: final_acc,
    })
}

/// Rebuild a fine-tuned system from an adapter checkpoint directory.
pub fn load_finetuned(dir: &Path) -> Result<FinetuneSystem> {
    let chk = checkpoint::load_checkpoint(dir)?;
    if chk.manifest.watermark.is_some() {
        return Err(Error::Checkpoint(
            "this is a minted instance, not an adapter checkpoint".into(),
        ));
    }
    system_from_checkpoint(&chk)
}

/// Instantiate the full fine-tuned system an already-loaded adapter
/// checkpoint describes.
pub(crate) fn system_from_checkpoint(
    chk: &checkpoint::LoadedCheckpoint,
) -> Result<FinetuneSystem> {
    let mut sys = FinetuneSystem::build(&chk.config, &mut seeded_rng(chk.config.seed, INIT_STREAM))?;
    let applied = checkpoint::apply_tensors(&mut sys.store, &chk.tensors)?;
    if applied != sys.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint covers {applied} of {} parameters; it does not hold a fine-tuned system",
            sys.store.len()
        )));
    }
    Ok(sys)
}

fn check_dataset(cfg: &TrainingConfig, dataset: &Dataset) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Ingestion("dataset holds no clips".into()));
    }
    if dataset.sample_rate != cfg.mel.sample_rate {
        return Err(Error::Config(format!(
            "dataset is {} Hz but the config expects {} Hz",
            dataset.sample_rate, cfg.mel.sample_rate
        )));
    }
    Ok(())
}

/// Structural sections baked into the pretrained parameters must match the
/// fine-tune config; run lengths and rates are free to differ.
fn ensure_compatible(cfg: &TrainingConfig, pre: &TrainingConfig) -> Result<()> {
    if cfg.mode != pre.mode {
        return Err(Error::Checkpoint(format!(
            "checkpoint was pretrained in {} mode, config asks for {}",
            pre.mode, cfg.mode
        )));
    }
    let mut mismatch = None;
    if cfg.mel != pre.mel {
        mismatch = Some("mel");
    } else if cfg.disc != pre.disc {
        mismatch = Some("disc");
    } else if cfg.mode == Mode::Vocoder && cfg.vocoder != pre.vocoder {
        mismatch = Some("vocoder");
    } else if cfg.mode == Mode::Codec && cfg.codec != pre.codec {
        mismatch = Some("codec");
    }
    match mismatch {
        Some(section) => Err(Error::Checkpoint(format!(
            "[{section}] differs from the pretrained checkpoint's settings"
        ))),
        None => Ok(()),
    }
}

/// LSGAN discriminator update on one real/fake pair.
fn d_step(
    disc: &DiscriminatorSet,
    store: &mut ParamStore,
    opt: &mut Adam,
    real: &Array3<f32>,
    fake: &Array3<f32>,
    iteration: u64,
) -> Result<f64> {
    let (real_out, real_cache) = disc.forward(store, real);
    let (fake_out, fake_cache) = disc.forward(store, fake);
    let (l_d, dreal, dfake) = {
        let real_scores: Vec<&ArrayD<f32>> = real_out.iter().map(|o| &o.score).collect();
        let fake_scores: Vec<&ArrayD<f32>> = fake_out.iter().map(|o| &o.score).collect();
        adversarial_d_grads(&real_scores, &fake_scores)?
    };
    check_finite(l_d, iteration, "discriminator")?;
    let mut grads = GradStore::zeroed(store);
    disc.backward(store, &mut grads, &real_cache, &score_only(dreal));
    disc.backward(store, &mut grads, &fake_cache, &score_only(dfake));
    opt.step(store, &grads);
    Ok(l_d)
}

/// Adversarial + feature-matching generator signal. Returns both loss values
/// and the waveform gradient of `adv + lambda_fm * fm`. The discriminator is
/// marked untrainable for the backward so only the input gradient is built.
fn adversarial_signal(
    disc: &DiscriminatorSet,
    store: &mut ParamStore,
    disc_ids: &[ParamId],
    grads: &mut GradStore,
    real: &Array3<f32>,
    fake: &Array3<f32>,
    lambda_fm: f64,
) -> Result<(f64, f64, Array3<f32>)> {
    let (real_out, _) = disc.forward(store, real);
    let (fake_out, fake_cache) = disc.forward(store, fake);
    let (l_adv, dscores) = {
        let fake_scores: Vec<&ArrayD<f32>> = fake_out.iter().map(|o| &o.score).collect();
        adversarial_g_grads(&fake_scores)?
    };
    let real_feats: Vec<Vec<ArrayD<f32>>> = real_out.into_iter().map(|o| o.features).collect();
    let fake_feats: Vec<Vec<ArrayD<f32>>> = fake_out.into_iter().map(|o| o.features).collect();
    let (l_fm, dfeats) = feature_matching_grads(&real_feats, &fake_feats)?;

    let subgrads: Vec<SubGrad> = dscores
        .into_iter()
        .zip(dfeats)
        .map(|(dscore, df)| SubGrad {
            dscore,
            dfeatures: df.into_iter().map(|g| g.mapv(|v| v * lambda_fm as f32)).collect(),
        })
        .collect();

    for &id in disc_ids {
        store.set_trainable(id, false);
    }
    let dwave = disc.backward(store, grads, &fake_cache, &subgrads);
    for &id in disc_ids {
        store.set_trainable(id, true);
    }
    Ok((l_adv, l_fm, dwave))
}

fn score_only(dscores: Vec<ArrayD<f32>>) -> Vec<SubGrad> {
    dscores
        .into_iter()
        .map(|dscore| SubGrad { dscore, dfeatures: Vec::new() })
        .collect()
}

/// Hard-threshold agreement between decoder logits and the embedded payloads.
pub fn batch_bit_accuracy(logits: &Array2<f32>, wms: &[Watermark]) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (b, w) in wms.iter().enumerate() {
        for (j, &bit) in w.bits().iter().enumerate() {
            let pred = u8::from(logits[[b, j]] >= 0.0);
            correct += usize::from(pred == bit);
            total += 1;
        }
    }
    correct as f64 / total as f64
}

fn check_finite(value: f64, iteration: u64, term: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { iteration, term: term.into() })
    }
}

/// `(B, 1, T)` to `(B, T)`.
fn drop_channel(wave: &Array3<f32>) -> Array2<f32> {
    wave.index_axis(Axis(1), 0).to_owned()
}

/// `(B, T)` to `(B, 1, T)`.
fn lift_channel(x: Array2<f32>) -> Array3<f32> {
    x.insert_axis(Axis(1))
}

struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut out = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
        writeln!(
            out,
            "iteration,loss_d,loss_wm,loss_adv,loss_fm,loss_mel,loss_g,batch_acc,projection_fired"
        )?;
        Ok(Self { out })
    }

    #[allow(clippy::too_many_arguments)]
    fn row(
        &mut self,
        it: u64,
        l_d: f64,
        l_wm: f64,
        l_adv: f64,
        l_fm: f64,
        l_mel: f64,
        l_g: f64,
        acc: f64,
        fired: u64,
    ) -> Result<()> {
        writeln!(
            self.out,
            "{it},{l_d:.6e},{l_wm:.6e},{l_adv:.6e},{l_fm:.6e},{l_mel:.6e},{l_g:.6e},{acc:.6e},{fired}"
        )?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}
