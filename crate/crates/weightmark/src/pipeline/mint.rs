//! Minting: fold one payload's adapter delta into the base weights and save
//! the result as a standalone generator checkpoint.

use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::adapter::verify_merge_equivalence;
use crate::models::mel::MelAnalyzer;
use crate::models::vocoder::Conditioning;
use crate::nn::{ParamId, ParamStore};
use crate::pipeline::checkpoint::{self, CheckpointMeta};
use crate::pipeline::config::TrainingConfig;
use crate::pipeline::train::{
    plain_features, seeded_rng, system_from_checkpoint, FinetuneSystem, GeneratorKind,
};
use crate::watermark::Watermark;
use crate::{Error, Result};

/// Largest output deviation a merged instance may show against the adapter
/// path before it counts as broken.
pub const MERGE_TOL: f32 = 1e-5;

/// Probes are diagnostics only, so their stream is fixed rather than
/// configurable; the minted bytes do not depend on it.
const PROBE_SEED: u64 = 0x6d65_7267;
const PROBE_FRAMES: usize = 8;

/// Probe count used by [`mint`] itself.
pub const PROBE_COUNT: usize = 16;

#[derive(Debug)]
pub struct MintReport {
    /// SHA-256 of the instance's parameter blob.
    pub instance_hash: String,
    /// Largest |merged - conditioned| output sample over the probe set.
    pub max_merge_diff: f32,
}

/// A minted generator: base weights with one payload folded in for good.
pub struct InstanceSystem {
    pub store: ParamStore,
    pub cfg: TrainingConfig,
    pub gen: GeneratorKind,
    pub mel: MelAnalyzer,
    pub watermark: Watermark,
}

impl InstanceSystem {
    /// Regenerate audio through the merged generator. The payload rides in
    /// the weights; no conditioning is involved.
    pub fn synthesize(&self, wave: &Array3<f32>) -> Result<Array3<f32>> {
        let feats = plain_features(&self.gen, &self.store, &self.mel, wave)?;
        Ok(self.gen.decoder().forward(&self.store, &feats, None)?.0)
    }
}

/// Merge `w` into a copy of the adapter checkpoint at `adapter_dir` and save
/// the generator parameters to `out_dir`.
///
/// Re-minting the same payload from the same checkpoint is byte-identical.
pub fn mint(adapter_dir: &Path, w: &Watermark, out_dir: &Path) -> Result<MintReport> {
    let (chk, sys) = load_adapter_system(adapter_dir)?;
    check_payload(&sys, w)?;

    let svec = sys.wm_encoder.encode(&sys.store, w)?;
    let mut merged = sys.store.clone();
    sys.adapters.merge(&mut merged, svec.view())?;

    let max_merge_diff = probe_merge(&sys, &merged, &svec, PROBE_COUNT)?;

    let adapter_ids = sys.adapters.param_ids();
    let ids: Vec<ParamId> = merged
        .ids_with_prefix(sys.gen.prefix())
        .filter(|id| !adapter_ids.contains(id))
        .collect();
    checkpoint::save_checkpoint(
        out_dir,
        &merged,
        &ids,
        &sys.cfg,
        &CheckpointMeta {
            mode: sys.cfg.mode,
            iteration: chk.manifest.iteration,
            watermark: Some(w.clone()),
            pretrained_hash: chk.manifest.pretrained_hash.clone(),
        },
    )?;
    let instance_hash = checkpoint::blob_hash(out_dir)?;
    Ok(MintReport { instance_hash, max_merge_diff })
}

fn load_adapter_system(adapter_dir: &Path) -> Result<(checkpoint::LoadedCheckpoint, FinetuneSystem)> {
    let chk = checkpoint::load_checkpoint(adapter_dir)?;
    if chk.manifest.watermark.is_some() {
        return Err(Error::Checkpoint(
            "cannot mint from a minted instance; use the adapter checkpoint".into(),
        ));
    }
    let sys = system_from_checkpoint(&chk)?;
    Ok((chk, sys))
}

fn check_payload(sys: &FinetuneSystem, w: &Watermark) -> Result<()> {
    if w.len() != sys.cfg.payload_len {
        return Err(Error::PayloadShape(format!(
            "payload has {} bits, the checkpoint embeds {}",
            w.len(),
            sys.cfg.payload_len
        )));
    }
    Ok(())
}

/// Merge `w` in memory and report the largest probe deviation between the
/// conditioned and merged paths, without writing anything.
pub fn verify_merge(adapter_dir: &Path, w: &Watermark, n_probes: usize) -> Result<f32> {
    let (_, sys) = load_adapter_system(adapter_dir)?;
    check_payload(&sys, w)?;
    let svec = sys.wm_encoder.encode(&sys.store, w)?;
    let mut merged = sys.store.clone();
    sys.adapters.merge(&mut merged, svec.view())?;
    probe_merge(&sys, &merged, &svec, n_probes)
}

/// Compare the merged weights against the conditioned adapter path on random
/// generator inputs.
fn probe_merge(
    sys: &FinetuneSystem,
    merged: &ParamStore,
    svec: &ndarray::Array1<f32>,
    n_probes: usize,
) -> Result<f32> {
    let channels = match &sys.gen {
        GeneratorKind::Vocoder(_) => sys.cfg.vocoder.n_mels,
        GeneratorKind::Codec(_) => {
            sys.cfg.codec.as_ref().map(|c| c.latent_dim).unwrap_or_default()
        }
    };
    let mut rng = seeded_rng(PROBE_SEED, 0);
    let probes: Vec<Array3<f32>> = (0..n_probes)
        .map(|_| {
            let mut p = Array3::<f32>::zeros((1, channels, PROBE_FRAMES));
            p.mapv_inplace(|_| rng.sample(StandardNormal));
            p
        })
        .collect();
    let dec = sys.gen.decoder();
    let cond = Conditioning { set: &sys.adapters, s: svec };
    // Probes match the decoder geometry by construction, so a forward can
    // only fail on an internal invariant break.
    verify_merge_equivalence(
        |x| dec.forward(&sys.store, x, Some(&cond)).expect("probe forward").0,
        |x| dec.forward(merged, x, None).expect("probe forward").0,
        &probes,
    )
}

/// Load a minted instance directory.
pub fn load_instance(dir: &Path) -> Result<InstanceSystem> {
    let chk = checkpoint::load_checkpoint(dir)?;
    let Some(wm_text) = &chk.manifest.watermark else {
        return Err(Error::Checkpoint(
            "checkpoint carries no payload stamp; it is not a minted instance".into(),
        ));
    };
    let watermark = Watermark::parse(wm_text)?;

    let cfg = chk.config.clone();
    cfg.validate()?;
    let mut store = ParamStore::new();
    let gen = GeneratorKind::build(&mut store, &mut seeded_rng(cfg.seed, 0), &cfg)?;
    let applied = checkpoint::apply_tensors(&mut store, &chk.tensors)?;
    if applied != store.len() {
        return Err(Error::Checkpoint(format!(
            "instance covers {applied} of {} generator parameters",
            store.len()
        )));
    }
    let mel = MelAnalyzer::new(cfg.mel.clone())?;
    Ok(InstanceSystem { store, cfg, gen, mel, watermark })
}
