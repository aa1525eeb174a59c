//! End-to-end flows: configuration, data handling, training loops,
//! checkpointing, and instance minting.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod mint;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, CheckpointMeta};
pub use config::{load_config, parse_config, save_config, Mode, TrainingConfig};
pub use data::{ingest_audio, sample_batch, synthetic_dataset, Dataset};
pub use mint::{load_instance, mint, verify_merge, InstanceSystem, MintReport, MERGE_TOL, PROBE_COUNT};
pub use train::{
    finetune, load_finetuned, pretrain, BaseSystem, FinetuneReport, FinetuneSystem,
    GeneratorKind, PretrainReport,
};
