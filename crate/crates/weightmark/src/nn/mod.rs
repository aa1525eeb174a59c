//! Minimal neural-network engine: a central parameter store, manually
//! differentiated layers, and Adam.
//!
//! Layers hold [`ParamId`]s instead of owning tensors, so the same parameters
//! can be frozen, optimized by disjoint optimizers, or merged in place without
//! fighting the borrow checker. Forward passes return explicit caches that the
//! matching backward pass consumes.

pub mod adam;
pub mod conv;
pub mod init;
pub mod layers;
pub mod ops;
pub mod store;

pub use adam::Adam;
pub use store::{GradStore, ParamId, ParamMeta, ParamStore};
