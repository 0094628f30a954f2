//! Multi-task cardiac analysis directly from undersampled k-space.
//!
//! The crate covers the full desk-scale workflow: a synthetic dynamic cardiac
//! phantom cohort, the k-space acquisition model, patch tokenization, masked
//! autoencoder pretraining in both domains, contrastive alignment of the
//! k-space encoder to the image encoder, and task heads fine-tuned on
//! undersampled k-space alone.

pub mod align;
pub mod array_io;
pub mod backbone;
pub mod error;
pub mod heads;
pub mod kspace;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod tokenizer;

pub use error::{KmtrError, Result};
