//! Multi-modal masked autoencoding over RGB, depth and semantic-segmentation
//! rasters.
//!
//! A Dirichlet sampler picks how many visible tokens each modality
//! contributes, a Transformer encoder sees only those visible tokens plus a
//! learned global token, and shallow per-task decoders reconstruct the masked
//! patches of every target task (RGB, per-patch standardized RGB, depth,
//! semantic segmentation). Everything runs on a small reverse-mode tensor
//! engine, trains with AdamW under a warmup + cosine schedule, and is
//! deterministic given a seed.
//!
//! Entry points:
//! - [`tensor`]: the autodiff tape.
//! - [`tokenize`]: rasters to positioned token sequences.
//! - [`mask`]: Dirichlet mask plans.
//! - [`model`]: encoder, decoders, pre-training and transfer forwards,
//!   single-modal ViT export.
//! - [`loss`]: masked-only losses with equal task weighting.
//! - [`train`]: the optimization loop and checkpoints.
//! - [`data`]: synthetic coupled-modality scenes, augmentation, file formats.
//! - [`cli`]: the `multimae` command implementations.
//!
//! The `examples/` directory has one runnable program per capability; start
//! with `cargo run --example pretrain_tiny`.

pub mod check;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod loss;
pub mod mask;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod tokenize;
pub mod train;
pub mod viz;
