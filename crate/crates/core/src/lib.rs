//! ContrastVAE: a two-branch contrastive variational autoencoder for
//! next-item sequential recommendation.
//!
//! The crate is organized along the pipeline: [`numerics`] provides tensors
//! with reverse-mode autodiff and Adam; [`data`] ingests interaction logs
//! and builds leave-one-out splits; [`model`] is the twin-encoder network
//! with its three augmentation strategies; [`objective`] composes the
//! two-view loss; [`engine`] runs training with early stopping and
//! checkpoints; [`evaluation`] produces full-ranking metrics, subgroup
//! tables, and posterior diagnostics.

pub mod data;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod rng;
