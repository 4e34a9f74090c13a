//! Core algorithms for count- and layout-consistent image editing on a
//! synthetic shape-scene domain.
//!
//! Everything in this crate is pure computation over heap-allocated arrays:
//! a small pixel-space denoising backbone with a deterministic DDIM sampler,
//! the harmony attention module that fuses count-carrying text features into
//! visual features, the dual-branch injection attention, seed search and
//! selection, an exact blob-counting scorer, benchmark scene generation, and
//! the OCA/AP evaluation metrics. File formats, image IO, and the command
//! line live in the companion `harmony-cli` crate.
//!
//! The crate is `no_std` (with `alloc`); all transcendental math goes through
//! `libm` so results are identical across builds.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod backbone;
pub mod config;
pub mod encoders;
pub mod error;
pub mod harmony;
pub mod inject;
pub mod math;
pub mod metrics;
pub mod nn;
pub mod pns;
pub mod rng;
pub mod scene;
pub mod schedule;
pub mod scorer;
pub mod tensor;
pub mod train;

pub use config::{AblationVariant, BlockSite, HarmonyConfig, InjectMode, TrainConfig};
pub use error::{ContractError, HarmonyError};
pub use tensor::{FeatureMap, LatentImage};
