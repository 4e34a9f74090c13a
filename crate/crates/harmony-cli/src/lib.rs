//! File formats, IO, parallel drivers, and the evaluation harness for the
//! harmony editing toolkit. The algorithms live in `harmony-core`; this
//! crate owns everything that touches the filesystem or threads.

pub mod checkpoint;
pub mod evalrun;
pub mod imgio;
pub mod manifest;
pub mod parallel;
pub mod poolstore;
pub mod runcfg;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointStage};
