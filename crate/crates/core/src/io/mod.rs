//! On-disk formats: GT1 tensors, checkpoints, synthetic datasets, SVG plots
//! and the run log.

pub mod checkpoint;
pub mod gt1;
pub mod plot;
pub mod runlog;
pub mod synth;
