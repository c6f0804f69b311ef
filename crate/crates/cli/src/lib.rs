//! Training and evaluation harness around the detection core: run
//! configuration, the optimizer and schedule, the training loop, metrics,
//! finite-difference gradient verification, ablation sweeps, and rendering.

pub mod ablate;
pub mod config;
pub mod evaluate;
pub mod gradcheck;
pub mod optim;
pub mod render;
pub mod schedule;
pub mod train;
