//! Training, evaluation, prediction, plotting and ablation drivers.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod optim;
pub mod plot;
pub mod predict;
pub mod train;
