//! Simulation of buffered asynchronous federated learning (FedBuff) with
//! server momentum, and the momentum-approximation correction for the
//! implicit momentum that staleness introduces.
//!
//! The crate is organised bottom-up:
//!
//! * [`linalg`]: dense and packed lower-triangular matrices, SVD, minimum-norm least squares.
//! * [`staleness`]: delay distributions, staleness bounds and the matrix `W`.
//! * [`momentum`]: the momentum matrix `M`, the full and light-weight solvers, diagnostics.
//! * [`optimizers`]: FedAvg, FedAvgM and FedAdam server rules.
//! * [`privacy`]: the Gaussian mechanism over model deltas and version one-hots.
//! * [`tasks`]: the heterogeneous quadratic task and the optimization-gap bounds.
//! * [`engine`]: the tick-based protocol loop.
//! * [`diagnose`]: offline analysis of a staleness matrix.
//! * [`config`] and [`sweep`]: run configs, grids and the CLI plumbing.

pub mod config;
pub mod diagnose;
pub mod engine;
pub mod linalg;
pub mod momentum;
pub mod optimizers;
pub mod privacy;
pub mod rng;
pub mod staleness;
pub mod sweep;
pub mod tasks;
