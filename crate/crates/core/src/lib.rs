//! Deterministic federated-learning simulator.
//!
//! Hospitals train a small binary classifier on private synthetic data and a
//! central server aggregates their weights with one of three strategies:
//!
//! * `fedavg`: raw weights are uploaded and averaged.
//! * `dp`: Gaussian noise is added to each upload.
//! * `smc`: hospitals are grouped into equal clusters, split their weights
//!   into random convex shares for their cluster neighbours, and upload only
//!   the masked sums; the server still recovers the exact mean.
//!
//! Every transmission is logged, which lets [`audit`] count the
//! communication overhead and check what the server could have learned.

pub mod audit;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod params;
pub mod protocol;
pub mod rng;
pub mod sharing;

pub use error::{Error, ProtocolError, Result};
pub use params::WeightVector;
pub use protocol::{run_training, RunConfig, RunOptions, StrategyKind};
