//! Federated sparse-training simulator.
//!
//! Implements a two-phase protocol for communication-efficient federated
//! learning: clients score every connection of a common initialization
//! against their local data, the server aggregates the scores into one
//! global top-k mask, and training then exchanges only the sparse masked
//! gradients — plus a dense FedAvg baseline and exact byte accounting for
//! both.
//!
//! Module map:
//! - [`nn`]: flat-parameter MLP (optional conv stem) with exact backprop
//! - [`saliency`]: weight-times-gradient scoring at initialization
//! - [`masking`]: score aggregation, global top-k mask, gradient masking
//! - [`codec`]: sparse/dense gradient wire formats with byte-exact sizes
//! - [`protocol`]: server/client state machines over pluggable transports
//! - [`harness`]: datasets, partitioning, experiment driver, CSV metrics

pub mod codec;
pub mod error;
pub mod harness;
pub mod masking;
pub mod nn;
pub mod protocol;
pub mod saliency;
pub mod util;

pub use codec::SparseGrad;
pub use error::{Error, Result};
pub use harness::ExperimentConfig;
pub use masking::GlobalMask;
pub use nn::{Architecture, Batch, GradVector, ParamVector};
pub use protocol::{Protocol, RoundMetrics, Session, WireMode};
pub use saliency::SaliencyScores;
