//! Deterministic simulator and federated-learning framework for proactive
//! handover in mmWave vehicular networks.
//!
//! The crate is organised bottom-up:
//!
//! - [`topology`]: region geometry (SBS rows, roads, obstacles) and LOS/NLOS classification
//! - [`channel`]: pathloss, correlated shadowing, per-frame SNR and the measurement filter
//! - [`mobility`]: vehicle trajectories and Poisson arrivals
//! - [`dataset`]: SNR traces, observation windows, oracle labels and train/test sets
//! - [`neural`]: a from-scratch sigmoid/softmax perceptron trained with SGD
//! - [`federated`]: local updates, batch and running aggregation, offline and online rounds
//! - [`handover`]: reactive and proactive policy replay, metrics and uplink cost
//!
//! Every stochastic entry point takes an explicit seed or RNG stream, so a
//! single master seed reproduces every artifact.

// Negated comparisons are how NaN parameters get rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod dataset;
pub mod error;
pub mod federated;
pub mod handover;
pub mod mobility;
pub mod neural;
pub mod rng;
pub mod topology;

pub use channel::{ChannelParams, SnrTrace};
pub use dataset::{Dataset, Sample, Scenario, Split, WindowConfig};
pub use error::{Error, Result};
pub use federated::{AggregationMode, FlConfig, GroupMix, RoundLog, StoragePolicy, World};
pub use handover::{HandoverMetrics, PolicyKind, PolicySpec};
pub use mobility::{MobilityConfig, Trajectory};
pub use neural::{Classifier, MlpParams, Standardizer, TrainConfig};
pub use rng::RngStream;
pub use topology::{LinkState, Point, Rect, RegionTopology, Road, TopologyConfig};
