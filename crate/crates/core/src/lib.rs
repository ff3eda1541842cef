//! Desk-scale laboratory for model-free direct load control of a
//! heterogeneous cluster of thermostatically controlled loads.
//!
//! The crate simulates the cluster's partially observable thermal dynamics
//! ([`sim`]), aggregates it into state-of-charge histograms ([`aggregation`]),
//! learns a cost-minimizing dispatch policy with fitted Q-iteration on a
//! convolutional state-time feature extractor ([`neuralnet`], [`fqi`]),
//! splits the aggregate action across devices through an auction ([`dispatch`]),
//! and scores the learned policy against a perfect-information optimum
//! ([`benchmark`]). The [`harness`] module wires everything into reproducible
//! multi-day experiments.

pub mod aggregation;
pub mod benchmark;
pub mod dispatch;
mod error;
pub mod fqi;
pub mod harness;
mod linalg;
pub mod neuralnet;
pub mod sim;

pub use aggregation::{AugmentedState, BinVector, HistoryRing, StateTimeGrid, SupportPoints};
pub use error::{Error, Result};
pub use neuralnet::{InputEncoder, QNetwork, QNetworkConfig};
pub use sim::{ExogenousSeries, GainProcess, PriceSeries, TclParameters, TclState};
