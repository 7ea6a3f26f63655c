//! Detection of anomalous IoT TCP communications with per-device sparse
//! autoencoders.
//!
//! The pipeline: packets are grouped into bidirectional flows
//! ([`flow`]), each flow is summarized by 16 packet-size and inter-arrival
//! statistics ([`features`]), one sparse autoencoder per device type learns
//! the legitimate profile ([`sae`], [`model`]) and gets a reconstruction-error
//! threshold ([`calibration`]), and the [`ensemble`] flags a flow only when
//! every device model rejects it. [`eval`] cross-validates the whole thing
//! on labeled corpora.

pub mod calibration;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod exec;
pub mod features;
pub mod flow;
pub mod model;
pub mod sae;
pub mod stats;

pub use error::{Error, Result};
