//! Core algorithms for long-horizon ego-exo video object correspondence.
//!
//! The crate is organised around six pieces:
//!
//! * [`numerics`] — dense feature maps and the small layer zoo (linear,
//!   3x3 convolution, pooling, broadcasting) everything else is built on.
//! * [`moe`] — the gated two-input fusion block with hand-derived
//!   reverse-mode gradients and a finite-difference checker.
//! * [`memory`] — per-view token banks with bounded capacity and
//!   pluggable compression policies for long streams.
//! * [`readout`] — attention over stored tokens that turns a query
//!   feature map into a segmentation mask and a confidence score.
//! * [`metrics`] — mask overlap, localisation, and boundary quality
//!   measures plus their aggregation over streams.
//! * [`harness`] — a synthetic two-view stream generator and the
//!   ablation, training, and sweep drivers used by the test suite and
//!   the command-line tools.
//!
//! Everything in this crate is deterministic and `no_std`-compatible
//! (allocation is required). IO, file formats, and the command-line
//! front end live in the companion `eec-cli` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod error;
pub mod harness;
pub mod memory;
pub mod metrics;
pub mod moe;
pub mod numerics;
pub mod readout;

pub use error::{Error, Result};
pub use harness::{
    GateKind, PolicyOutcome, StreamRecord, StreamSpec, SweepCell, ToyTaskSpec, TrainReport,
    ViewTransform,
};
pub use memory::{CompressionPolicy, DualMemory, MemoryBank, MemoryEntry, Token, View};
pub use metrics::{FramePairResult, Mask, MetricSummary};
pub use moe::{FuseCache, GradCheckConfig, GradCheckReport, MoeGradients, MoeParams};
pub use numerics::{ChannelVector, Conv3x3, FeatureMap, Linear, SpatialMap};
pub use readout::ReadoutConfig;
