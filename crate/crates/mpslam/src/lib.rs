//! Multipath-based SLAM from frequency-domain radio snapshots.
//!
//! The crate has two halves that share one signal model:
//!
//! * a channel simulator — mirror-image geometry, single-bounce specular ray
//!   tracing and Swerling-1 (Rayleigh block-fading) snapshot synthesis — and
//! * a belief-propagation estimator that tracks the mobile agent, a map of
//!   physical/virtual anchors with Bernoulli existence, and the noise level,
//!   directly from the raw snapshots (no intermediate detection stage).
//!
//! [`harness`] ties both halves into a reproducible experiment pipeline
//! (simulate → infer → evaluate) driven by the `mpslam` binary.

pub mod config;
pub mod dynamics;
pub mod harness;
pub mod inference;
pub mod metrics;
pub mod scene;
pub mod signal;

/// Propagation speed used to convert geometric distances to delays [m/s].
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
