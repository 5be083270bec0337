//! Token pipeline for streaming multi-camera navigation inference.
//!
//! * [`bats`] decides which historical frames survive a token budget.
//! * [`tvi`] builds the per-frame temporal/viewpoint indicator embeddings.
//! * [`organizer`] pools patch features and lays out token sequences.
//! * [`trajectory`] normalises waypoints and runs the planning head.
//! * [`metrics`] scores executed paths against references.
//! * [`cache`] persists coarse frame tokens.
//! * [`sim`] drives synthetic episodes end to end.

pub mod bats;
pub mod cache;
pub mod episode;
pub mod metrics;
pub mod organizer;
pub mod sim;
pub mod trajectory;
pub mod tvi;
pub mod types;
pub mod wire;

/// Tokens per frame after fine (8×8) pooling.
pub const FINE_TOKENS_PER_FRAME: usize = 64;
/// Tokens per frame after coarse (2×2) pooling.
pub const COARSE_TOKENS_PER_FRAME: usize = 4;

pub use bats::{DecayRate, SamplePlan, SamplingCurve};
pub use types::{CameraRig, CameraSpec, EmbodimentKind, TaskMode};
