//! Best-of-N rollout selection for computer-use agents.
//!
//! Rollouts are turned into behavior narratives (one fact list per
//! transition, extracted from marker-annotated screenshot pairs) and a
//! comparative judge picks the best candidate. The crate also ships the flat
//! baseline policy with its code agent, and a small simulated desktop for
//! offline runs.

pub mod agent;
pub mod augment;
pub mod prompts;
pub mod raster;
pub mod sim;
pub mod trajectory;
pub mod vlm;
pub mod judge;
pub mod narrative;
pub mod ensemble;
pub mod experiment;
pub mod metrics;
