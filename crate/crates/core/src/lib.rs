//! Multi-turn agent rollout orchestration.
//!
//! Trajectories interleave prompt, model response and observation segments;
//! only response tokens carry loss. Chains run concurrently, call tools
//! through a registry, and bind stateful tools to pooled environment
//! instances by chain ID. Rewards are evaluated per chain and the advantage
//! estimators consume the resulting masked batches.
//!
//! Without the default `runtime` feature only the pure parts build
//! (trajectories, estimators, parsing, the in-process environments), which
//! is what the browser demo uses.

pub mod algorithms;
#[cfg(feature = "runtime")]
pub mod envpool;
pub mod envs;
pub mod rewards;
pub mod rollout;
pub mod tools;
pub mod trajectory;
