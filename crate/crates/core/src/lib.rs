//! Reinforcement learning for action-chunked token policies.
//!
//! The crate bundles the pieces needed to train a policy that emits chunks
//! of tokenized actions with PPO or GRPO, and to schedule the rollout and
//! training components over a set of resource slots:
//!
//! - [`types`] and [`granularity`]: shared data and the advantage /
//!   log-probability granularity rules,
//! - [`envsim`]: vectorized toy environments with chunked stepping,
//! - [`rollout`]: partitioned collection that any schedule reproduces exactly,
//! - [`policy`]: the token policy with value heads and exact gradients,
//! - [`advantage`]: GAE, group-relative advantages, masks, filters,
//! - [`optim`]: loss assembly and the update loop,
//! - [`placement`]: component placement, pipelining and the virtual clock,
//! - [`harness`]: configuration, training driver, benchmarks and oracles.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::type_complexity
)]

pub mod advantage;
pub mod envsim;
pub mod granularity;
pub mod harness;
pub mod optim;
pub mod oracle;
pub mod placement;
pub mod policy;
pub mod rollout;
pub mod types;
