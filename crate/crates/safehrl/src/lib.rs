//! Safety-certified hierarchical multi-agent reinforcement learning.
//!
//! Agents pick interpretable skills with a learned high-level policy. Each skill
//! runs through a CBF/CLF quadratic program whose feasibility certifies that
//! every barrier stays nonnegative over the step.

pub mod barriers;
pub mod config;
pub mod dynamics;
pub mod learn;
pub mod harness;
pub mod qpcore;
pub mod skills;
pub mod smdp;
pub mod worlds;
