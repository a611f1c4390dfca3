//! Decoupled queue-notify reader-writer locks for disaggregated memory,
//! built on a deterministic simulation of one-sided RDMA verbs.

// `!(x >= 0.0)` style checks reject NaN config values on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod bench;
pub mod checker;
pub mod cql;
pub mod fabric;
pub mod hier;
pub mod node;
pub mod record;
pub mod reset;
