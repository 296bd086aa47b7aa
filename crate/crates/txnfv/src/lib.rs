//! Transactional state management for virtualized network functions.
//!
//! Packet-triggered state accesses are modelled as atomic transactions. Each
//! batch of transactions is resolved into a task precedence graph (TPG) whose
//! edges capture temporal (TD), parametric (PD) and logical (LD) dependencies
//! between state access operations. Worker threads then explore the graph
//! under a pluggable strategy and execute operations against a multi-versioned
//! state table that supports rollback of failed transactions.
//!
//! The crate also ships the pieces needed to evaluate the engine end to end:
//! three simulated network functions ([`vnf`]), a deterministic trace
//! generator ([`workload`]), reference executors ([`baselines`]) and a batch
//! pipeline ([`pipeline`]) that ties everything together for the
//! `txnfv-bench` harness.

pub mod audit;
pub mod baselines;
pub mod error;
pub mod metrics;
pub mod model;
pub mod mvcc;
pub mod pipeline;
pub mod scheduler;
pub mod tpg;
pub mod vnf;
pub mod workload;

pub use error::{Error, Result};
