//! Hierarchical conversational memory with tree-structured retrieval
//! rollouts, dual-scale advantages and hindsight credit assignment for
//! construction actions.

pub mod construction;
pub mod db;
pub mod embedding;
pub mod memory;
pub mod policy;
pub mod retrieval;
pub mod rng;
pub mod metrics;
pub mod mot;
pub mod hindsight;
pub mod toy;
pub mod eval;
