//! Location-aware hierarchical Raft with threshold-signature leader
//! confirmation, plus a deterministic discrete-event simulator and a
//! classical Raft baseline for comparison.

pub mod bench;
pub mod cgf;
pub mod consensus;
pub mod crypto;
pub mod geo;
pub mod ids;
pub mod replication;
pub mod reputation;
pub mod scenario;
pub mod sim;

pub use ids::{Layer, NodeId, SubLayer, Term, Tick};
