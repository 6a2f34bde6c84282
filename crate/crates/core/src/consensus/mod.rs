pub mod classical;
pub mod lh;
pub mod message;
pub mod raft;
