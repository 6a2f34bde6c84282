pub mod global;
pub mod log;
pub mod merge;
