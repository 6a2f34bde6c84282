pub mod engine;
pub mod latency;
pub mod metrics;
pub mod observer;
pub mod runner;
pub mod world;
