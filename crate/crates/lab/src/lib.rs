//! Runner for the vision-token compression lab: experiment configs,
//! checkpoints, JSON reports, benchmarks and the `vrlab` command line.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod experiments;
pub mod report;

pub use vrlab_core;
