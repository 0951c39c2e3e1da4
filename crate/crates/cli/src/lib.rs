//! Pipeline driver behind the `reviewtune` binary.

pub mod config;
pub mod pipeline;
pub mod stages;
