//! Configuration, corpus handling, checkpoint files, the experiment pipeline
//! and report formats for the superposed-transformer toolkit.

pub mod artifacts;
pub mod config;
pub mod corpus;
pub mod pipeline;
pub mod report;
