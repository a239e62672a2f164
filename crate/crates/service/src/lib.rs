//! Command-line front end and review HTTP API for the annotation pipeline.

pub mod api;
pub mod cli;
pub mod store;
pub mod workspace;
