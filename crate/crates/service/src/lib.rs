//! Command line and HTTP front ends for the trocar planning engine.

pub mod api;
pub mod cli;
pub mod files;
