pub mod cli;
pub mod config;
pub mod data;
pub mod graph;
pub mod instrument;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod trainer;
