//! Competition hosting: registration, ingestion, evaluation, aggregation,
//! HTTP server and command-line client.

pub mod aggregator;
pub mod audit;
pub mod cli;
pub mod clock;
pub mod config;
pub mod evaluation;
pub mod formats;
pub mod fsutil;
pub mod ingestion;
pub mod platform;
pub mod registry;
pub mod server;
pub mod snapshots;
pub mod verification;

#[cfg(test)]
pub(crate) mod testutil;
