//! Dataset ingestion, scoring, and checks against published result tables.

pub mod convert;
pub mod dataset;
pub mod metrics;
pub mod tables;
