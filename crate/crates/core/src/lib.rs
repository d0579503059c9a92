//! Document lifecycle, retrieval, generation, and operations for a
//! retrieval-augmented question answering service.

pub mod clock;
pub mod config;
pub mod coverage;
pub mod datalake;
pub mod engine;
pub mod evaluation;
pub mod guardrails;
pub mod ingestion;
pub mod observability;
pub mod pipeline;
pub mod retrieval;
pub mod rollout;
pub mod text;
pub mod verification;
