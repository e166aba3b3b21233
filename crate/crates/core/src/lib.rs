//! Discovery of demographic bias associations in LLM-generated stories.

pub mod corpus;
pub mod eval;
pub mod exclusivity;
pub mod extraction;
pub mod gateway;
pub mod jsonl;
pub mod metrics;
pub mod pipeline;
pub mod prompts;
pub mod report;
pub mod stats;
pub mod taxonomy;
pub mod unify;
