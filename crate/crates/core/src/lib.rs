//! Advertiser-level content-policy classification.
//!
//! The crate is organized along the processing funnel:
//!
//! - [`corpus`]: ingest ads and advertisers from JSONL
//! - [`funnel`]: pick the advertisers most likely over-flagged by the ad-level classifier
//! - [`profiler`]: bucket, aggregate and deduplicate an advertiser's content
//! - [`promptkit`]: render the classification prompt and parse the answer
//! - [`llm_gateway`]: HTTP and mock model backends
//! - [`eval`]: dataset splits and good-advertiser metrics
//! - [`triage`]: error binning, revision ledger and holdout discipline
//! - [`store`]: append-only run logs and triage records on disk
//! - [`pipeline`]: the end-to-end run wiring the stages together
//! - [`config`]: the single JSON configuration document

pub mod config;
pub mod corpus;
pub mod eval;
pub mod funnel;
pub mod llm_gateway;
pub mod pipeline;
pub mod profiler;
pub mod promptkit;
pub mod store;
pub mod triage;

pub use corpus::{AdRecord, AdvertiserRecord, Corpus, Label, LabelSource};
pub use eval::{ConfusionMatrix, EvalReport, Split};
pub use profiler::ContentProfile;
pub use promptkit::{PolicySpec, PromptTemplate, RenderedPrompt, Verdict};
pub use store::Store;
