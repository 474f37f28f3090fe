//! Joint intent and slot-filling NLU toolkit with a managed training platform.
//!
//! Layers, bottom up:
//! - [`ir`]: utterances, tokens with Unicode-scalar offsets, slot spans and BIO tags.
//! - [`convert`]: CoNLL, intent JSON and keyphrase JSONL importers and exporters.
//! - [`models`]: averaged-perceptron intent classifier and BIO-constrained slot tagger.
//! - [`eval`]: slot and intent metrics, confusion matrices with drill-down.
//! - [`store`] and [`artifacts`]: versioned object storage and typed artifacts on top of it.
//! - [`worker`]: executes one job spec against a store.
//! - [`scheduler`]: job queue, instance pool, retries and autoscaling.
//! - [`gateway`]: REST server, blocking client and platform wiring.
//! - [`cli`]: the `nluforge` command line.

pub mod artifacts;
pub mod cli;
pub mod convert;
pub mod eval;
pub mod gateway;
pub mod ir;
pub mod models;
pub mod scheduler;
pub mod store;
pub mod worker;
