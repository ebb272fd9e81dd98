//! Core library for a prompt-testing harness: it extracts input/output
//! specifications from a prompt used as a software artifact, generates
//! rule-targeted and baseline test inputs, executes them across models
//! through a caching gateway, judges output compliance, and computes
//! the quality metrics that the reporting layer renders.

pub mod evaluators;
pub mod extractor;
pub mod gateway;
pub mod generator;
pub mod metrics;
pub mod prompt_store;
pub mod reporting;
pub mod run_store;
pub mod runner;
