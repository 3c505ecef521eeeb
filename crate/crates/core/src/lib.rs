//! Two-stage retrieval-augmented extraction of amino-acid mutations from
//! scientific publications.
//!
//! The crate is organised around the stages of the pipeline:
//!
//! * [`corpus`] loads publications and ground truth and splits full text into
//!   overlapping character windows.
//! * [`embedding`] turns text into dense vectors (remote endpoint or a
//!   deterministic token-bag mock).
//! * [`vectorstore`] keeps the abstract and full-text datastores and answers
//!   exact thresholded top-k cosine queries.
//! * [`mutation`] parses and normalises `<orig><pos><changed>` substitutions.
//! * [`pipeline`] runs zero-shot, single-stage RAG and the two-stage method.
//! * [`evaluation`] scores runs, aggregates, tests distance distributions and
//!   sweeps hyperparameters.

pub mod corpus;
pub mod datastore;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod http;
pub mod mutation;
pub mod parallel;
pub mod pipeline;
pub mod synthetic;
pub mod vectorstore;

pub use error::{Error, Result};
