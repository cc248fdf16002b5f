//! Domain self-specialization toolkit: seed pools, BM25 retrieval, instruction
//! and response generation against pluggable model backends, contrastive
//! refinement, training-data export and a k-shot evaluation harness.

pub mod backend;
pub mod config;
pub mod contrastive;
pub mod dataset;
pub mod decode;
pub mod eval;
pub mod index;
pub mod instruct;
pub mod pipeline;
pub mod respond;
pub mod seeds;
pub mod stats;
