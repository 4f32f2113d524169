//! RL-gated retrieval for FAQ chatbots.
//!
//! The crate trains a contrastive retrieval scorer over a FAQ corpus, trains
//! a fetch/no-fetch gating policy by policy gradient against a deterministic
//! reward oracle, and measures LLM-token savings of gating strategies on
//! scripted chat sessions. Everything is seeded and reproducible; the
//! `parallel` feature (default) fans data-parallel loops out over rayon
//! without changing any numeric result.

pub mod corpus;
pub mod embedding;
pub mod error;
pub mod exec;
pub mod fixtures;
pub mod gate;
pub mod pipeline;
pub mod policy;
pub mod seeds;
pub mod util;

pub use error::{Error, Result};
