//! Contrastive text-to-label-embedding matching.
//!
//! Texts and labels share one word embedding table. A CNN encodes a text
//! into a single vector, labels are the mean of their word vectors, and a
//! small matcher network scores every (text, label) pair with a match
//! probability. Training on words sampled from the text itself
//! (self-supervised pseudo labels) pretrains the whole network, including
//! the matcher, so that real labels can be scored zero-shot afterwards.

pub mod error;
pub mod corpus;
pub mod embeddings;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod sampler;
pub mod trainer;

pub use error::{CheckpointError, Error, Result};
