//! Semantic regularization of a speech-translation encoder toward a frozen
//! sentence-embedding space, with the training and evaluation tooling
//! needed to measure its effect at small scale.
//!
//! The training graph is encoder -> CTC head plus encoder -> semantic head;
//! the objective is `seq + lambda * semantic`. At inference the semantic
//! head is removed and decoding is unchanged.

pub mod corpus;
pub mod embedder;
pub mod evalmetrics;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod plot;
pub mod trainer;
