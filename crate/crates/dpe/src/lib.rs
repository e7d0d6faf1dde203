//! Subword segmentation toolkit built around dynamic programming encoding (DPE).
//!
//! The crate treats the subword segmentation of a string as a latent variable:
//! a character-context scorer assigns probabilities to subwords, the [`dp`]
//! module marginalizes over all segmentations of a string exactly (and finds
//! the maximum-posterior segmentation by Viterbi decoding), and the [`trainer`]
//! module fits the scorer by gradient ascent on the log marginal likelihood of
//! a parallel corpus. Baseline greedy BPE and stochastic BPE-dropout encoders
//! live in [`bpe`], and [`analysis`] compares segmenter outputs over a corpus.
//!
//! The `dpe` binary exposes the full pipeline: `train-bpe`, `train-scorer`,
//! `segment`, `emit`, and `analyze` subcommands.

pub mod analysis;
pub mod bpe;
pub mod corpus;
pub mod dp;
pub mod lattice;
pub mod logmath;
pub mod pipeline;
pub mod scorer;
pub mod segmentation;
pub mod trainer;
pub mod vocab;

pub use bpe::{DropoutConfig, MergeTable};
pub use dp::{log_marginal, viterbi_segment};
pub use scorer::{ScorerParams, SubwordScorer};
pub use segmentation::Segmentation;
pub use vocab::Vocabulary;
