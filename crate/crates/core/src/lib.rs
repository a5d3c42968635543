//! Distantly supervised pyramid network for unified sentiment analysis.
//!
//! One model scores which aspects a review discusses, how each aspect is
//! rated, and the review's overall polarity, while training only on review
//! level labels plus an unsupervised aspect reconstruction objective.

pub mod acd;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod gradkernel;
pub mod metrics;
pub mod model;
pub mod pyramid;
pub mod trainer;
pub mod toy;

pub use corpus::{AspectSchema, AspectSpec, Corpus, Polarity, Review, Vocabulary};
pub use error::{DspnError, Result};
pub use model::{Dspn, ModelConfig, Objective};
