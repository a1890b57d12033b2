//! Character substitution-cipher decipherment as a hallucination scale.
//!
//! A model that truly understands text should be able to read it under any
//! consistent relabeling of its symbols. This crate builds datasets where
//! every line is enciphered with its own random substitution, trains and
//! evaluates decipherers that must output the decoding dictionary, scores
//! them by cross-entropy against the true dictionary, and fits power laws to
//! that score over model and dataset size.

pub mod cipher;
pub mod cli;
pub mod error;
pub mod neural;
pub mod ngram;
pub mod scale;
pub mod scaling;
pub mod solvers;
pub mod textcorpus;

pub use error::{Error, Result};
