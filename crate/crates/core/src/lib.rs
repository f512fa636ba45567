//! Topic-guided abstractive summarization: a planar-flow neural topic model
//! trained jointly with a small transformer encoder-decoder whose hidden
//! states are blended with the document's topic mixture through learned
//! gates, plus ROUGE and C_V evaluation.

pub mod corpus;
pub mod eval;
pub mod ntm;
pub mod summarizer;
pub mod numerics;
pub mod checkpoint;
pub mod cli;
pub mod synth;
pub mod training;

mod error;

pub use error::{Error, Result};
