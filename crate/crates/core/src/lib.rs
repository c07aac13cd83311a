//! Word-level neural spelling correction.
//!
//! A character CNN ("semantic net") turns every word, misspelled or not, into
//! a fixed-length vector. A stack of Transformer encoders reads those vectors
//! in sentence context and predicts, per position, either a top-frequency
//! word or `UNK` (leave the word alone). A second softmax head sits directly
//! on the word vectors and adds a weighted auxiliary loss so the CNN learns
//! spelling patterns on its own.
//!
//! ```text
//! chars ─► embed ─► conv×5 (bn+relu) ─► max pool ─► word vec ─┬─► dense ─► +pos ─► encoder×N ─► softmax (final)
//!                                                             └─► dense ─► softmax (auxiliary)
//! ```
//!
//! Modules follow the pipeline: [`textpipe`] builds vocabularies and encodes
//! text, [`errgen`] corrupts clean text, [`masking`] builds pretraining
//! inputs, [`model`] holds the network, [`trainkit`] trains it, [`evalkit`]
//! scores it and [`analysis`] projects and clusters word vectors.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod error;
pub mod errgen;
pub mod evalkit;
pub mod masking;
pub mod model;
pub mod numcore;
pub mod semanticnet;
pub mod textpipe;
pub mod toy;
pub mod trainkit;

pub use error::{Error, Result};
