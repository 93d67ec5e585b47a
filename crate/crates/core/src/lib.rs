//! Melody-matching engine for sung music queries.
//!
//! Scores how likely each target in a note-event database is to have
//! generated a given sung query, under an error model covering note
//! insertions/deletions (elaborations and joins), transposition, tempo,
//! modulation, tempo changes, and local pitch/rhythm errors. The model
//! parameters are tied across states and trainable from query examples
//! by expectation-maximization.
//!
//! The crate is organized around the pipeline:
//!
//! * [`events`] — raw note sequences to quantized pitch-class/IOI events;
//! * [`model`] — per-target hidden state space and tied probability tables;
//! * [`lattice`] — forward/backward/Viterbi inference over (target, query);
//! * [`training`] — tied-parameter Baum-Welch re-estimation;
//! * [`simulate`] — synthetic databases and generative query sampling;
//! * [`evalrank`] — database ranking, MRR/ROC metrics, entropy utilities.

pub mod error;
pub mod evalrank;
pub mod events;
pub mod files;
pub mod lattice;
pub mod model;
pub mod simulate;
pub mod training;

pub use error::{Error, Result};
pub use events::{QuantizationConfig, QuantizedEvent, RawNote};
pub use model::{
    EditKind, EditState, ErrorModelParams, HiddenState, ModelVariant, TargetModel,
};
pub use training::{TrainingOptions, TrainingPair, TrainingReport};
