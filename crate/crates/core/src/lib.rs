//! Stuttering detection on pre-extracted speech embeddings.
//!
//! The crate consumes frame-level contextual embeddings (`T×768` per clip) and
//! utterance-level speaker embeddings (`1×192` per clip), pools and reduces them
//! with Fisher LDA, and classifies each clip into one of five classes
//! (repetition, prolongation, block, interjection, fluent) with a KNN, a
//! Gaussian naive-Bayes back-end or a two-branch MLP. Systems can be combined by
//! score fusion or embedding fusion, and are evaluated with podcast-disjoint
//! cross-validation reporting per-class recall, total accuracy and UAR.

pub mod classifiers;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod fusion;
pub mod label;
pub mod lda;
pub mod mlp;
pub mod numerics;
pub mod pipeline;
pub mod synthetic;

pub use error::{Error, ErrorClass, Result};
pub use label::{Label, LABELS, NUM_CLASSES};
pub use numerics::{Matrix, SeededRng};
