//! Cross-frame correlation network for video sequence recognition.
//!
//! A small, self-contained stack for recognizing gloss sequences from video
//! by explicitly modeling cross-frame trajectories:
//!
//! - [`tensor`] — dense tensors with reverse-mode autodiff on a per-pass tape,
//!   Adam, and a binary checkpoint format.
//! - [`correlation`] — dot-product affinity maps between adjacent frames and
//!   bidirectional trajectory aggregation.
//! - [`identification`] — multi-scale dilated attention maps that emphasize
//!   trajectory-bearing regions, fused residually with a zero-initialized gate.
//! - [`network`] — the full pipeline: staged 2D extractor with correlation
//!   blocks, 1D temporal head, stacked bidirectional LSTM, CTC-trained
//!   classifiers with an auxiliary visual head.
//! - [`ctc`] — log-space CTC loss with a brute-force oracle, greedy and
//!   prefix-beam decoding.
//! - [`metrics`] — word error rate with edit-operation breakdowns.
//! - [`synth`] — deterministic synthetic trajectory videos where class is
//!   identifiable only from motion.
//! - [`run`] — training / evaluation / diagnostics entry points used by the
//!   `corrnet` binary and the examples.

pub mod config;
pub mod correlation;
pub mod ctc;
pub mod gradcheck;
pub mod identification;
pub mod lstm;
pub mod metrics;
pub mod network;
pub mod run;
pub mod synth;
pub mod tensor;

mod error;

pub use error::{Error, Result};
