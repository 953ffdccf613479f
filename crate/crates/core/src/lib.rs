//! Streaming layer-trajectory LSTM acoustic modeling toolkit.
//!
//! * [`graph`], [`lstmp`], [`tensor`]: tensor arithmetic, the projected LSTM
//!   cell and reverse-mode gradients.
//! * [`models`]: LSTM, ltLSTM, cltLSTM and two-head models with streaming
//!   evaluation.
//! * [`lattice`], [`lm`], [`decoder`], [`criteria`]: lattices, n-gram LMs,
//!   token-passing search and the CE / MMI / EMBR / sequence teacher-student
//!   criteria.
//! * [`recipe`]: staged training recipes.
//! * [`twopass`]: two-pass streaming decode simulation and latency accounting.
//! * [`corpus`], [`scoring`]: synthetic senone task and WER scoring.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod container;
pub mod corpus;
pub mod criteria;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod lattice;
pub mod lm;
pub mod lstmp;
pub mod models;
pub mod recipe;
pub mod scoring;
pub mod tensor;
pub mod twopass;

pub use error::{Error, Result};
pub use graph::{Graph, Parameterized};
pub use models::{LayerTrajectoryModel, ModelConfig, TwoHeadModel, Variant};
pub use tensor::{Matrix, Tensor};
