//! Disentangled heterogeneous graph attention network for top-N
//! recommendation.
//!
//! The crate is organized around the pipeline:
//!
//! - [`tensor`] / [`tape`] / [`gradcheck`] — dense arrays with reverse-mode
//!   differentiation and a finite-difference oracle,
//! - [`hin`] — heterogeneous graph storage keyed by meta relation, with
//!   fixed-fan-out neighbor sampling and computation-tree extraction,
//! - [`model`] — disentangled per-aspect projections, two-level attention
//!   with iterative aspect routing, layer stacking, and aspect-wise scoring,
//! - [`train`] — negative-sampling binary cross-entropy training with Adam
//!   and early stopping,
//! - [`eval`] — sampled-negatives Prec/Recall/NDCG@N ranking evaluation,
//! - [`data`] — dataset ingestion, core filtering, chronological splitting,
//!   and a synthetic generator with planted aspects.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod hin;
pub mod model;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{ParamId, ParamSet, Tape, ValueId};
pub use tensor::{Real, Tensor};
