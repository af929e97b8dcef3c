//! Slice-grouped domain attention for 3D pulmonary nodule detection.
//!
//! The crate is organized in four layers:
//!
//! * a small tensor library with tape-based reverse-mode differentiation
//!   ([`tensor`], [`tape`], [`conv`], [`init`], [`parallel`]);
//! * the attention modules: slice-grouped squeeze-excitation ([`sgse`]),
//!   the multi-adapter domain bank ([`domain_attention`]), three-way cross
//!   attention ([`cross_attention`]), and their composition into the full
//!   module plus residual blocks ([`sgda`]);
//! * CT-side tooling: volume I/O and preprocessing ([`ct`]), FROC scoring
//!   ([`froc`]), and a synthetic multi-domain corpus ([`synth`]);
//! * a desk-scale detector with per-dataset heads, its trainer, and
//!   checkpointing ([`toy`], [`checkpoint`], [`sgdt`], [`gradcheck`]).
//!
//! Everything is deterministic given its seed: parallel and sequential
//! builds produce bit-identical results.

pub mod checkpoint;
pub mod conv;
pub mod cross_attention;
pub mod ct;
pub mod domain_attention;
pub mod error;
pub mod froc;
pub mod gradcheck;
pub mod init;
pub mod parallel;
pub mod sgda;
pub mod sgdt;
pub mod sgse;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
pub use tensor::Tensor;
