//! Few-shot video action matching with multi-view encoders.
//!
//! A query clip is classified against an N-way K-shot support set by three
//! cooperating branches, each pairing an encoder with a matcher that suits
//! its view of the data:
//!
//! * frame sequences aligned by DTW over cosine distances ([`matching::instance_matching`]),
//! * category-level views compared through cross-attention reconstruction
//!   ([`matching::category_matching`]),
//! * task-aware views scored with a bidirectional chamfer distance
//!   ([`matching::task_matching`]).
//!
//! Branch distances become probabilities via a temperature softmax and are
//! fused by summation ([`fusion::fuse`]). Everything differentiable is built
//! on a small reverse-mode tape ([`tape::Tape`]), so the same code drives
//! inference and episodic SGD training ([`training::train`]).
//!
//! Clips live in `.m3fa` archives ([`archive`]) and trained weights in
//! `.m3ck` checkpoints ([`checkpoint`]); both formats are deterministic and
//! round-trip bit-exactly. Synthetic episode data for experiments comes from
//! [`synth`].

pub mod archive;
pub mod checkpoint;
pub mod config;
pub mod encoding;
pub mod episode;
pub mod error;
pub mod fusion;
pub mod matching;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod training;

mod wire;

pub use error::{Error, Result};
