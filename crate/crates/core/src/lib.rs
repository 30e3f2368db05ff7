// SPDX-License-Identifier: MIT OR Apache-2.0

//! Vocabulary-hijacking analysis on a deterministic toy multimodal
//! transformer.
//!
//! Some vision tokens soak up attention while every intermediate layer
//! decodes them to the same meaningless word. This crate finds those inert
//! tokens from logit-lens traces, ranks attention heads by how much of their
//! visual attention avoids them, and reinforces vision attention on the best
//! heads at decode time.
//!
//! | module | contents |
//! |--------|----------|
//! | [`model`] | toy decoder, captures, hook seam, scene fixtures |
//! | [`lens`] | logit-lens distributions, traces, anchors |
//! | [`habi`] | hijack scores, thresholds, inert-token identification, profile |
//! | [`heads`] | HAR / NHAR, head ranking, persistent attention set |
//! | [`havae`] | attention interventions behind a named-strategy registry |
//! | [`eval`] | toy CHAIR, identifier comparison, A/B battery |

pub mod error;
pub mod eval;
pub mod habi;
pub mod havae;
pub mod heads;
pub mod lens;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
