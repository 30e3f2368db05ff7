// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention-transform seam of the forward pass.

use std::ops::Range;

use ndarray::Array3;

use super::sequence::Spans;
use crate::error::Result;

/// What a hook sees alongside the tensor it transforms.
#[derive(Debug, Clone)]
pub struct HookContext<'a> {
    /// 0-based block index.
    pub layer: usize,
    pub spans: &'a Spans,
    /// Rows the hook may modify (see [`Spans::decode_rows`]).
    pub decode_rows: Range<usize>,
}

/// A transform of one layer's post-softmax attention `(heads, query, key)`,
/// applied before the value mix.
pub trait AttentionHook: Send + Sync {
    fn name(&self) -> &str;

    fn apply(&self, ctx: &HookContext<'_>, attn: &mut Array3<f64>) -> Result<()>;
}

/// Leaves the tensor untouched.
#[derive(Debug, Default, Clone, Copy)]
pub struct IdentityHook;

impl AttentionHook for IdentityHook {
    fn name(&self) -> &str {
        "identity"
    }

    fn apply(&self, _ctx: &HookContext<'_>, _attn: &mut Array3<f64>) -> Result<()> {
        Ok(())
    }
}
