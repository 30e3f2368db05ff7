// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::{Array2, Array3, ArrayView1, ArrayView2};

use super::sequence::Spans;

/// Hidden states and attention probabilities of one forward pass.
///
/// `hidden[0]` is the post-embedding residual; `hidden[l]` for `l >= 1` is
/// the residual after block `l`. `attn[l]` has shape `(heads, query, key)`
/// and holds the post-hook probabilities of block `l + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCapture {
    pub spans: Spans,
    pub hidden: Vec<Array2<f64>>,
    pub attn: Vec<Array3<f64>>,
}

impl ForwardCapture {
    pub fn n_layers(&self) -> usize {
        self.attn.len()
    }

    pub fn n_heads(&self) -> usize {
        self.attn.first().map_or(0, |a| a.shape()[0])
    }

    pub fn seq_len(&self) -> usize {
        self.spans.len()
    }

    /// Position of the query that produced this step's next-token logits.
    pub fn query_pos(&self) -> usize {
        self.spans.last()
    }

    /// Attention row of `(layer, head)` at `query` (0-based layer and head).
    pub fn row(&self, layer: usize, head: usize, query: usize) -> ArrayView1<'_, f64> {
        self.attn[layer].slice(ndarray::s![head, query, ..])
    }

    /// Attention row of the decoding query.
    pub fn query_row(&self, layer: usize, head: usize) -> ArrayView1<'_, f64> {
        self.row(layer, head, self.query_pos())
    }

    /// Residual after block `layer` (1-based; 0 is the embedding).
    pub fn hidden_at(&self, layer: usize) -> ArrayView2<'_, f64> {
        self.hidden[layer].view()
    }
}
