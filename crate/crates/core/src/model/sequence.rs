// SPDX-License-Identifier: MIT OR Apache-2.0

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::layout::TokenId;
use crate::error::{Error, Result};

/// Half-open spans of the vision, prompt and output segments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Spans {
    pub vision: Range<usize>,
    pub prompt: Range<usize>,
    pub output: Range<usize>,
}

impl Spans {
    pub fn len(&self) -> usize {
        self.output.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Query rows whose attention drives decoding: the position that emits
    /// the first output token, and every output position after it. With a
    /// full recompute per step these are exactly the rows a KV-cached decoder
    /// would have computed while generating.
    pub fn decode_rows(&self) -> Range<usize> {
        self.output.start.saturating_sub(1)..self.len()
    }

    /// Position whose logits predict the next token.
    pub fn last(&self) -> usize {
        self.len().saturating_sub(1)
    }
}

/// Token ids split into vision → prompt → output segments.
///
/// Vision positions hold a placeholder id; their inputs are injected
/// embeddings supplied alongside the sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentedSequence {
    tokens: Vec<TokenId>,
    spans: Spans,
}

impl SegmentedSequence {
    pub fn new(n_vision: usize, prompt: &[TokenId], output: &[TokenId]) -> Self {
        let mut tokens = vec![0; n_vision];
        tokens.extend_from_slice(prompt);
        tokens.extend_from_slice(output);
        let p_end = n_vision + prompt.len();
        Self {
            spans: Spans {
                vision: 0..n_vision,
                prompt: n_vision..p_end,
                output: p_end..tokens.len(),
            },
            tokens,
        }
    }

    /// Build from explicit parts, checking that the spans are contiguous,
    /// ordered and cover the token list.
    pub fn from_parts(tokens: Vec<TokenId>, spans: Spans) -> Result<Self> {
        let ok = spans.vision.start == 0
            && spans.vision.start <= spans.vision.end
            && spans.vision.end == spans.prompt.start
            && spans.prompt.start <= spans.prompt.end
            && spans.prompt.end == spans.output.start
            && spans.output.start <= spans.output.end
            && spans.output.end == tokens.len();
        if !ok {
            return Err(Error::Validation(format!(
                "spans {spans:?} do not tile a sequence of length {}",
                tokens.len()
            )));
        }
        Ok(Self { tokens, spans })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn spans(&self) -> &Spans {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn output_tokens(&self) -> &[TokenId] {
        &self.tokens[self.spans.output.clone()]
    }

    pub fn push_output(&mut self, tok: TokenId) {
        self.tokens.push(tok);
        self.spans.output.end += 1;
    }
}
