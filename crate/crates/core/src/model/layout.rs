// SPDX-License-Identifier: MIT OR Apache-2.0

//! Vocabulary roles and residual-channel assignment of the toy model.
//!
//! The residual stream is split (before a seeded rotation) into named
//! channels: a constant bias, a sink-key channel, a vision-salience channel,
//! a text marker, one channel per object class (read by the unembedding),
//! one visual-feature channel per object class (invisible to it), a block
//! spanned by the non-object unembedding rows, and a lexical/positional
//! block. Small configs fold channels onto each other modulo
//! `d_model`.

use std::ops::Range;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::rng;

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub vocab_size: usize,
    /// Fixed instruction prompt ("describe the image" analog).
    pub prompt: Vec<TokenId>,
    /// Contiguous object-class id range; mentions are generated ids in here.
    pub objects: Range<TokenId>,
    /// Junk words the model is predisposed to collapse onto.
    pub hijack_words: Vec<TokenId>,
}

impl VocabLayout {
    pub fn is_object(&self, id: TokenId) -> bool {
        self.objects.contains(&id)
    }

    pub fn n_objects(&self) -> usize {
        (self.objects.end - self.objects.start) as usize
    }

    pub fn object_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.objects.clone()
    }

    /// Index of an object id within the object block.
    pub fn object_index(&self, id: TokenId) -> Option<usize> {
        self.is_object(id).then(|| (id - self.objects.start) as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelLayout {
    pub d_model: usize,
    pub bias: usize,
    pub sink: usize,
    pub salience: usize,
    pub text: usize,
    pub objects: Range<usize>,
    pub features: Range<usize>,
    pub junk: Range<usize>,
    pub lexical: Range<usize>,
}

impl ChannelLayout {
    /// Physical (pre-rotation) dimension of a logical channel index.
    pub fn dim(&self, logical: usize) -> usize {
        logical % self.d_model
    }

    pub fn object_channel(&self, k: usize) -> usize {
        self.dim(self.objects.start + k)
    }

    pub fn feature_channel(&self, k: usize) -> usize {
        self.dim(self.features.start + k)
    }

    pub fn junk_dims(&self) -> Vec<usize> {
        self.junk.clone().map(|c| self.dim(c)).collect()
    }

    pub fn lexical_dims(&self) -> Vec<usize> {
        self.lexical.clone().map(|c| self.dim(c)).collect()
    }
}

/// Number of object classes supported by a config.
fn object_count(cfg: &ModelConfig, n_prompt: usize) -> usize {
    let by_dims = (cfg.d_model.saturating_sub(4) / 3).max(1);
    let by_vocab = cfg.vocab_size / 4;
    let room = cfg.vocab_size.saturating_sub(n_prompt + 1);
    by_dims.min(by_vocab).min(room)
}

pub fn build_layouts(cfg: &ModelConfig) -> (VocabLayout, ChannelLayout) {
    let v = cfg.vocab_size;
    let n_prompt = (v / 16).clamp(1, 4).min(v);
    let n_obj = object_count(cfg, n_prompt);
    let obj_start = n_prompt.min(v);
    let objects = obj_start as TokenId..(obj_start + n_obj) as TokenId;

    let mut junk: Vec<TokenId> = ((obj_start + n_obj) as TokenId..v as TokenId).collect();
    let mut rng = rng::substream(cfg.seed, "vocab");
    junk.shuffle(&mut rng);
    let n_hijack = if junk.len() >= 8 { 2 } else { 1 };
    let mut hijack_words: Vec<TokenId> = junk.iter().copied().take(n_hijack).collect();
    if hijack_words.is_empty() {
        hijack_words.push(0);
    }
    hijack_words.sort_unstable();

    let vocab = VocabLayout {
        vocab_size: v,
        prompt: (0..n_prompt as TokenId).collect(),
        objects,
        hijack_words,
    };

    let d = cfg.d_model;
    let rest = d.saturating_sub(4 + 2 * n_obj);
    let n_junk = (rest / 2).max(1);
    let n_lex = rest.saturating_sub(n_junk).max(1);
    let o0 = 4;
    let f0 = o0 + n_obj;
    let j0 = f0 + n_obj;
    let x0 = j0 + n_junk;
    let channels = ChannelLayout {
        d_model: d,
        bias: 0,
        sink: 1 % d,
        salience: 2 % d,
        text: 3 % d,
        objects: o0..o0 + n_obj,
        features: f0..f0 + n_obj,
        junk: j0..j0 + n_junk,
        lexical: x0..x0 + n_lex,
    };
    (vocab, channels)
}
