// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hijacking-anchor-based identification of inert vision tokens.
//!
//! Calibration decodes every vision token's trace, scores how strongly its
//! anchor word hijacks it, flags the outlier anchor words, and picks the
//! ratio threshold that separates hijacked tokens from the rest. At
//! inference a token is inert when enough of its trace lands on those words.

mod calibrate;
mod profile;
pub mod stats;

use std::collections::{BTreeMap, BTreeSet};

pub use calibrate::{
    calibrate, observe_scene, write_histogram_csv, Calibration, CalibrationKnobs,
    SceneObservation,
};
pub use profile::{HijackProfile, ProfileMeta, TauSource, NO_INERT_WARNING};
pub use stats::{otsu_threshold, quartile_threshold, salient_filter, Histogram};

use crate::error::{Error, Result};
use crate::lens::{decode_trace, Trace};
use crate::model::{ForwardCapture, TokenId, ToyTransformer};

/// Factors of a vision token's hijack score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HijackComponents {
    /// Share of the trace taken by its anchor.
    pub dominance: f64,
    /// `ln(1 + n)`, `n` the corpus-wide count of tokens with the same anchor.
    pub frequency: f64,
    /// `ln(1 + a)`, `a` the mean attention the token receives while decoding.
    pub attention: f64,
}

impl HijackComponents {
    pub fn from_raw(dominance: f64, anchor_count: usize, raw_attention: f64) -> Self {
        Self {
            dominance,
            frequency: (anchor_count as f64).ln_1p(),
            attention: raw_attention.ln_1p(),
        }
    }
}

pub fn hijack_score(c: HijackComponents) -> f64 {
    c.dominance * c.frequency * c.attention
}

/// Mean attention paid to `vision_pos` by the decoding query over the first
/// `n_steps` steps, all layers and all heads.
pub fn component_attention(
    captures: &[ForwardCapture],
    vision_pos: usize,
    n_steps: usize,
) -> Result<f64> {
    let steps = &captures[..captures.len().min(n_steps)];
    if steps.is_empty() {
        return Err(Error::Domain("no decoding steps available".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for cap in steps {
        if !cap.spans.vision.contains(&vision_pos) {
            return Err(Error::Domain(format!("position {vision_pos} is not a vision token")));
        }
        let q = cap.query_pos();
        for a in &cap.attn {
            for h in 0..a.shape()[0] {
                sum += a[[h, q, vision_pos]];
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Domain("captures hold no attention".into()));
    }
    Ok(sum / n as f64)
}

/// Hijack scores grouped by the anchor word of the scored token.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnchorTable {
    scores: BTreeMap<TokenId, Vec<f64>>,
}

impl AnchorTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, anchor: TokenId, score: f64) {
        self.scores.entry(anchor).or_default().push(score);
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self, anchor: TokenId) -> Option<&[f64]> {
        self.scores.get(&anchor).map(Vec::as_slice)
    }

    pub fn mean(&self, anchor: TokenId) -> Option<f64> {
        self.scores(anchor)
            .map(|s| s.iter().sum::<f64>() / s.len() as f64)
    }

    /// `(anchor, mean score)` in ascending anchor order.
    pub fn means(&self) -> Vec<(TokenId, f64)> {
        self.scores
            .keys()
            .map(|&w| (w, self.mean(w).expect("key present")))
            .collect()
    }
}

/// `τ_s` over `threshold_population` and the anchors whose mean beats it.
pub fn discover_anchors(
    table: &AnchorTable,
    threshold_population: &[f64],
    multiplier: f64,
) -> Result<(Vec<TokenId>, f64)> {
    let tau_s = quartile_threshold(threshold_population, multiplier)?;
    let anchors = table
        .means()
        .into_iter()
        .filter(|&(_, m)| m > tau_s)
        .map(|(w, _)| w)
        .collect();
    Ok((anchors, tau_s))
}

/// Share of the trace's words that are hijacking anchors.
pub fn hijacking_ratio(trace: &Trace, anchors: &BTreeSet<TokenId>) -> f64 {
    if trace.words.is_empty() {
        return 0.0;
    }
    let hits = trace.words.iter().filter(|w| anchors.contains(w)).count();
    hits as f64 / trace.words.len() as f64
}

/// Vision positions whose hijacking ratio exceeds `τ_r`.
///
/// Every vision token is scanned; the salient filter only shapes calibration.
/// Traces come from the first capture, whose vision rows every later step
/// shares.
pub fn identify_inert(
    captures: &[ForwardCapture],
    model: &ToyTransformer,
    profile: &HijackProfile,
) -> Result<Vec<usize>> {
    let (_, tau_r) = profile.thresholds()?;
    let cap = captures
        .first()
        .ok_or_else(|| Error::Domain("no captures".into()))?;
    let anchors: BTreeSet<TokenId> = profile.anchors.iter().copied().collect();
    let mut inert = Vec::new();
    for pos in cap.spans.vision.clone() {
        let trace = decode_trace(cap, pos, model)?;
        if hijacking_ratio(&trace, &anchors) > tau_r {
            inert.push(pos);
        }
    }
    Ok(inert)
}
