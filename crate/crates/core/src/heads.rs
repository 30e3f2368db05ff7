// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-head attention diagnostics and head selection.
//!
//! All ratios read the decoding query's row of a step capture. `HAR` is the
//! share of a head's vision attention that lands on inert tokens; `NHAR` is
//! the raw attention mass on the remaining vision tokens. Because softmax
//! rows sum to one, the raw mass equals the context-normalized form.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::habi::{identify_inert, HijackProfile};
use crate::model::{ForwardCapture, ModelConfig, TokenId, ToyScene, ToyTransformer, VocabLayout};

/// 1-based `(layer, head)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if (1..=cfg.n_layers).contains(&self.layer) && (1..=cfg.n_heads).contains(&self.head) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "head ({}, {}) outside {}x{} model",
                self.layer, self.head, cfg.n_layers, cfg.n_heads
            )))
        }
    }

    /// Every head of a `layers × heads` model in `(layer, head)` order.
    pub fn all(layers: usize, heads: usize) -> Vec<Self> {
        (1..=layers)
            .flat_map(|l| (1..=heads).map(move |h| Self::new(l, h)))
            .collect()
    }
}

fn query_row(cap: &ForwardCapture, head: HeadId) -> ndarray::ArrayView1<'_, f64> {
    cap.query_row(head.layer - 1, head.head - 1)
}

fn vision_split(cap: &ForwardCapture, head: HeadId, inert: &BTreeSet<usize>) -> (f64, f64) {
    let row = query_row(cap, head);
    let mut inert_mass = 0.0;
    let mut other = 0.0;
    for p in cap.spans.vision.clone() {
        if inert.contains(&p) {
            inert_mass += row[p];
        } else {
            other += row[p];
        }
    }
    (inert_mass, other)
}

/// Hijacked attention ratio of `head` at this step.
pub fn har(cap: &ForwardCapture, head: HeadId, inert: &BTreeSet<usize>) -> Result<f64> {
    let (i, o) = vision_split(cap, head, inert);
    let total = i + o;
    if total <= 0.0 {
        return Err(Error::UndefinedRatio(format!(
            "head ({}, {}) pays no attention to vision tokens",
            head.layer, head.head
        )));
    }
    Ok(i / total)
}

/// Non-hijacked visual attention of `head` at this step.
pub fn nhar(cap: &ForwardCapture, head: HeadId, inert: &BTreeSet<usize>) -> f64 {
    vision_split(cap, head, inert).1
}

/// Vision attention mass of `head`, summed over steps.
pub fn total_visual_attention(caps: &[ForwardCapture], head: HeadId) -> f64 {
    caps.iter()
        .map(|c| {
            let row = query_row(c, head);
            c.spans.vision.clone().map(|p| row[p]).sum::<f64>()
        })
        .sum()
}

pub fn mean_nhar(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Domain("no qualifying generation steps".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// What a generated token says about the scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepLabel {
    Real,
    Hallucinated,
    /// Not an object word.
    Other,
}

pub fn label_steps(tokens: &[TokenId], true_objects: &[TokenId], vocab: &VocabLayout) -> Vec<StepLabel> {
    tokens
        .iter()
        .map(|t| {
            if !vocab.is_object(*t) {
                StepLabel::Other
            } else if true_objects.contains(t) {
                StepLabel::Real
            } else {
                StepLabel::Hallucinated
            }
        })
        .collect()
}

/// One decoded scene as the head statistics see it.
#[derive(Debug, Clone)]
pub struct SceneRun<'a> {
    pub captures: &'a [ForwardCapture],
    pub labels: &'a [StepLabel],
    pub inert: &'a BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadScore {
    pub head: HeadId,
    pub mean_nhar: f64,
    pub total_visual_attention: f64,
    /// Filled only for heads in the visual-attention pre-selection.
    pub har_real_mean: Option<f64>,
    pub har_hal_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadScoreTable {
    /// In `(layer, head)` order.
    pub scores: Vec<HeadScore>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadTableKnobs {
    /// Rank over every object step, not just the real ones.
    pub no_gt: bool,
    /// Share of heads, by total visual attention, that get HAR summaries.
    pub har_top_fraction: f64,
}

impl Default for HeadTableKnobs {
    fn default() -> Self {
        Self {
            no_gt: false,
            har_top_fraction: 0.25,
        }
    }
}

fn mean_opt(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Pool step statistics over scenes into one row per head.
pub fn build_head_table(
    runs: &[SceneRun<'_>],
    n_layers: usize,
    n_heads: usize,
    knobs: HeadTableKnobs,
) -> Result<HeadScoreTable> {
    if !(knobs.har_top_fraction >= 0.0 && knobs.har_top_fraction <= 1.0) {
        return Err(Error::Config("HAR pre-selection fraction outside [0, 1]".into()));
    }
    let heads = HeadId::all(n_layers, n_heads);
    let tva: Vec<f64> = heads
        .iter()
        .map(|&h| runs.iter().map(|r| total_visual_attention(r.captures, h)).sum())
        .collect();
    let n_top = (heads.len() as f64 * knobs.har_top_fraction).ceil() as usize;
    let mut by_tva: Vec<usize> = (0..heads.len()).collect();
    by_tva.sort_by(|&a, &b| tva[b].partial_cmp(&tva[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let top: BTreeSet<usize> = by_tva.into_iter().take(n_top).collect();

    let mut scores = Vec::with_capacity(heads.len());
    for (idx, &head) in heads.iter().enumerate() {
        let mut nhars = Vec::new();
        let (mut har_real, mut har_hal) = (Vec::new(), Vec::new());
        for run in runs {
            for (cap, &label) in run.captures.iter().zip(run.labels) {
                let counts = match label {
                    StepLabel::Real => true,
                    StepLabel::Hallucinated => knobs.no_gt,
                    StepLabel::Other => false,
                };
                if counts {
                    nhars.push(nhar(cap, head, run.inert));
                }
                if top.contains(&idx) && label != StepLabel::Other {
                    match har(cap, head, run.inert) {
                        Ok(v) if label == StepLabel::Real => har_real.push(v),
                        Ok(v) => har_hal.push(v),
                        Err(Error::UndefinedRatio(_)) => {}
                        Err(e) => return Err(e),
                    }
                }
            }
        }
        scores.push(HeadScore {
            head,
            mean_nhar: mean_nhar(&nhars)?,
            total_visual_attention: tva[idx],
            har_real_mean: mean_opt(&har_real),
            har_hal_mean: mean_opt(&har_hal),
        });
    }
    Ok(HeadScoreTable { scores })
}

/// Top-`k` heads by mean NHAR, best first; ties go to the lower `(layer, head)`.
pub fn select_heads(table: &HeadScoreTable, k: usize) -> Result<Vec<HeadId>> {
    if k > table.scores.len() {
        return Err(Error::Config(format!(
            "K = {k} exceeds the {} heads of the model",
            table.scores.len()
        )));
    }
    let mut ranked: Vec<&HeadScore> = table.scores.iter().collect();
    ranked.sort_by(|a, b| {
        b.mean_nhar
            .partial_cmp(&a.mean_nhar)
            .unwrap_or(Ordering::Equal)
            .then(a.head.cmp(&b.head))
    });
    Ok(ranked.into_iter().take(k).map(|s| s.head).collect())
}

/// Top-`k_top` vision positions by all-layer, all-head mean attention at one
/// step; ties go to the lower position.
pub fn step_top_k(cap: &ForwardCapture, k_top: usize) -> Vec<usize> {
    let q = cap.query_pos();
    let vision: Vec<usize> = cap.spans.vision.clone().collect();
    let mut mass = vec![0.0; vision.len()];
    let mut n = 0usize;
    for a in &cap.attn {
        for h in 0..a.shape()[0] {
            for (i, &p) in vision.iter().enumerate() {
                mass[i] += a[[h, q, p]];
            }
            n += 1;
        }
    }
    let mut order: Vec<usize> = (0..vision.len()).collect();
    order.sort_by(|&a, &b| {
        (mass[b] / n as f64)
            .partial_cmp(&(mass[a] / n as f64))
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.into_iter().take(k_top).map(|i| vision[i]).collect()
}

pub const DEFAULT_T: usize = 5;
pub const DEFAULT_K_TOP: usize = 10;

/// Vision positions in the top-`k_top` set at every one of the first `t`
/// steps, ascending.
pub fn persistent_set(caps: &[ForwardCapture], t: usize, k_top: usize) -> Result<Vec<usize>> {
    if t == 0 || caps.len() < t {
        return Err(Error::Domain(format!(
            "persistent set over {t} steps needs that many captures, got {}",
            caps.len()
        )));
    }
    let mut acc: BTreeSet<usize> = step_top_k(&caps[0], k_top).into_iter().collect();
    for cap in &caps[1..t] {
        let s: BTreeSet<usize> = step_top_k(cap, k_top).into_iter().collect();
        acc = acc.intersection(&s).copied().collect();
    }
    Ok(acc.into_iter().collect())
}

/// Decode every scene, resolve its inert set with `profile`, and fill the
/// profile's head table and top-`k` target heads.
pub fn rank_heads(
    scenes: &[ToyScene],
    model: &ToyTransformer,
    profile: &HijackProfile,
    k: usize,
    max_new: usize,
    knobs: HeadTableKnobs,
) -> Result<(HijackProfile, HeadScoreTable)> {
    let cfg = model.config();
    if k > cfg.n_heads_total() {
        return Err(Error::Config(format!(
            "K = {k} exceeds the {} heads of the model",
            cfg.n_heads_total()
        )));
    }
    profile.thresholds()?;
    let decoded = scenes
        .par_iter()
        .map(|s| -> Result<_> {
            let gen = model.generate_greedy(&s.input(model), Some(s.embeddings.view()), max_new, None)?;
            let inert: BTreeSet<usize> = identify_inert(&gen.captures, model, profile)?.into_iter().collect();
            let labels = label_steps(&gen.tokens, &s.true_objects, model.vocab());
            Ok((gen.captures, labels, inert))
        })
        .collect::<Result<Vec<_>>>()?;
    let runs: Vec<SceneRun<'_>> = decoded
        .iter()
        .map(|(c, l, i)| SceneRun {
            captures: c,
            labels: l,
            inert: i,
        })
        .collect();
    let table = build_head_table(&runs, cfg.n_layers, cfg.n_heads, knobs)?;
    let chosen = select_heads(&table, k)?;
    let mut out = profile.clone();
    out.heads = table
        .scores
        .iter()
        .map(|s| (s.head.layer, s.head.head, s.mean_nhar))
        .collect();
    out.h_target = chosen.iter().map(|h| (h.layer, h.head)).collect();
    out.k = Some(k);
    Ok((out, table))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// `layer,head,mean_nhar,total_visual_attention,har_real_mean,har_hal_mean`;
/// missing HAR summaries are empty cells.
pub fn write_head_csv<W: Write>(out: &mut W, table: &HeadScoreTable) -> Result<()> {
    writeln!(out, "layer,head,mean_nhar,total_visual_attention,har_real_mean,har_hal_mean")?;
    for s in &table.scores {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            s.head.layer,
            s.head.head,
            s.mean_nhar,
            s.total_visual_attention,
            fmt_opt(s.har_real_mean),
            fmt_opt(s.har_hal_mean)
        )?;
    }
    Ok(())
}
