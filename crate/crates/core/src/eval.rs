// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scene-battery experiments: toy CHAIR, inert-attention share under an
//! intervention, HABI against the persistent attention set, and the
//! zero-ablation check.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::IndexedRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::habi::{identify_inert, HijackProfile};
use crate::havae::{build_hook, InterventionSpec, Mode, ZeroAblateHook};
use crate::heads::{har, label_steps, nhar, persistent_set, HeadId, StepLabel};
use crate::model::{ForwardCapture, Generation, TokenId, ToyScene, ToyTransformer, VocabLayout};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chair {
    pub chair_s: f64,
    pub chair_i: f64,
}

/// Distinct object words of one generation, ascending.
pub fn mentions(tokens: &[TokenId], vocab: &VocabLayout) -> Vec<TokenId> {
    let set: BTreeSet<TokenId> = tokens.iter().copied().filter(|t| vocab.is_object(*t)).collect();
    set.into_iter().collect()
}

/// Pooled instance-level and scene-level hallucination rates.
pub fn toy_chair(
    generated: &[Vec<TokenId>],
    truth: &[Vec<TokenId>],
    vocab: &VocabLayout,
) -> Result<Chair> {
    if generated.is_empty() {
        return Err(Error::Domain("CHAIR needs >= 1 scene".into()));
    }
    if generated.len() != truth.len() {
        return Err(Error::Input(format!(
            "{} generations for {} truth sets",
            generated.len(),
            truth.len()
        )));
    }
    let mut n_mentions = 0usize;
    let mut n_hal = 0usize;
    let mut hal_scenes = 0usize;
    for (g, t) in generated.iter().zip(truth) {
        let m = mentions(g, vocab);
        let h = m.iter().filter(|w| !t.contains(w)).count();
        n_mentions += m.len();
        n_hal += h;
        hal_scenes += usize::from(h > 0);
    }
    Ok(Chair {
        chair_s: hal_scenes as f64 / generated.len() as f64,
        chair_i: if n_mentions == 0 {
            0.0
        } else {
            n_hal as f64 / n_mentions as f64
        },
    })
}

/// Micro-averaged agreement of two per-scene position sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifierAgreement {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub true_positives: usize,
    pub predicted: usize,
    pub reference: usize,
    /// Scenes with an empty predicted set (no precision contribution).
    pub precision_excluded: usize,
    /// Scenes with an empty reference set (no recall contribution).
    pub recall_excluded: usize,
}

pub fn compare_identifiers(
    predicted: &BTreeMap<u64, Vec<usize>>,
    reference: &BTreeMap<u64, Vec<usize>>,
) -> Result<IdentifierAgreement> {
    if !predicted.keys().eq(reference.keys()) {
        return Err(Error::Input("scene ids of the two identifiers differ".into()));
    }
    let (mut tp, mut np, mut nr, mut px, mut rx) = (0, 0, 0, 0, 0);
    for (id, p) in predicted {
        let p: BTreeSet<usize> = p.iter().copied().collect();
        let r: BTreeSet<usize> = reference[id].iter().copied().collect();
        tp += p.intersection(&r).count();
        np += p.len();
        nr += r.len();
        px += usize::from(p.is_empty());
        rx += usize::from(r.is_empty());
    }
    let precision = (np > 0).then(|| tp as f64 / np as f64);
    let recall = (nr > 0).then(|| tp as f64 / nr as f64);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Ok(IdentifierAgreement {
        precision,
        recall,
        f1,
        true_positives: tp,
        predicted: np,
        reference: nr,
        precision_excluded: px,
        recall_excluded: rx,
    })
}

/// Share of the decoding query's vision attention that lands on `inert`,
/// pooled over heads within a layer, then averaged over layers and steps.
/// Layers with no vision attention are skipped; `None` when none remain.
pub fn inert_share(captures: &[ForwardCapture], inert: &BTreeSet<usize>) -> Option<f64> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for cap in captures {
        let q = cap.query_pos();
        for a in &cap.attn {
            let (mut on_inert, mut vision) = (0.0, 0.0);
            for h in 0..a.shape()[0] {
                for p in cap.spans.vision.clone() {
                    vision += a[[h, q, p]];
                    if inert.contains(&p) {
                        on_inert += a[[h, q, p]];
                    }
                }
            }
            if vision > 0.0 {
                acc += on_inert / vision;
                n += 1;
            }
        }
    }
    (n > 0).then(|| acc / n as f64)
}

fn mean_nhar_over(captures: &[ForwardCapture], heads: &[HeadId], inert: &BTreeSet<usize>) -> f64 {
    let mut acc = 0.0;
    for cap in captures {
        for &h in heads {
            acc += nhar(cap, h, inert);
        }
    }
    acc / (captures.len() * heads.len()).max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalKnobs {
    pub mode: Mode,
    pub alpha: f64,
    pub beta: f64,
    pub renormalize: bool,
    pub max_new: usize,
    pub compare_persist: bool,
    pub t: usize,
    pub k_top: usize,
}

impl Default for EvalKnobs {
    fn default() -> Self {
        Self {
            mode: Mode::Compose,
            alpha: 0.1,
            beta: 0.0,
            renormalize: false,
            max_new: 10,
            compare_persist: true,
            t: crate::heads::DEFAULT_T,
            k_top: crate::heads::DEFAULT_K_TOP,
        }
    }
}

/// One scene under one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRun {
    pub tokens: Vec<TokenId>,
    pub chair_hit: bool,
    pub inert_share: Option<f64>,
    pub nhar_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneResult {
    pub scene_id: u64,
    pub true_objects: Vec<TokenId>,
    pub inert: Vec<usize>,
    pub persistent: Option<Vec<usize>>,
    pub baseline: ConditionRun,
    pub intervened: ConditionRun,
    /// Baseline HAR over all heads, pooled per step label.
    #[serde(skip)]
    har_steps: (Vec<f64>, Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub chair_s: f64,
    pub chair_i: f64,
    pub mean_inert_share: Option<f64>,
    pub mean_nhar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_scenes: usize,
    pub seed: u64,
    pub knobs: EvalKnobs,
    pub h_target: Vec<(usize, usize)>,
    pub baseline: ConditionSummary,
    pub intervened: ConditionSummary,
    /// Baseline HAR means over real and hallucinated object steps.
    pub har_real_mean: Option<f64>,
    pub har_hal_mean: Option<f64>,
    /// Scenes whose inert share dropped under the intervention, out of
    /// scenes where both shares are defined.
    pub inert_share_reduced: usize,
    pub inert_share_compared: usize,
    pub habi_vs_persist: Option<IdentifierAgreement>,
    pub scenes: Vec<SceneResult>,
}

fn condition(
    gen: &Generation,
    scene: &ToyScene,
    vocab: &VocabLayout,
    inert: &BTreeSet<usize>,
    heads: &[HeadId],
) -> ConditionRun {
    let chair_hit = mentions(&gen.tokens, vocab)
        .iter()
        .any(|m| !scene.true_objects.contains(m));
    ConditionRun {
        tokens: gen.tokens.clone(),
        chair_hit,
        inert_share: inert_share(&gen.captures, inert),
        nhar_mean: mean_nhar_over(&gen.captures, heads, inert),
    }
}

fn run_scene(
    scene: &ToyScene,
    model: &ToyTransformer,
    profile: &HijackProfile,
    knobs: &EvalKnobs,
) -> Result<SceneResult> {
    let input = scene.input(model);
    let vision = Some(scene.embeddings.view());
    let base = model.generate_greedy(&input, vision, knobs.max_new, None)?;
    let inert = identify_inert(&base.captures, model, profile)?;
    let mut spec = InterventionSpec::from_profile(profile, knobs.mode, knobs.beta, knobs.renormalize)
        .with_inert(inert.clone());
    spec.alpha = knobs.alpha;
    let hook = build_hook(&spec, profile)?;
    let int = model.generate_greedy(&input, vision, knobs.max_new, Some(hook.as_ref()))?;

    let inert_set: BTreeSet<usize> = inert.iter().copied().collect();
    let cfg = model.config();
    let heads = if spec.h_target.is_empty() {
        HeadId::all(cfg.n_layers, cfg.n_heads)
    } else {
        spec.h_target.clone()
    };
    let persistent = if knobs.compare_persist {
        Some(persistent_set(&base.captures, knobs.t, knobs.k_top)?)
    } else {
        None
    };

    let labels = label_steps(&base.tokens, &scene.true_objects, model.vocab());
    let (mut real, mut hal) = (Vec::new(), Vec::new());
    for (cap, label) in base.captures.iter().zip(&labels) {
        if *label == StepLabel::Other {
            continue;
        }
        for h in HeadId::all(cfg.n_layers, cfg.n_heads) {
            match har(cap, h, &inert_set) {
                Ok(v) if *label == StepLabel::Real => real.push(v),
                Ok(v) => hal.push(v),
                Err(Error::UndefinedRatio(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }

    Ok(SceneResult {
        scene_id: scene.id,
        true_objects: scene.true_objects.clone(),
        baseline: condition(&base, scene, model.vocab(), &inert_set, &heads),
        intervened: condition(&int, scene, model.vocab(), &inert_set, &heads),
        inert,
        persistent,
        har_steps: (real, hal),
    })
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn summarize(
    results: &[SceneResult],
    pick: impl Fn(&SceneResult) -> &ConditionRun,
    vocab: &VocabLayout,
) -> Result<ConditionSummary> {
    let generated: Vec<Vec<TokenId>> = results.iter().map(|r| pick(r).tokens.clone()).collect();
    let truth: Vec<Vec<TokenId>> = results.iter().map(|r| r.true_objects.clone()).collect();
    let chair = toy_chair(&generated, &truth, vocab)?;
    let shares: Vec<f64> = results.iter().filter_map(|r| pick(r).inert_share).collect();
    let nhars: Vec<f64> = results.iter().map(|r| pick(r).nhar_mean).collect();
    Ok(ConditionSummary {
        chair_s: chair.chair_s,
        chair_i: chair.chair_i,
        mean_inert_share: mean(&shares),
        mean_nhar: mean(&nhars).unwrap_or(0.0),
    })
}

/// Baseline against intervened decoding on the same scenes.
pub fn run_ab(
    scenes: &[ToyScene],
    model: &ToyTransformer,
    profile: &HijackProfile,
    knobs: &EvalKnobs,
    seed: u64,
) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::Config("evaluation needs >= 1 scene".into()));
    }
    let mut results = scenes
        .par_iter()
        .map(|s| run_scene(s, model, profile, knobs))
        .collect::<Result<Vec<_>>>()?;
    results.sort_by_key(|r| r.scene_id);

    let vocab = model.vocab();
    let baseline = summarize(&results, |r| &r.baseline, vocab)?;
    let intervened = summarize(&results, |r| &r.intervened, vocab)?;
    let real: Vec<f64> = results.iter().flat_map(|r| r.har_steps.0.iter().copied()).collect();
    let hal: Vec<f64> = results.iter().flat_map(|r| r.har_steps.1.iter().copied()).collect();
    let (mut reduced, mut compared) = (0, 0);
    for r in &results {
        if let (Some(b), Some(i)) = (r.baseline.inert_share, r.intervened.inert_share) {
            compared += 1;
            reduced += usize::from(i < b);
        }
    }
    let habi_vs_persist = if knobs.compare_persist {
        let habi: BTreeMap<u64, Vec<usize>> = results.iter().map(|r| (r.scene_id, r.inert.clone())).collect();
        let persist: BTreeMap<u64, Vec<usize>> = results
            .iter()
            .map(|r| (r.scene_id, r.persistent.clone().unwrap_or_default()))
            .collect();
        Some(compare_identifiers(&habi, &persist)?)
    } else {
        None
    };
    Ok(EvalReport {
        n_scenes: results.len(),
        seed,
        knobs: knobs.clone(),
        h_target: profile.h_target.clone(),
        baseline,
        intervened,
        har_real_mean: mean(&real),
        har_hal_mean: mean(&hal),
        inert_share_reduced: reduced,
        inert_share_compared: compared,
        habi_vs_persist,
        scenes: results,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// `scene_id,condition,chair_hit,inert_share,nhar_mean`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "scene_id,condition,chair_hit,inert_share,nhar_mean")?;
        for r in &self.scenes {
            for (name, c) in [("baseline", &r.baseline), ("intervened", &r.intervened)] {
                writeln!(
                    out,
                    "{},{name},{},{},{}",
                    r.scene_id,
                    u8::from(c.chair_hit),
                    c.inert_share.map_or_else(String::new, |v| v.to_string()),
                    c.nhar_mean
                )?;
            }
        }
        Ok(())
    }
}

/// Outcome of masking inert tokens versus an equal-sized random set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroAblationReport {
    pub n_scenes: usize,
    /// Scenes whose greedy output is unchanged with the inert set masked.
    pub unchanged_inert: usize,
    /// Scenes whose output changed with the random non-inert set masked.
    pub changed_random: usize,
    pub changed_inert: usize,
}

pub fn zero_ablation_check(
    scenes: &[ToyScene],
    model: &ToyTransformer,
    profile: &HijackProfile,
    max_new: usize,
    seed: u64,
) -> Result<ZeroAblationReport> {
    let outcomes = scenes
        .par_iter()
        .map(|scene| -> Result<(bool, bool)> {
            let input = scene.input(model);
            let vision = Some(scene.embeddings.view());
            let base = model.generate_greedy(&input, vision, max_new, None)?;
            let inert = identify_inert(&base.captures, model, profile)?;
            let others: Vec<usize> = (0..scene.n_vision()).filter(|p| !inert.contains(p)).collect();
            let mut r = rng::indexed_substream(seed, "ablation", scene.id);
            let random: Vec<usize> = others
                .choose_multiple(&mut r, inert.len().min(others.len()))
                .copied()
                .collect();
            let masked = |set: Vec<usize>| -> Result<Vec<TokenId>> {
                let hook = ZeroAblateHook::new(set);
                Ok(model.generate_greedy(&input, vision, max_new, Some(&hook))?.tokens)
            };
            let inert_changed = masked(inert)? != base.tokens;
            let random_changed = masked(random)? != base.tokens;
            Ok((inert_changed, random_changed))
        })
        .collect::<Result<Vec<_>>>()?;
    let changed_inert = outcomes.iter().filter(|o| o.0).count();
    Ok(ZeroAblationReport {
        n_scenes: scenes.len(),
        unchanged_inert: scenes.len() - changed_inert,
        changed_random: outcomes.iter().filter(|o| o.1).count(),
        changed_inert,
    })
}
