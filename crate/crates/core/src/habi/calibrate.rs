// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rayon::prelude::*;

use super::profile::{HijackProfile, ProfileMeta, TauSource, NO_INERT_WARNING};
use super::stats::{otsu_threshold, salient_filter, Histogram};
use super::{component_attention, discover_anchors, hijack_score, hijacking_ratio, AnchorTable, HijackComponents};
use crate::error::{Error, Result};
use crate::lens::{decode_traces, trace_anchor, AnchorResult, Trace};
use crate::model::{TokenId, ToyScene, ToyTransformer};

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationKnobs {
    pub iqr_multiplier: f64,
    pub salient_fraction: f64,
    pub skip_salient_filter: bool,
    pub tau_s_source: TauSource,
    /// Decoding steps that feed the attention component.
    pub attention_steps: usize,
    pub max_new: usize,
    pub otsu_bins: usize,
    /// Echoed into the profile for the intervention stage.
    pub alpha: f64,
}

impl Default for CalibrationKnobs {
    fn default() -> Self {
        Self {
            iqr_multiplier: 1.5,
            salient_fraction: 0.05,
            skip_salient_filter: false,
            tau_s_source: TauSource::AllScores,
            attention_steps: 10,
            max_new: 10,
            otsu_bins: 256,
            alpha: 0.1,
        }
    }
}

impl CalibrationKnobs {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.iqr_multiplier.is_finite() && self.iqr_multiplier >= 0.0) {
            return bad(format!("iqr multiplier {} must be >= 0", self.iqr_multiplier));
        }
        if !(self.salient_fraction > 0.0 && self.salient_fraction <= 1.0) {
            return bad(format!("salient fraction {} not in (0, 1]", self.salient_fraction));
        }
        if self.attention_steps == 0 || self.max_new == 0 {
            return bad("attention steps and max_new must be >= 1".into());
        }
        if self.otsu_bins < 2 {
            return bad("otsu bins must be >= 2".into());
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("alpha {} must be >= 0", self.alpha));
        }
        Ok(())
    }
}

/// Per-scene quantities calibration needs.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObservation {
    pub scene_id: u64,
    pub tokens: Vec<TokenId>,
    pub traces: Vec<Trace>,
    pub anchors: Vec<AnchorResult>,
    /// Raw mean decoding attention per vision position.
    pub attention: Vec<f64>,
}

pub fn observe_scene(
    model: &ToyTransformer,
    scene: &ToyScene,
    knobs: &CalibrationKnobs,
) -> Result<SceneObservation> {
    let gen = model.generate_greedy(
        &scene.input(model),
        Some(scene.embeddings.view()),
        knobs.max_new,
        None,
    )?;
    let traces = decode_traces(&gen.captures[0], model)?;
    let anchors = traces.iter().map(trace_anchor).collect();
    let attention = traces
        .iter()
        .map(|t| component_attention(&gen.captures, t.vision_pos, knobs.attention_steps))
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneObservation {
        scene_id: scene.id,
        tokens: gen.tokens,
        traces,
        anchors,
        attention,
    })
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub profile: HijackProfile,
    pub table: AnchorTable,
    /// Hijack score of every vision token, scene-major.
    pub scores: Vec<f64>,
    /// Hijacking ratios of the tokens that fed the Otsu split.
    pub ratios_salient: Vec<f64>,
    pub observations: Vec<SceneObservation>,
}

/// Build a profile from a calibration corpus. Head fields stay empty.
pub fn calibrate(
    scenes: &[ToyScene],
    model: &ToyTransformer,
    knobs: &CalibrationKnobs,
    seed: u64,
) -> Result<Calibration> {
    knobs.validate()?;
    if scenes.is_empty() {
        return Err(Error::Config("calibration needs >= 1 scene".into()));
    }
    let observations = scenes
        .par_iter()
        .map(|s| observe_scene(model, s, knobs))
        .collect::<Result<Vec<_>>>()?;

    let mut anchor_counts: BTreeMap<TokenId, usize> = BTreeMap::new();
    for obs in &observations {
        for a in &obs.anchors {
            *anchor_counts.entry(a.anchor).or_default() += 1;
        }
    }
    let mut table = AnchorTable::new();
    let mut scores = Vec::new();
    for obs in &observations {
        for (a, &att) in obs.anchors.iter().zip(&obs.attention) {
            let c = HijackComponents::from_raw(a.dominance, anchor_counts[&a.anchor], att);
            let s = hijack_score(c);
            table.insert(a.anchor, s);
            scores.push(s);
        }
    }
    let population = match knobs.tau_s_source {
        TauSource::AllScores => scores.clone(),
        TauSource::AnchorMeans => table.means().into_iter().map(|(_, m)| m).collect(),
    };
    let (anchors, tau_s) = discover_anchors(&table, &population, knobs.iqr_multiplier)?;
    let anchor_set: BTreeSet<TokenId> = anchors.iter().copied().collect();

    let mut ratios_salient = Vec::new();
    for obs in &observations {
        let picked: Vec<usize> = if knobs.skip_salient_filter {
            (0..obs.traces.len()).collect()
        } else {
            salient_filter(&obs.attention, knobs.salient_fraction)?
        };
        ratios_salient.extend(picked.iter().map(|&i| hijacking_ratio(&obs.traces[i], &anchor_set)));
    }
    let (tau_r, warning) = match otsu_threshold(&ratios_salient, knobs.otsu_bins) {
        Ok(t) => (t, None),
        Err(Error::Degenerate(_) | Error::Domain(_)) => (1.0, Some(NO_INERT_WARNING.to_string())),
        Err(e) => return Err(e),
    };

    let profile = HijackProfile {
        anchors,
        tau_s: Some(tau_s),
        tau_r: Some(tau_r),
        iqr_multiplier: knobs.iqr_multiplier,
        salient_fraction: knobs.salient_fraction,
        skip_salient_filter: knobs.skip_salient_filter,
        heads: Vec::new(),
        h_target: Vec::new(),
        k: None,
        alpha: knobs.alpha,
        meta: ProfileMeta {
            n_scenes: scenes.len(),
            seed,
            smoothing: "log1p".into(),
            tau_s_source: knobs.tau_s_source,
            warning,
            model: *model.config(),
        },
    };
    Ok(Calibration {
        profile,
        table,
        scores,
        ratios_salient,
        observations,
    })
}

/// `bin_left,bin_right,count,population` rows: scores over `[0, max]`,
/// salient ratios over `[0, 1]`.
pub fn write_histogram_csv<W: Write>(out: &mut W, cal: &Calibration, bins: usize) -> Result<()> {
    writeln!(out, "bin_left,bin_right,count,population")?;
    let top = cal.scores.iter().copied().fold(0.0, f64::max);
    let hi = if top > 0.0 { top } else { 1.0 };
    for (name, values, hi) in [
        ("scores", &cal.scores, hi),
        ("ratios_salient", &cal.ratios_salient, 1.0),
    ] {
        let h = Histogram::new(values, 0.0, hi, bins)?;
        for (i, c) in h.counts.iter().enumerate() {
            writeln!(out, "{},{},{c},{name}", h.edge(i), h.edge(i + 1))?;
        }
    }
    Ok(())
}
