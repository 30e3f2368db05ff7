// SPDX-License-Identifier: MIT OR Apache-2.0

//! The calibration artifact, enriched stage by stage and stored as one JSON
//! document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TokenId};

/// Population the hijack-score threshold `τ_s` is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauSource {
    /// Every vision token's score.
    #[default]
    AllScores,
    /// One mean score per anchor word.
    AnchorMeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileMeta {
    pub n_scenes: usize,
    pub seed: u64,
    pub smoothing: String,
    pub tau_s_source: TauSource,
    /// Machine-readable calibration warning, e.g. a degenerate Otsu split.
    pub warning: Option<String>,
    pub model: ModelConfig,
}

/// Anchors, thresholds, knobs and (after head ranking) the head table.
///
/// Head ids in `heads` and `h_target` are 1-based `(layer, head)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HijackProfile {
    pub anchors: Vec<TokenId>,
    pub tau_s: Option<f64>,
    pub tau_r: Option<f64>,
    pub iqr_multiplier: f64,
    pub salient_fraction: f64,
    pub skip_salient_filter: bool,
    pub heads: Vec<(usize, usize, f64)>,
    pub h_target: Vec<(usize, usize)>,
    pub k: Option<usize>,
    pub alpha: f64,
    pub meta: ProfileMeta,
}

pub const NO_INERT_WARNING: &str = "no_inert_tokens_detectable";

impl HijackProfile {
    /// Thresholds needed by inert-token identification.
    pub fn thresholds(&self) -> Result<(f64, f64)> {
        match (self.tau_s, self.tau_r) {
            (Some(s), Some(r)) => Ok((s, r)),
            _ => Err(Error::ProfileIncomplete(
                "profile has no anchor thresholds; run calibration first".into(),
            )),
        }
    }

    pub fn has_heads(&self) -> bool {
        self.k.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if let Some(r) = self.tau_r {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("tau_r {r} outside [0, 1]"));
            }
        }
        if !(self.salient_fraction > 0.0 && self.salient_fraction <= 1.0) {
            return bad(format!("salient_fraction {} outside (0, 1]", self.salient_fraction));
        }
        if self.iqr_multiplier.is_nan() || self.iqr_multiplier < 0.0 {
            return bad(format!("iqr_multiplier {} < 0", self.iqr_multiplier));
        }
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return bad(format!("alpha {} < 0", self.alpha));
        }
        let v = self.meta.model.vocab_size as TokenId;
        if self.anchors.iter().any(|&a| a >= v) {
            return bad("anchor outside vocabulary".into());
        }
        if let Some(k) = self.k {
            if self.h_target.len() != k {
                return bad(format!("h_target has {} heads, k = {k}", self.h_target.len()));
            }
        }
        let (l, h) = (self.meta.model.n_layers, self.meta.model.n_heads);
        let in_bounds = |&(a, b): &(usize, usize)| (1..=l).contains(&a) && (1..=h).contains(&b);
        if !self.h_target.iter().all(in_bounds) || !self.heads.iter().all(|&(a, b, _)| in_bounds(&(a, b))) {
            return bad("head id outside model bounds".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile() -> HijackProfile {
        HijackProfile {
            anchors: vec![30, 53],
            tau_s: Some(0.25),
            tau_r: Some(1.0 / 256.0),
            iqr_multiplier: 1.5,
            salient_fraction: 0.05,
            skip_salient_filter: false,
            heads: vec![(1, 2, 0.5)],
            h_target: vec![(1, 2)],
            k: Some(1),
            alpha: 0.1,
            meta: ProfileMeta {
                n_scenes: 3,
                seed: 9,
                smoothing: "log1p".into(),
                tau_s_source: TauSource::AllScores,
                warning: None,
                model: ModelConfig::toy(9),
            },
        }
    }

    #[test]
    fn json_round_trip_is_byte_identical() {
        let s = profile().to_json().unwrap();
        let back = HijackProfile::from_json(&s).unwrap();
        assert_eq!(back, profile());
        assert_eq!(back.to_json().unwrap(), s);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&profile().to_json().unwrap()).unwrap();
        v["extra"] = 1.into();
        assert!(matches!(
            HijackProfile::from_json(&v.to_string()),
            Err(Error::Json(_))
        ));
    }

    #[test]
    fn k_must_match_target_size() {
        let mut p = profile();
        p.k = Some(2);
        assert!(p.validate().is_err());
    }
}
