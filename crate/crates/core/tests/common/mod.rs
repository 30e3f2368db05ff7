// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use hijacklens::habi::{HijackProfile, ProfileMeta, TauSource};
use hijacklens::model::{ModelConfig, TokenId};

/// Profile with the given anchors and ratio threshold and no heads.
pub fn bare_profile(model: ModelConfig, anchors: &[TokenId], tau_r: f64) -> HijackProfile {
    HijackProfile {
        anchors: anchors.to_vec(),
        tau_s: Some(0.0),
        tau_r: Some(tau_r),
        iqr_multiplier: 1.5,
        salient_fraction: 0.05,
        skip_salient_filter: false,
        heads: Vec::new(),
        h_target: Vec::new(),
        k: None,
        alpha: 0.1,
        meta: ProfileMeta {
            n_scenes: 0,
            seed: 0,
            smoothing: "log1p".into(),
            tau_s_source: TauSource::AllScores,
            warning: None,
            model,
        },
    }
}

/// Same profile with `heads` as the 1-based target set.
pub fn with_targets(mut p: HijackProfile, heads: &[(usize, usize)]) -> HijackProfile {
    p.h_target = heads.to_vec();
    p.heads = heads.iter().map(|&(l, h)| (l, h, 0.0)).collect();
    p.k = Some(heads.len());
    p
}
