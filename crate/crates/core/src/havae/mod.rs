// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decode-time attention interventions, packaged as [`AttentionHook`]s.
//!
//! Each strategy is registered by name in a [`HookRegistry`]; the default
//! registry knows `enhance`, `penalize`, `zero_ablate` and `compose`
//! (penalize, then enhance). Callers can register their own strategies and
//! select them by name at runtime.

mod kernels;
mod registry;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

pub use kernels::{enhance_attention, penalize_inert, zero_ablate};
pub use registry::{HookFactory, HookRegistry};

use crate::error::{Error, Result};
use crate::habi::HijackProfile;
use crate::heads::HeadId;
use crate::model::{AttentionHook, HookContext, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Enhance,
    Penalize,
    ZeroAblate,
    Compose,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Enhance => "enhance",
            Mode::Penalize => "penalize",
            Mode::ZeroAblate => "zero_ablate",
            Mode::Compose => "compose",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "enhance" => Ok(Mode::Enhance),
            "penalize" => Ok(Mode::Penalize),
            "zero_ablate" | "zero-ablate" => Ok(Mode::ZeroAblate),
            "compose" => Ok(Mode::Compose),
            other => Err(Error::Spec(format!("unknown intervention mode {other:?}"))),
        }
    }
}

/// One intervention, resolved for a single input.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionSpec {
    pub h_target: Vec<HeadId>,
    pub alpha: f64,
    pub beta: f64,
    /// Inert vision positions of this input (the masked set for zero-ablation).
    pub inert: Vec<usize>,
    pub renormalize: bool,
    pub mode: Mode,
}

impl InterventionSpec {
    /// Heads and α from the profile; the inert set is left for the caller.
    pub fn from_profile(profile: &HijackProfile, mode: Mode, beta: f64, renormalize: bool) -> Self {
        Self {
            h_target: profile
                .h_target
                .iter()
                .map(|&(l, h)| HeadId::new(l, h))
                .collect(),
            alpha: profile.alpha,
            beta,
            inert: Vec::new(),
            renormalize,
            mode,
        }
    }

    pub fn with_inert(mut self, inert: Vec<usize>) -> Self {
        self.inert = inert;
        self
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Spec(format!("alpha {} must be >= 0", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Spec(format!("beta {} outside [0, 1]", self.beta)));
        }
        for h in &self.h_target {
            h.check(cfg).map_err(|e| Error::Spec(e.to_string()))?;
        }
        Ok(())
    }

    /// 0-based target heads per 0-based layer.
    fn targets_by_layer(&self, n_layers: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); n_layers];
        let set: BTreeSet<HeadId> = self.h_target.iter().copied().collect();
        for h in set {
            out[h.layer - 1].push(h.head - 1);
        }
        out
    }
}

/// Vision attention boost on the target heads.
#[derive(Debug, Clone)]
pub struct EnhanceHook {
    targets: Vec<Vec<usize>>,
    alpha: f64,
    renormalize: bool,
}

impl EnhanceHook {
    pub fn new(spec: &InterventionSpec, cfg: &ModelConfig) -> Result<Self> {
        spec.validate(cfg)?;
        Ok(Self {
            targets: spec.targets_by_layer(cfg.n_layers),
            alpha: spec.alpha,
            renormalize: spec.renormalize,
        })
    }
}

impl AttentionHook for EnhanceHook {
    fn name(&self) -> &str {
        "enhance"
    }

    fn apply(&self, ctx: &HookContext<'_>, attn: &mut Array3<f64>) -> Result<()> {
        let targets = self.targets.get(ctx.layer).map_or(&[][..], Vec::as_slice);
        enhance_attention(
            attn,
            targets,
            self.alpha,
            ctx.spans.vision.clone(),
            ctx.decode_rows.clone(),
            self.renormalize,
        )
    }
}

/// Damp inert keys on the target heads.
#[derive(Debug, Clone)]
pub struct PenalizeHook {
    targets: Vec<Vec<usize>>,
    beta: f64,
    inert: BTreeSet<usize>,
}

impl PenalizeHook {
    pub fn new(spec: &InterventionSpec, cfg: &ModelConfig) -> Result<Self> {
        spec.validate(cfg)?;
        Ok(Self {
            targets: spec.targets_by_layer(cfg.n_layers),
            beta: spec.beta,
            inert: spec.inert.iter().copied().collect(),
        })
    }
}

impl AttentionHook for PenalizeHook {
    fn name(&self) -> &str {
        "penalize"
    }

    fn apply(&self, ctx: &HookContext<'_>, attn: &mut Array3<f64>) -> Result<()> {
        let targets = self.targets.get(ctx.layer).map_or(&[][..], Vec::as_slice);
        penalize_inert(attn, targets, self.beta, &self.inert, ctx.decode_rows.clone())
    }
}

/// Remove a token set from every head's decoding rows.
#[derive(Debug, Clone)]
pub struct ZeroAblateHook {
    mask: BTreeSet<usize>,
}

impl ZeroAblateHook {
    pub fn new(mask: impl IntoIterator<Item = usize>) -> Self {
        Self {
            mask: mask.into_iter().collect(),
        }
    }
}

impl AttentionHook for ZeroAblateHook {
    fn name(&self) -> &str {
        "zero_ablate"
    }

    fn apply(&self, ctx: &HookContext<'_>, attn: &mut Array3<f64>) -> Result<()> {
        zero_ablate(attn, &self.mask, ctx.decode_rows.clone(), ctx.layer)
    }
}

/// Hooks applied in sequence.
pub struct ComposeHook {
    parts: Vec<Box<dyn AttentionHook>>,
}

impl ComposeHook {
    pub fn new(parts: Vec<Box<dyn AttentionHook>>) -> Self {
        Self { parts }
    }
}

impl fmt::Debug for ComposeHook {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries(self.parts.iter().map(|p| p.name()))
            .finish()
    }
}

impl AttentionHook for ComposeHook {
    fn name(&self) -> &str {
        "compose"
    }

    fn apply(&self, ctx: &HookContext<'_>, attn: &mut Array3<f64>) -> Result<()> {
        for p in &self.parts {
            p.apply(ctx, attn)?;
        }
        Ok(())
    }
}

/// Check that `profile` carries what `mode` needs, then build its hook from
/// the default registry.
pub fn build_hook(spec: &InterventionSpec, profile: &HijackProfile) -> Result<Box<dyn AttentionHook>> {
    let needs_heads = matches!(spec.mode, Mode::Enhance | Mode::Penalize | Mode::Compose);
    let needs_inert = matches!(spec.mode, Mode::Penalize | Mode::ZeroAblate | Mode::Compose);
    if needs_heads && !profile.has_heads() {
        return Err(Error::ProfileIncomplete(format!(
            "mode {} needs ranked heads; run head ranking first",
            spec.mode
        )));
    }
    if needs_inert {
        profile.thresholds()?;
    }
    HookRegistry::with_defaults().build(spec.mode.as_str(), spec, &profile.meta.model)
}
