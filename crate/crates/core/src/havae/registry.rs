// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fmt;

use super::{ComposeHook, EnhanceHook, InterventionSpec, PenalizeHook, ZeroAblateHook};
use crate::error::{Error, Result};
use crate::model::{AttentionHook, ModelConfig};

pub type HookFactory =
    Box<dyn Fn(&InterventionSpec, &ModelConfig) -> Result<Box<dyn AttentionHook>> + Send + Sync>;

/// Intervention strategies by name.
#[derive(Default)]
pub struct HookRegistry {
    factories: BTreeMap<String, HookFactory>,
}

impl fmt::Debug for HookRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.factories.keys()).finish()
    }
}

impl HookRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_defaults() -> Self {
        let mut r = Self::new();
        r.register("enhance", |s, c| Ok(Box::new(EnhanceHook::new(s, c)?)));
        r.register("penalize", |s, c| Ok(Box::new(PenalizeHook::new(s, c)?)));
        r.register("zero_ablate", |s, _| {
            Ok(Box::new(ZeroAblateHook::new(s.inert.iter().copied())))
        });
        r.register("compose", |s, c| {
            Ok(Box::new(ComposeHook::new(vec![
                Box::new(PenalizeHook::new(s, c)?),
                Box::new(EnhanceHook::new(s, c)?),
            ])))
        });
        r
    }

    /// Add or replace a strategy.
    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&InterventionSpec, &ModelConfig) -> Result<Box<dyn AttentionHook>> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build(
        &self,
        name: &str,
        spec: &InterventionSpec,
        cfg: &ModelConfig,
    ) -> Result<Box<dyn AttentionHook>> {
        let f = self.factories.get(name).ok_or_else(|| {
            Error::Spec(format!(
                "no intervention named {name:?} (known: {})",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })?;
        f(spec, cfg)
    }
}
