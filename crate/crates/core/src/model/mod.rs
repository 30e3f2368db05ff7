// SPDX-License-Identifier: MIT OR Apache-2.0

//! The toy multimodal decoder, its inputs, and synthetic fixtures.

mod capture;
mod config;
mod fixture;
mod hook;
mod layout;
mod scene;
mod sequence;
mod transformer;

pub use capture::ForwardCapture;
pub use config::ModelConfig;
pub use fixture::{make_capture_fixture, CaptureSpec, FixtureTruth};
pub use hook::{AttentionHook, HookContext, IdentityHook};
pub use layout::{build_layouts, ChannelLayout, TokenId, VocabLayout};
pub use scene::{make_battery, make_scene, SceneParams, ToyScene};
pub use sequence::{SegmentedSequence, Spans};
pub use transformer::{
    argmax, Affinity, Circuits, Generation, HeadRole, HeadWeights, Span, ToyTransformer,
};

use crate::error::Result;

/// Build the model for `config` with the default planted circuits.
pub fn init_model(config: ModelConfig) -> Result<ToyTransformer> {
    ToyTransformer::new(config)
}
