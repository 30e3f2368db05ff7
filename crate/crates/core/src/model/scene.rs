// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic "images": vision embeddings with a known object set and
//! planted inert tokens.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::layout::TokenId;
use super::sequence::SegmentedSequence;
use super::transformer::{Span, ToyTransformer};
use crate::error::{Error, Result};
use crate::rng;

/// Knobs of [`make_scene`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub n_inert: usize,
    /// Inclusive bounds on the number of distinct true objects.
    pub true_objects: (usize, usize),
    /// Magnitude of the object feature in a normal token.
    pub object_scale: f64,
    /// Std of isotropic noise over the feature and junk channels.
    pub noise: f64,
    /// Sink-key magnitude of inert tokens, drawn per scene.
    pub sink_strength: Span,
    /// Magnitude of the anchor-word direction in inert tokens.
    pub anchor_scale: f64,
    /// Extra salience of one focal object token, drawn per scene.
    pub focal_boost: Span,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            n_inert: 2,
            true_objects: (3, 4),
            object_scale: 1.0,
            noise: 0.1,
            sink_strength: Span(1.2, 1.8),
            anchor_scale: 10.0,
            focal_boost: Span(0.0, 1.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyScene {
    pub id: u64,
    /// Sorted object ids present in the scene.
    pub true_objects: Vec<TokenId>,
    /// `n_vision × d_model`
    pub embeddings: Array2<f64>,
    /// Sorted vision positions carrying the planted sink.
    pub planted_inert: Vec<usize>,
    pub anchor_word: TokenId,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneDoc {
    id: u64,
    true_objects: Vec<TokenId>,
    planted_inert: Vec<usize>,
    anchor_word: TokenId,
    embeddings: Vec<Vec<f64>>,
}

impl ToyScene {
    pub fn n_vision(&self) -> usize {
        self.embeddings.nrows()
    }

    /// Vision span followed by the model's instruction prompt.
    pub fn input(&self, model: &ToyTransformer) -> SegmentedSequence {
        SegmentedSequence::new(self.n_vision(), &model.vocab().prompt, &[])
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = SceneDoc {
            id: self.id,
            true_objects: self.true_objects.clone(),
            planted_inert: self.planted_inert.clone(),
            anchor_word: self.anchor_word,
            embeddings: self.embeddings.outer_iter().map(|r| r.to_vec()).collect(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: SceneDoc = serde_json::from_str(s)?;
        let rows = doc.embeddings.len();
        let cols = doc.embeddings.first().map_or(0, Vec::len);
        if doc.embeddings.iter().any(|r| r.len() != cols) {
            return Err(Error::Validation("ragged scene embeddings".into()));
        }
        if doc.planted_inert.iter().any(|&p| p >= rows) {
            return Err(Error::Validation("planted position outside vision span".into()));
        }
        let flat: Vec<f64> = doc.embeddings.into_iter().flatten().collect();
        let embeddings = Array2::from_shape_vec((rows, cols), flat)
            .map_err(|e| Error::Validation(e.to_string()))?;
        Ok(Self {
            id: doc.id,
            true_objects: doc.true_objects,
            embeddings,
            planted_inert: doc.planted_inert,
            anchor_word: doc.anchor_word,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn noise_vec(model: &ToyTransformer, rng: &mut ChaCha8Rng, std: f64) -> Array1<f64> {
    let ch = model.channels();
    let mut v = Array1::zeros(model.config().d_model);
    for c in ch.features.clone().chain(ch.junk.clone()) {
        let z: f64 = StandardNormal.sample(rng);
        v.scaled_add(z * std, &model.direction(c));
    }
    v
}

/// Build one scene for `model` from `seed`.
pub fn make_scene(
    model: &ToyTransformer,
    params: &SceneParams,
    id: u64,
    seed: u64,
) -> Result<ToyScene> {
    let cfg = model.config();
    let n_vision = cfg.n_vision;
    if params.n_inert >= n_vision {
        return Err(Error::Config(format!(
            "n_inert {} must be < n_vision {}",
            params.n_inert, n_vision
        )));
    }
    let vocab = model.vocab();
    if vocab.n_objects() == 0 {
        return Err(Error::Config("model has no object classes".into()));
    }
    let ch = model.channels();
    let mut rng = rng::seeded_rng(seed);

    let mut positions: Vec<usize> = (0..n_vision).collect();
    positions.shuffle(&mut rng);
    let mut planted_inert: Vec<usize> = positions[..params.n_inert].to_vec();
    planted_inert.sort_unstable();
    let normal: Vec<usize> = positions[params.n_inert..].to_vec();

    let (lo, hi) = params.true_objects;
    let hi = hi.min(vocab.n_objects()).min(normal.len()).max(1);
    let lo = lo.clamp(1, hi);
    let n_true = rng.random_range(lo..=hi);
    let mut objs: Vec<TokenId> = vocab.object_ids().collect();
    objs.shuffle(&mut rng);
    let mut true_objects: Vec<TokenId> = objs[..n_true].to_vec();
    let weights: Vec<f64> = (0..n_true).map(|_| rng.random_range(0.5..1.5)).collect();

    // Every true object gets at least one token; the rest follow the weights.
    let mut assigned: Vec<TokenId> = true_objects.clone();
    while assigned.len() < normal.len() {
        let pick = (0..n_true)
            .collect::<Vec<_>>()
            .choose_weighted(&mut rng, |&i| weights[i])
            .map(|&i| true_objects[i])
            .map_err(|e| Error::Config(e.to_string()))?;
        assigned.push(pick);
    }
    assigned.shuffle(&mut rng);

    let anchor_word = *vocab
        .hijack_words
        .choose(&mut rng)
        .expect("layout always has a hijack word");
    let anchor_dir = {
        let r = model.unembed().row(anchor_word as usize).to_owned();
        let n = r.dot(&r).sqrt();
        r / n
    };
    let sink = params.sink_strength.draw(&mut rng);
    let focal_boost = params.focal_boost.draw(&mut rng);
    let focal = normal[rng.random_range(0..normal.len())];

    let d = cfg.d_model;
    let mut embeddings = Array2::zeros((n_vision, d));
    for (slot, &pos) in normal.iter().enumerate() {
        let k = vocab
            .object_index(assigned[slot])
            .expect("assigned ids are objects");
        let salience = if pos == focal { 1.0 + focal_boost } else { 1.0 };
        let mut row = noise_vec(model, &mut rng, params.noise);
        row += &model.direction(ch.bias);
        row.scaled_add(salience, &model.direction(ch.salience));
        row.scaled_add(params.object_scale, &model.feature_direction(k));
        embeddings.row_mut(pos).assign(&row);
    }
    for &pos in &planted_inert {
        let mut row = noise_vec(model, &mut rng, params.noise);
        row += &model.direction(ch.bias);
        row.scaled_add(sink, &model.direction(ch.sink));
        row.scaled_add(params.anchor_scale, &anchor_dir);
        embeddings.row_mut(pos).assign(&row);
    }

    true_objects.sort_unstable();
    Ok(ToyScene {
        id,
        true_objects,
        embeddings,
        planted_inert,
        anchor_word,
    })
}

/// `n` scenes with ids `0..n`, each from its own indexed substream of `seed`.
pub fn make_battery(
    model: &ToyTransformer,
    params: &SceneParams,
    n: usize,
    seed: u64,
    stream: &str,
) -> Result<Vec<ToyScene>> {
    (0..n as u64)
        .map(|i| {
            make_scene(model, params, i, rng::indexed_seed(seed, stream, i))
        })
        .collect()
}
