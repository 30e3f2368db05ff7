// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention-only residual decoder with injected vision embeddings.
//!
//! Each block adds `Σ_h A^h X W_OV^h` to the residual, where `A^h` is the
//! causal softmax of `(X W_Q^h)(X W_K^h)^T / sqrt(d_head)`. There are no MLP
//! blocks and no normalization layers, so every hidden state is an exact
//! linear mix of the embeddings and the logit lens stays analytically
//! controllable.
//!
//! Weights are drawn from a seeded generator around a small set of planted
//! circuits (see [`Circuits`]): visual heads that read object features out
//! of salient vision tokens and write the matching object words, sink-prone heads drawn to tokens carrying the sink
//! key, and text heads that write a language prior over object classes. The
//! whole residual basis is then rotated by a seeded orthogonal matrix.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::capture::ForwardCapture;
use super::config::ModelConfig;
use super::hook::{AttentionHook, HookContext};
use super::layout::{build_layouts, ChannelLayout, TokenId, VocabLayout};
use super::sequence::SegmentedSequence;
use crate::error::{Error, Result};
use crate::rng;

/// Functional role a head is planted with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadRole {
    /// Attends to salient vision tokens and copies their object content.
    Visual,
    /// Strongly drawn to the sink key; writes almost nothing.
    Sink,
    /// Attends to text and writes the object prior.
    Text,
}

/// Inclusive range a per-head coefficient is drawn from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Span(pub f64, pub f64);

impl Span {
    pub(crate) fn draw(self, rng: &mut ChaCha8Rng) -> f64 {
        if self.1 <= self.0 {
            self.0
        } else {
            rng.random_range(self.0..=self.1)
        }
    }
}

/// Key affinities of one head role: logit contribution per unit of the sink,
/// salience and text channels of the key token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affinity {
    pub sink: Span,
    pub salience: Span,
    pub text: Span,
}

/// Planted-circuit knobs of [`ToyTransformer::with_circuits`].
#[derive(Debug, Clone, PartialEq)]
pub struct Circuits {
    pub visual: Affinity,
    pub sink: Affinity,
    pub text: Affinity,
    /// Gain of the feature → object-word OV map of visual heads.
    pub copy_gain: f64,
    /// An emitted object word pushes its own logit down at the next step.
    pub repeat_penalty: f64,

    /// Gain of the text → object-prior OV map of text heads.
    pub prior_gain: f64,
    /// Strength of word-dependent prior written from lexical content.
    pub lexical_prior: f64,
    /// Object content in the query raises affinity to salient vision keys.
    pub grounding: f64,
    /// Std of the lexical → gate coupling (per-step hijack variation).
    pub query_noise: f64,
    /// Std of unstructured Q/K entries.
    pub qk_noise: f64,
    /// Std (times 1/sqrt(d)) of unstructured OV entries.
    pub ov_noise: f64,
    pub lexical_scale: f64,
    pub position_scale: f64,
    /// Norm of every unembedding row.
    pub unembed_scale: f64,
    /// Decay of the object popularity prior per rank.
    pub prior_decay: f64,
}

impl Default for Circuits {
    fn default() -> Self {
        Self {
            visual: Affinity {
                sink: Span(0.8, 1.2),
                salience: Span(2.0, 3.0),
                text: Span(0.0, 0.5),
            },
            sink: Affinity {
                sink: Span(6.0, 7.0),
                salience: Span(0.3, 0.8),
                text: Span(0.5, 1.0),
            },
            text: Affinity {
                sink: Span(0.5, 1.0),
                salience: Span(0.0, 0.5),
                text: Span(2.0, 3.0),
            },
            copy_gain: 1.0,
            repeat_penalty: 2.0,
            prior_gain: 1.0,
            lexical_prior: 0.2,
            grounding: 0.3,
            query_noise: 0.3,
            qk_noise: 0.05,
            ov_noise: 0.01,
            lexical_scale: 1.0,
            position_scale: 0.5,
            unembed_scale: 2.0,
            prior_decay: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    /// `d_model × d_head`
    pub w_q: Array2<f64>,
    /// `d_model × d_head`
    pub w_k: Array2<f64>,
    /// `d_model × d_model`, applied to row vectors.
    pub w_ov: Array2<f64>,
}

/// Result of greedy decoding: emitted ids and one capture per step.
#[derive(Debug, Clone)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub captures: Vec<ForwardCapture>,
}

#[derive(Debug, Clone)]
pub struct ToyTransformer {
    config: ModelConfig,
    vocab: VocabLayout,
    channels: ChannelLayout,
    roles: Vec<Vec<HeadRole>>,
    /// Orthogonal map from the canonical channel basis to model space
    /// (row vectors: `x_model = x_canonical · rotation`).
    rotation: Array2<f64>,
    embed: Array2<f64>,
    pos_embed: Array2<f64>,
    layers: Vec<Vec<HeadWeights>>,
    unembed: Array2<f64>,
    prior: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * std
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize, dims: &[usize]) -> Array1<f64> {
    let mut v = Array1::<f64>::zeros(d);
    loop {
        for &i in dims {
            v[i] += gaussian(rng, 1.0);
        }
        let n = v.dot(&v).sqrt();
        if n > 1e-9 {
            return v / n;
        }
        v.fill(0.0);
    }
}

/// Seeded orthogonal matrix via Gram-Schmidt on a Gaussian draw.
fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let mut m: Array2<f64> = Array2::from_shape_fn((d, d), |_| normal.sample(rng));
        let mut ok = true;
        for i in 0..d {
            for j in 0..i {
                let proj = m.row(i).dot(&m.row(j));
                let rj = m.row(j).to_owned();
                m.row_mut(i).scaled_add(-proj, &rj);
            }
            let n = m.row(i).dot(&m.row(i)).sqrt();
            if n < 1e-6 {
                ok = false;
                break;
            }
            m.row_mut(i).mapv_inplace(|x| x / n);
        }
        if ok {
            return m;
        }
    }
}

fn assign_roles(n_heads: usize, rng: &mut ChaCha8Rng) -> Vec<HeadRole> {
    let mut roles = match n_heads {
        1 => vec![HeadRole::Visual],
        2 => vec![HeadRole::Visual, HeadRole::Sink],
        _ => {
            let n_sink = (n_heads / 4).max(1);
            let n_text = (n_heads / 4).max(1);
            let mut r = vec![HeadRole::Sink; n_sink];
            r.extend(std::iter::repeat_n(HeadRole::Text, n_text));
            r.extend(std::iter::repeat_n(HeadRole::Visual, n_heads - n_sink - n_text));
            r
        }
    };
    roles.shuffle(rng);
    roles
}

impl ToyTransformer {
    /// Deterministic model for `config` with the default planted circuits.
    pub fn new(config: ModelConfig) -> Result<Self> {
        Self::with_circuits(config, &Circuits::default())
    }

    pub fn with_circuits(config: ModelConfig, circuits: &Circuits) -> Result<Self> {
        config.validate()?;
        let (vocab, channels) = build_layouts(&config);
        let d = config.d_model;
        let dk = config.d_head;
        let v = config.vocab_size;
        let mut rng = rng::substream(config.seed, "weights");

        let junk_dims = channels.junk_dims();
        let lex_dims = channels.lexical_dims();
        let obj_dims: Vec<usize> = (0..vocab.n_objects())
            .map(|k| channels.object_channel(k))
            .collect();
        let feat_dims: Vec<usize> = (0..vocab.n_objects())
            .map(|k| channels.feature_channel(k))
            .collect();

        // Object popularity prior: geometric decay over a seeded ranking.
        let mut order: Vec<usize> = (0..vocab.n_objects()).collect();
        order.shuffle(&mut rng);
        let mut prior = vec![0.0; vocab.n_objects()];
        for (rank, &k) in order.iter().enumerate() {
            prior[k] = (-circuits.prior_decay * rank as f64).exp();
        }

        let mut unembed = Array2::zeros((v, d));
        for w in 0..v as TokenId {
            let row = match vocab.object_index(w) {
                Some(k) => {
                    let mut r = Array1::zeros(d);
                    r[obj_dims[k]] = 1.0;
                    r
                }
                None => random_unit(&mut rng, d, &junk_dims),
            };
            unembed
                .row_mut(w as usize)
                .assign(&(row * circuits.unembed_scale));
        }

        let mut embed = Array2::zeros((v, d));
        for w in 0..v {
            let mut row = random_unit(&mut rng, d, &lex_dims) * circuits.lexical_scale;
            row[channels.dim(channels.bias)] += 1.0;
            row[channels.dim(channels.text)] += 1.0;
            if let Some(k) = vocab.object_index(w as TokenId) {
                row[obj_dims[k]] -= circuits.repeat_penalty;
            }

            embed.row_mut(w).assign(&row);
        }

        let mut pos_embed = Array2::zeros((config.max_seq, d));
        for p in 0..config.max_seq {
            let row = random_unit(&mut rng, d, &lex_dims) * circuits.position_scale;
            pos_embed.row_mut(p).assign(&row);
        }

        let q_gain = (dk as f64).sqrt();
        let u_gate = 0;
        let u_ground = 1 % dk;
        let mut roles = Vec::with_capacity(config.n_layers);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let layer_roles = assign_roles(config.n_heads, &mut rng);
            let mut heads = Vec::with_capacity(config.n_heads);
            for &role in &layer_roles {
                let aff = match role {
                    HeadRole::Visual => circuits.visual,
                    HeadRole::Sink => circuits.sink,
                    HeadRole::Text => circuits.text,
                };
                let a_sink = aff.sink.draw(&mut rng);
                let a_sal = aff.salience.draw(&mut rng);
                let a_text = aff.text.draw(&mut rng);

                let mut w_q = Array2::from_shape_fn((d, dk), |_| gaussian(&mut rng, circuits.qk_noise));
                let mut w_k = Array2::from_shape_fn((d, dk), |_| gaussian(&mut rng, circuits.qk_noise));
                w_q[[channels.dim(channels.bias), u_gate]] += q_gain;
                for &x in &lex_dims {
                    w_q[[x, u_gate]] += q_gain * gaussian(&mut rng, circuits.query_noise);
                }
                for &o in &obj_dims {
                    w_q[[o, u_ground]] += q_gain * circuits.grounding;
                }

                w_k[[channels.dim(channels.sink), u_gate]] += a_sink;
                w_k[[channels.dim(channels.salience), u_gate]] += a_sal;
                w_k[[channels.dim(channels.text), u_gate]] += a_text;
                w_k[[channels.dim(channels.salience), u_ground]] += 1.0;

                let ov_std = circuits.ov_noise / (d as f64).sqrt();
                let mut w_ov = Array2::from_shape_fn((d, d), |_| gaussian(&mut rng, ov_std));
                match role {
                    HeadRole::Visual => {
                        for (&f, &o) in feat_dims.iter().zip(&obj_dims) {
                            w_ov[[f, o]] += circuits.copy_gain;
                        }
                    }
                    HeadRole::Text => {
                        let t = channels.dim(channels.text);
                        for (k, &o) in obj_dims.iter().enumerate() {
                            w_ov[[t, o]] += circuits.prior_gain * prior[k];
                        }
                        for &x in &lex_dims {
                            for &o in &obj_dims {
                                w_ov[[x, o]] += gaussian(&mut rng, circuits.lexical_prior);
                            }
                        }
                    }
                    HeadRole::Sink => {}
                }
                heads.push(HeadWeights { w_q, w_k, w_ov });
            }
            roles.push(layer_roles);
            layers.push(heads);
        }

        let rotation = random_rotation(&mut rng, d);
        let rt = rotation.t();
        let embed = embed.dot(&rotation);
        let pos_embed = pos_embed.dot(&rotation);
        let unembed = unembed.dot(&rotation);
        let layers = layers
            .into_iter()
            .map(|heads| {
                heads
                    .into_iter()
                    .map(|h| HeadWeights {
                        w_q: rt.dot(&h.w_q),
                        w_k: rt.dot(&h.w_k),
                        w_ov: rt.dot(&h.w_ov).dot(&rotation),
                    })
                    .collect()
            })
            .collect();

        Ok(Self {
            config,
            vocab,
            channels,
            roles,
            rotation,
            embed,
            pos_embed,
            layers,
            unembed,
            prior,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &VocabLayout {
        &self.vocab
    }

    pub fn channels(&self) -> &ChannelLayout {
        &self.channels
    }

    /// Planted role of head `(layer, head)` (0-based).
    pub fn role(&self, layer: usize, head: usize) -> HeadRole {
        self.roles[layer][head]
    }

    /// Object popularity prior, indexed by object-block position.
    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn unembed(&self) -> ArrayView2<'_, f64> {
        self.unembed.view()
    }

    pub fn embed(&self) -> ArrayView2<'_, f64> {
        self.embed.view()
    }

    pub fn head(&self, layer: usize, head: usize) -> &HeadWeights {
        &self.layers[layer][head]
    }

    /// Model-space unit vector of a logical channel.
    pub fn direction(&self, logical: usize) -> ArrayView1<'_, f64> {
        self.rotation.row(self.channels.dim(logical))
    }

    /// Model-space unit vector of object word `k` (index within the block).
    pub fn object_direction(&self, k: usize) -> ArrayView1<'_, f64> {
        self.rotation.row(self.channels.object_channel(k))
    }

    /// Model-space unit vector of the visual feature of object class `k`.
    pub fn feature_direction(&self, k: usize) -> ArrayView1<'_, f64> {
        self.rotation.row(self.channels.feature_channel(k))
    }

    /// Next-token logits `W_Σ · h`.
    pub fn logits(&self, hidden: ArrayView1<'_, f64>) -> Array1<f64> {
        self.unembed.dot(&hidden)
    }

    /// Run the model over `seq`, capturing every hidden state and attention
    /// tensor. `vision` supplies the injected embeddings of the vision span
    /// (token embeddings are used when absent). The hook, when present,
    /// transforms each layer's post-softmax attention before the value mix.
    pub fn forward_capture(
        &self,
        seq: &SegmentedSequence,
        vision: Option<ArrayView2<'_, f64>>,
        hook: Option<&dyn AttentionHook>,
    ) -> Result<ForwardCapture> {
        let t = seq.len();
        let d = self.config.d_model;
        if t > self.config.max_seq {
            return Err(Error::Capacity {
                len: t,
                max: self.config.max_seq,
            });
        }
        if t == 0 {
            return Err(Error::Domain("empty sequence".into()));
        }
        let spans = seq.spans().clone();
        if let Some(vis) = &vision {
            if vis.nrows() != spans.vision.len() || vis.ncols() != d {
                return Err(Error::Config(format!(
                    "vision embeddings {:?} do not match span {} x d_model {}",
                    vis.shape(),
                    spans.vision.len(),
                    d
                )));
            }
        }

        let mut x = Array2::zeros((t, d));
        for (pos, &tok) in seq.tokens().iter().enumerate() {
            let base = match (&vision, spans.vision.contains(&pos)) {
                (Some(vis), true) => vis.row(pos - spans.vision.start),
                _ => {
                    if tok as usize >= self.config.vocab_size {
                        return Err(Error::Domain(format!(
                            "token id {tok} out of vocabulary {}",
                            self.config.vocab_size
                        )));
                    }
                    self.embed.row(tok as usize)
                }
            };
            let mut row = x.row_mut(pos);
            row.assign(&base);
            row += &self.pos_embed.row(pos);
        }
        ensure_finite(&x, "embedding")?;

        let scale = 1.0 / (self.config.d_head as f64).sqrt();
        let mut hidden = Vec::with_capacity(self.config.n_layers + 1);
        let mut attn_all = Vec::with_capacity(self.config.n_layers);
        hidden.push(x.clone());
        let decode_rows = spans.decode_rows();

        for (l, heads) in self.layers.iter().enumerate() {
            let h_n = heads.len();
            let mut attn = Array3::zeros((h_n, t, t));
            for (h, w) in heads.iter().enumerate() {
                let q = x.dot(&w.w_q);
                let k = x.dot(&w.w_k);
                let scores = q.dot(&k.t());
                for i in 0..t {
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        max = max.max(scores[[i, j]] * scale);
                    }
                    let mut z = 0.0;
                    for j in 0..=i {
                        let e = (scores[[i, j]] * scale - max).exp();
                        attn[[h, i, j]] = e;
                        z += e;
                    }
                    for j in 0..=i {
                        attn[[h, i, j]] /= z;
                    }
                }
            }
            if let Some(hook) = hook {
                let ctx = HookContext {
                    layer: l,
                    spans: &spans,
                    decode_rows: decode_rows.clone(),
                };
                hook.apply(&ctx, &mut attn)?;
            }
            let mut out = Array2::<f64>::zeros((t, d));
            for (h, w) in heads.iter().enumerate() {
                let values = x.dot(&w.w_ov);
                out += &attn.index_axis(Axis(0), h).dot(&values);
            }
            x += &out;
            ensure_finite(&x, "residual")?;
            ensure_finite(&attn, "attention")?;
            hidden.push(x.clone());
            attn_all.push(attn);
        }

        Ok(ForwardCapture {
            spans,
            hidden,
            attn: attn_all,
        })
    }

    /// Greedy decoding of `max_new` tokens, one full forward pass per step.
    pub fn generate_greedy(
        &self,
        seq: &SegmentedSequence,
        vision: Option<ArrayView2<'_, f64>>,
        max_new: usize,
        hook: Option<&dyn AttentionHook>,
    ) -> Result<Generation> {
        if max_new == 0 {
            return Err(Error::Domain("max_new must be >= 1".into()));
        }
        let mut seq = seq.clone();
        let mut tokens = Vec::with_capacity(max_new);
        let mut captures = Vec::with_capacity(max_new);
        for _ in 0..max_new {
            let cap = self.forward_capture(&seq, vision, hook)?;
            let last = cap.hidden[self.config.n_layers].row(cap.query_pos()).to_owned();
            let next = argmax(self.logits(last.view()).view());
            tokens.push(next as TokenId);
            captures.push(cap);
            seq.push_output(next as TokenId);
        }
        Ok(Generation { tokens, captures })
    }

    /// All unembedding rows have equal norm; used to size planted directions.
    pub fn unembed_row_norm(&self) -> f64 {
        let r = self.unembed.row(0);
        r.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(v: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn ensure_finite<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>, what: &str) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite {what}")))
    }
}
