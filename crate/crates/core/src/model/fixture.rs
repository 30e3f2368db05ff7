// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hand-built captures with exact attention values and trace words,
//! bypassing the transformer.

use ndarray::{Array1, Array2, Array3};

use super::capture::ForwardCapture;
use super::layout::TokenId;
use super::sequence::Spans;
use super::transformer::ToyTransformer;
use crate::error::{Error, Result};

/// Description of a synthetic decoding run.
///
/// Step `t` (0-based) sees `n_vision + n_prompt + t` positions. Its query
/// row at `(layer, head)` is `query_rows[t][layer][head]`; every other row is
/// uniform over its causal prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureSpec {
    pub n_vision: usize,
    pub n_prompt: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub query_rows: Vec<Vec<Vec<Vec<f64>>>>,
    /// Per vision position, the logit-lens word at layers `1..=L`.
    pub traces: Vec<Vec<TokenId>>,
    /// Ground-truth inert positions, echoed back untouched.
    pub inert: Vec<usize>,
}

impl CaptureSpec {
    /// Uniform query rows; every trace is `filler` at every layer.
    pub fn uniform(
        n_vision: usize,
        n_prompt: usize,
        n_layers: usize,
        n_heads: usize,
        n_steps: usize,
        filler: TokenId,
    ) -> Self {
        let query_rows = (0..n_steps)
            .map(|t| {
                let len = n_vision + n_prompt + t;
                vec![vec![vec![1.0 / len as f64; len]; n_heads]; n_layers]
            })
            .collect();
        Self {
            n_vision,
            n_prompt,
            n_layers,
            n_heads,
            query_rows,
            traces: vec![vec![filler; n_layers]; n_vision],
            inert: Vec::new(),
        }
    }

    pub fn seq_len(&self, step: usize) -> usize {
        self.n_vision + self.n_prompt + step
    }
}

/// Ground truth carried alongside fixture captures.
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureTruth {
    pub inert: Vec<usize>,
    pub traces: Vec<Vec<TokenId>>,
}

fn validate(spec: &CaptureSpec, model: &ToyTransformer) -> Result<()> {
    let d = model.config().d_model;
    if spec.n_layers == 0 || spec.n_heads == 0 {
        return Err(Error::Validation("fixture needs >= 1 layer and head".into()));
    }
    if spec.n_vision + spec.n_prompt == 0 {
        return Err(Error::Validation("fixture needs >= 1 input position".into()));
    }
    if spec.traces.len() != spec.n_vision {
        return Err(Error::Validation(format!(
            "{} traces for {} vision positions",
            spec.traces.len(),
            spec.n_vision
        )));
    }
    for tr in &spec.traces {
        if tr.len() != spec.n_layers {
            return Err(Error::Validation("trace length != n_layers".into()));
        }
        if tr.iter().any(|&w| w as usize >= model.config().vocab_size) {
            return Err(Error::Validation("trace word outside vocabulary".into()));
        }
    }
    if spec.inert.iter().any(|&p| p >= spec.n_vision) {
        return Err(Error::Validation("inert position outside vision span".into()));
    }
    if d == 0 {
        return Err(Error::Validation("model has d_model = 0".into()));
    }
    for (t, layers) in spec.query_rows.iter().enumerate() {
        let len = spec.seq_len(t);
        if layers.len() != spec.n_layers || layers.iter().any(|h| h.len() != spec.n_heads) {
            return Err(Error::Validation(format!("step {t}: wrong layer/head count")));
        }
        for (l, heads) in layers.iter().enumerate() {
            for (h, row) in heads.iter().enumerate() {
                if row.len() != len {
                    return Err(Error::Validation(format!(
                        "step {t} layer {l} head {h}: row length {} != {len}",
                        row.len()
                    )));
                }
                if row.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
                    return Err(Error::Validation(format!(
                        "step {t} layer {l} head {h}: entry outside [0, 1]"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(Error::Validation(format!(
                        "step {t} layer {l} head {h}: row sums to {sum}"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Materialize `spec` into one capture per step.
///
/// Vision hidden states at layer `l >= 1` are the unembedding row of the
/// trace word, so the logit lens reads the trace back exactly. All other
/// hidden states are zero.
pub fn make_capture_fixture(
    model: &ToyTransformer,
    spec: &CaptureSpec,
) -> Result<(Vec<ForwardCapture>, FixtureTruth)> {
    validate(spec, model)?;
    let d = model.config().d_model;
    let unembed = model.unembed();
    let mut captures = Vec::with_capacity(spec.query_rows.len());
    for (t, layers) in spec.query_rows.iter().enumerate() {
        let len = spec.seq_len(t);
        let p_end = spec.n_vision + spec.n_prompt;
        let spans = Spans {
            vision: 0..spec.n_vision,
            prompt: spec.n_vision..p_end,
            output: p_end..len,
        };
        let mut hidden = vec![Array2::zeros((len, d)); spec.n_layers + 1];
        for (pos, trace) in spec.traces.iter().enumerate() {
            for (l, &w) in trace.iter().enumerate() {
                hidden[l + 1].row_mut(pos).assign(&unembed.row(w as usize));
            }
        }
        let q = len - 1;
        let attn = layers
            .iter()
            .map(|heads| {
                let mut a = Array3::zeros((spec.n_heads, len, len));
                for (h, row) in heads.iter().enumerate() {
                    for i in 0..q {
                        a.slice_mut(ndarray::s![h, i, ..=i])
                            .fill(1.0 / (i + 1) as f64);
                    }
                    a.slice_mut(ndarray::s![h, q, ..])
                        .assign(&Array1::from(row.clone()));
                }
                a
            })
            .collect();
        captures.push(ForwardCapture {
            spans,
            hidden,
            attn,
        });
    }
    Ok((
        captures,
        FixtureTruth {
            inert: spec.inert.clone(),
            traces: spec.traces.clone(),
        },
    ))
}
