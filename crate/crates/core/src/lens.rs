// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logit lens: read intermediate hidden states as vocabulary distributions.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};
use crate::model::{argmax, ForwardCapture, TokenId, ToyTransformer};

/// Layer-wise lens words of one vision token (layers `1..=L`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub vision_pos: usize,
    pub words: Vec<TokenId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorResult {
    pub anchor: TokenId,
    pub dominance: f64,
}

/// `softmax(W_Σ · v)`.
pub fn lens_distribution(hidden: ArrayView1<'_, f64>, model: &ToyTransformer) -> Result<Array1<f64>> {
    if hidden.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite hidden state".into()));
    }
    Ok(softmax(model.logits(hidden).view()))
}

/// Numerically stable softmax.
pub fn softmax(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let e = logits.mapv(|x| (x - max).exp());
    let z = e.sum();
    e / z
}

/// Lens argmax of `vision_pos` at every block output.
pub fn decode_trace(
    capture: &ForwardCapture,
    vision_pos: usize,
    model: &ToyTransformer,
) -> Result<Trace> {
    if !capture.spans.vision.contains(&vision_pos) {
        return Err(Error::Domain(format!(
            "position {vision_pos} is outside the vision span {:?}",
            capture.spans.vision
        )));
    }
    let words = (1..capture.hidden.len())
        .map(|l| {
            let h = capture.hidden[l].row(vision_pos);
            if h.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric("non-finite hidden state".into()));
            }
            // argmax of the softmax is the argmax of the logits
            Ok(argmax(model.logits(h).view()) as TokenId)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Trace { vision_pos, words })
}

/// Traces of every vision position.
pub fn decode_traces(capture: &ForwardCapture, model: &ToyTransformer) -> Result<Vec<Trace>> {
    capture
        .spans
        .vision
        .clone()
        .map(|p| decode_trace(capture, p, model))
        .collect()
}

/// Mode of the trace with its dominance; ties go to the smallest id.
///
/// # Panics
/// On an empty trace.
pub fn trace_anchor(trace: &Trace) -> AnchorResult {
    assert!(!trace.words.is_empty(), "trace_anchor on an empty trace");
    let mut counts: BTreeMap<TokenId, usize> = BTreeMap::new();
    for &w in &trace.words {
        *counts.entry(w).or_default() += 1;
    }
    let (anchor, n) = counts
        .into_iter()
        .fold((0, 0), |best, (w, c)| if c > best.1 { (w, c) } else { best });
    AnchorResult {
        anchor,
        dominance: n as f64 / trace.words.len() as f64,
    }
}

/// Write `scene_id,vision_pos,layer,word_id` rows (layers 1-based).
pub fn write_trace_csv<W: Write>(out: &mut W, rows: &[(u64, Trace)]) -> Result<()> {
    writeln!(out, "scene_id,vision_pos,layer,word_id")?;
    for (scene, tr) in rows {
        for (l, w) in tr.words.iter().enumerate() {
            writeln!(out, "{scene},{},{},{w}", tr.vision_pos, l + 1)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn tr(words: &[TokenId]) -> Trace {
        Trace {
            vision_pos: 0,
            words: words.to_vec(),
        }
    }

    #[test]
    fn softmax_hand_values() {
        let p = softmax(array![2f64.ln(), 0.0, 0.0, 0.0].view());
        for (got, want) in p.iter().zip([0.4, 0.2, 0.2, 0.2]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn shift_invariance() {
        let a = softmax(array![0.3, -1.2, 2.5].view());
        let b = softmax(array![100.3, 98.8, 102.5].view());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-9);
        }
    }

    #[test]
    fn anchor_tie_takes_smaller_id() {
        let a = trace_anchor(&tr(&[5, 9, 5, 9]));
        assert_eq!(a.anchor, 5);
        assert_eq!(a.dominance, 0.5);
        let a = trace_anchor(&tr(&[9, 9, 9, 9]));
        assert_eq!((a.anchor, a.dominance), (9, 1.0));
    }

    #[test]
    fn csv_layout() {
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &[(3, tr(&[7, 8]))]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "scene_id,vision_pos,layer,word_id\n3,0,1,7\n3,0,2,8\n"
        );
    }
}
