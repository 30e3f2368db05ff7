// SPDX-License-Identifier: MIT OR Apache-2.0

//! In-place transforms of one layer's attention tensor `(heads, query, key)`.
//! Only query rows in `rows` are touched.

use std::collections::BTreeSet;
use std::ops::Range;

use ndarray::{s, Array3};

use crate::error::{Error, Result};

/// Add `alpha` times the layer's mean absolute attention to every vision key
/// of the target heads. The mean over heads is taken before any head is
/// modified.
pub fn enhance_attention(
    attn: &mut Array3<f64>,
    targets: &[usize],
    alpha: f64,
    vision: Range<usize>,
    rows: Range<usize>,
    renormalize: bool,
) -> Result<()> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Spec(format!("alpha {alpha} must be a finite value >= 0")));
    }
    if targets.is_empty() {
        return Ok(());
    }
    let n_heads = attn.shape()[0];
    let inv_h = 1.0 / n_heads as f64;
    for q in rows {
        let boost: Vec<f64> = vision
            .clone()
            .map(|i| alpha * inv_h * (0..n_heads).map(|h| attn[[h, q, i]].abs()).sum::<f64>())
            .collect();
        for &h in targets {
            for (i, b) in vision.clone().zip(&boost) {
                attn[[h, q, i]] += b;
            }
            if renormalize {
                let mut row = attn.slice_mut(s![h, q, ..]);
                let z = row.sum();
                if z > 0.0 {
                    row.mapv_inplace(|x| x / z);
                }
            }
        }
    }
    Ok(())
}

/// Scale attention to inert keys on the target heads by `1 − beta`.
pub fn penalize_inert(
    attn: &mut Array3<f64>,
    targets: &[usize],
    beta: f64,
    inert: &BTreeSet<usize>,
    rows: Range<usize>,
) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Spec(format!("beta {beta} outside [0, 1]")));
    }
    let keep = 1.0 - beta;
    for q in rows {
        for &h in targets {
            for &i in inert {
                if i < attn.shape()[2] {
                    attn[[h, q, i]] *= keep;
                }
            }
        }
    }
    Ok(())
}

/// Zero the masked keys on every head and renormalize each touched row.
pub fn zero_ablate(
    attn: &mut Array3<f64>,
    mask: &BTreeSet<usize>,
    rows: Range<usize>,
    layer: usize,
) -> Result<()> {
    if mask.is_empty() {
        return Ok(());
    }
    let n_keys = attn.shape()[2];
    if let Some(&bad) = mask.iter().find(|&&i| i >= n_keys) {
        return Err(Error::Spec(format!("masked position {bad} outside sequence of {n_keys}")));
    }
    for h in 0..attn.shape()[0] {
        for q in rows.clone() {
            let mut row = attn.slice_mut(s![h, q, ..]);
            for &i in mask {
                row[i] = 0.0;
            }
            let z = row.sum();
            if z <= 0.0 {
                return Err(Error::DegenerateRow {
                    layer,
                    head: h,
                    query: q,
                });
            }
            row.mapv_inplace(|x| x / z);
        }
    }
    Ok(())
}
