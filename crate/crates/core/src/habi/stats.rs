// SPDX-License-Identifier: MIT OR Apache-2.0

//! Quantiles, Otsu thresholding and the salient-mass filter.

use std::cmp::Ordering;

use crate::error::{Error, Result};

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric("non-finite value in sample".into()))
    }
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Quantile of an ascending sample by linear interpolation at `(n - 1) q`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// `Q3 + multiplier · (Q3 − Q1)`.
pub fn quartile_threshold(values: &[f64], multiplier: f64) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::Domain(format!(
            "quartile threshold needs >= 2 values, got {}",
            values.len()
        )));
    }
    check_finite(values)?;
    if !(multiplier.is_finite() && multiplier >= 0.0) {
        return Err(Error::Domain(format!("IQR multiplier {multiplier} must be >= 0")));
    }
    let s = sorted(values);
    let q1 = quantile_sorted(&s, 0.25);
    let q3 = quantile_sorted(&s, 0.75);
    Ok(q3 + multiplier * (q3 - q1))
}

/// Equal-width counts over `[lo, hi]`; the top edge belongs to the last bin.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Domain(format!(
                "histogram needs bins >= 1 and hi > lo (bins {bins}, [{lo}, {hi}])"
            )));
        }
        check_finite(values)?;
        let mut counts = vec![0; bins];
        for &v in values {
            if v < lo || v > hi {
                return Err(Error::Domain(format!("value {v} outside [{lo}, {hi}]")));
            }
            counts[Self::bin_of(v, lo, hi, bins)] += 1;
        }
        Ok(Self { lo, hi, counts })
    }

    fn bin_of(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
        (((v - lo) / (hi - lo) * bins as f64).floor() as usize).min(bins - 1)
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.bins() as f64
    }

    /// Left edge of bin `i` (`i == bins` gives the right end).
    pub fn edge(&self, i: usize) -> f64 {
        self.lo + self.width() * i as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + self.width() * (i as f64 + 0.5)
    }
}

/// Otsu's threshold over `bins` equal-width bins of `[0, 1]`.
///
/// Candidates are the interior edges `k / bins`, `k = 1..bins`; a candidate
/// splits the histogram into bins below and at-or-above it. Each class is
/// represented by its bin centers. The first (lowest) maximizer of the
/// between-class variance `w0 w1 (μ0 − μ1)²` wins.
pub fn otsu_threshold(values: &[f64], bins: usize) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::Domain(format!(
            "Otsu needs >= 2 values, got {}",
            values.len()
        )));
    }
    if bins < 2 {
        return Err(Error::Domain("Otsu needs >= 2 bins".into()));
    }
    let hist = Histogram::new(values, 0.0, 1.0, bins)?;
    let n = values.len() as f64;
    let total_mass: f64 = (0..bins).map(|i| hist.counts[i] as f64 * hist.center(i)).sum();

    let mut best: Option<(usize, f64)> = None;
    let mut w0 = 0.0;
    let mut m0 = 0.0;
    for k in 1..bins {
        let c = hist.counts[k - 1] as f64;
        w0 += c;
        m0 += c * hist.center(k - 1);
        let w1 = n - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = m0 / w0;
        let mu1 = (total_mass - m0) / w1;
        let var = (w0 / n) * (w1 / n) * (mu0 - mu1).powi(2);
        // Ties in exact arithmetic can differ by rounding; keep the lower edge.
        if best.is_none_or(|(_, b)| var > b * (1.0 + 1e-9)) {
            best = Some((k, var));
        }
    }
    match best {
        Some((k, v)) if v > 0.0 => Ok(hist.edge(k)),
        _ => Err(Error::Degenerate("all values fall in one bin".into())),
    }
}

/// Smallest set of highest-attention positions holding at least `fraction`
/// of the total. Ties in attention go to the lower index; the result is
/// returned in ascending index order.
pub fn salient_filter(attention: &[f64], fraction: f64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Domain(format!("salient fraction {fraction} not in (0, 1]")));
    }
    check_finite(attention)?;
    let mut order: Vec<usize> = (0..attention.len()).collect();
    order.sort_by(|&a, &b| {
        attention[b]
            .partial_cmp(&attention[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let total: f64 = order.iter().map(|&i| attention[i]).sum();
    if total <= 0.0 {
        return Ok(Vec::new());
    }
    let target = fraction * total;
    let mut acc = 0.0;
    let mut picked = Vec::new();
    for i in order {
        if acc >= target {
            break;
        }
        acc += attention[i];
        picked.push(i);
    }
    picked.sort_unstable();
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quartiles_of_one_to_eight() {
        let v: Vec<f64> = (1..=8).map(f64::from).collect();
        assert_eq!(quartile_threshold(&v, 1.5).unwrap(), 11.5);
        assert_eq!(quartile_threshold(&v, 0.0).unwrap(), 6.25);
    }

    #[test]
    fn constant_sample_threshold_is_the_constant() {
        assert_eq!(quartile_threshold(&[0.7; 5], 3.0).unwrap(), 0.7);
    }

    #[test]
    fn quartile_needs_two_values() {
        assert!(matches!(quartile_threshold(&[1.0], 1.5), Err(Error::Domain(_))));
    }

    #[test]
    fn otsu_splits_two_clusters() {
        let mut v = vec![0.1; 5];
        v.extend([0.9; 5]);
        let t = otsu_threshold(&v, 256).unwrap();
        assert!(t > 0.1 && t < 0.9);
        // lowest of the tied edges in the empty gap
        assert_eq!(t, 26.0 / 256.0);
    }

    #[test]
    fn otsu_identical_values_are_degenerate() {
        assert!(matches!(otsu_threshold(&[0.4; 6], 256), Err(Error::Degenerate(_))));
    }

    #[test]
    fn salient_examples() {
        let mut a = vec![0.9 / 15.0; 15];
        a.insert(4, 0.1);
        assert_eq!(salient_filter(&a, 0.05).unwrap(), vec![4]);
        assert_eq!(salient_filter(&[1.0; 16], 0.05).unwrap(), vec![0]);
        assert_eq!(salient_filter(&[0.5, 0.2, 0.3], 1.0).unwrap(), vec![0, 1, 2]);
        assert!(salient_filter(&[0.0; 4], 0.05).unwrap().is_empty());
    }
}
