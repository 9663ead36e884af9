//! Otsu thresholding on a fixed-bin histogram.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::projector::Volume;

/// Bin counts over `[min, max]`; the maximum lands in the last bin.
pub fn histogram(values: &[f64], n_bins: usize) -> Result<(Vec<u64>, f64, f64)> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if values.is_empty() || !(hi > lo) {
        return Err(Error::DegenerateHistogram);
    }
    let mut h = vec![0u64; n_bins];
    let scale = n_bins as f64 / (hi - lo);
    for &v in values {
        let b = (((v - lo) * scale) as usize).min(n_bins - 1);
        h[b] += 1;
    }
    Ok((h, lo, hi))
}

/// Between-class score for a split of `n0` samples with index sum `s0` out of
/// `n` with total `s`: `(s0 n - s n0)^2 / (n0 n1)`, kept as an exact fraction
/// while it fits in 128 bits.
#[derive(Clone, Copy)]
enum Score {
    Exact(u128, u128),
    Approx(f64),
}

impl Score {
    fn new(n0: u64, s0: u64, n: u64, s: u64) -> Score {
        let a = ((s0 as i128) * (n as i128) - (s as i128) * (n0 as i128)).unsigned_abs();
        let d = (n0 as u128) * ((n - n0) as u128);
        match a.checked_mul(a) {
            Some(a2) => Score::Exact(a2, d),
            None => Score::Approx((a as f64).powi(2) / d as f64),
        }
    }

    fn value(self) -> f64 {
        match self {
            Score::Exact(a, d) => a as f64 / d as f64,
            Score::Approx(v) => v,
        }
    }

    /// Exact when both sides are exact: quotients first, then remainders
    /// cross-multiplied.
    fn cmp(self, other: Score) -> Ordering {
        if let (Score::Exact(a0, a1), Score::Exact(b0, b1)) = (self, other) {
            let (qa, ra) = (a0 / a1, a0 % a1);
            let (qb, rb) = (b0 / b1, b0 % b1);
            if qa != qb {
                return qa.cmp(&qb);
            }
            if let (Some(x), Some(y)) = (ra.checked_mul(b1), rb.checked_mul(a1)) {
                return x.cmp(&y);
            }
        }
        self.value().total_cmp(&other.value())
    }
}

/// Index `t` in `1..n_bins` maximising the between-class variance of bins
/// `< t` versus `>= t`; the first maximiser wins.
pub fn otsu_bin(hist: &[u64]) -> Result<usize> {
    let n: u64 = hist.iter().sum();
    let s: u64 = hist.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best: Option<(usize, Score)> = None;
    for t in 1..hist.len() {
        n0 += hist[t - 1];
        s0 += (t as u64 - 1) * hist[t - 1];
        if n0 == 0 || n0 == n {
            continue;
        }
        let sc = Score::new(n0, s0, n, s);
        if best.is_none_or(|(_, b)| sc.cmp(b) == Ordering::Greater) {
            best = Some((t, sc));
        }
    }
    best.map(|(t, _)| t).ok_or(Error::DegenerateHistogram)
}

/// Intensity threshold: values below it form the low class.
pub fn otsu_threshold(vol: &Volume, n_bins: usize) -> Result<f64> {
    otsu_threshold_values(&vol.data, n_bins)
}

pub fn otsu_threshold_values(values: &[f64], n_bins: usize) -> Result<f64> {
    if n_bins < 2 {
        return Err(Error::Param("Otsu needs at least two bins".into()));
    }
    let (h, lo, hi) = histogram(values, n_bins)?;
    let t = otsu_bin(&h)?;
    Ok(lo + (hi - lo) * t as f64 / n_bins as f64)
}
