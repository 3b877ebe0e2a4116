//! Equal error rate by threshold sweep.
//!
//! At threshold `τ`, a spoof trial with score `> τ` is a false acceptance
//! and a bona fide trial with score `≤ τ` is a false rejection. The sweep
//! visits `τ = −∞` and every distinct score in increasing order; the miss
//! rate rises and the false-alarm rate falls along it. The EER is taken at
//! the first operating point where `P_miss ≥ P_fa`, linearly interpolated
//! with the previous point when the two rates do not meet exactly.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EerResult {
    /// Fraction in `[0, 1]`.
    pub eer: f64,
    /// First swept threshold at which `P_miss ≥ P_fa`.
    pub threshold: f64,
}

/// Crossing of two monotone rate curves sampled at increasing thresholds.
/// `points` are `(threshold, p_fa, p_miss)` and must start at `τ = −∞`.
pub(crate) fn crossing(points: &[(f64, f64, f64)]) -> EerResult {
    let mut prev = points[0];
    for &pt in &points[1..] {
        let (tau, fa, miss) = pt;
        if miss >= fa {
            let d_prev = prev.1 - prev.2;
            let d_here = fa - miss;
            let eer = if d_here == 0.0 {
                fa
            } else {
                let alpha = d_prev / (d_prev - d_here);
                prev.1 + alpha * (fa - prev.1)
            };
            return EerResult { eer, threshold: tau };
        }
        prev = pt;
    }
    // At the largest score P_fa = 0, so the loop always returns.
    unreachable!("P_miss ≥ P_fa holds at the top threshold")
}

/// EER from separate bona fide and spoof score lists.
pub fn eer_from_scores(bona: &[f64], spoof: &[f64]) -> Result<EerResult> {
    if bona.is_empty() || spoof.is_empty() {
        return Err(Error::data(format!(
            "EER needs both classes, got {} bona fide and {} spoof scores",
            bona.len(),
            spoof.len()
        )));
    }
    if let Some(v) = bona.iter().chain(spoof).find(|v| !v.is_finite()) {
        return Err(Error::data(format!("non-finite score {v}")));
    }
    let mut all: Vec<(f64, bool)> = bona
        .iter()
        .map(|&s| (s, true))
        .chain(spoof.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    let (nb, ns) = (bona.len() as f64, spoof.len() as f64);
    let mut points = Vec::with_capacity(all.len() + 1);
    points.push((f64::NEG_INFINITY, 1.0, 0.0));
    let (mut bona_le, mut spoof_le) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let tau = all[i].0;
        while i < all.len() && all[i].0 == tau {
            if all[i].1 {
                bona_le += 1;
            } else {
                spoof_le += 1;
            }
            i += 1;
        }
        let fa = (spoof.len() - spoof_le) as f64 / ns;
        let miss = bona_le as f64 / nb;
        points.push((tau, fa, miss));
    }
    Ok(crossing(&points))
}
