//! Matching, CMC and ROC. All functions are pure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub identity: u32,
    pub distance: f64,
}

pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Ranks gallery identities by ascending Euclidean distance to `probe`. An
/// identity with several gallery entries is scored by its closest entry; ties
/// are broken by ascending identity label.
pub fn match_gallery(probe: &[f32], gallery: &[(u32, &[f32])]) -> Result<Vec<Match>> {
    if gallery.is_empty() {
        return Err(Error::InvalidArgument("match against an empty gallery".into()));
    }
    let mut best: Vec<Match> = Vec::new();
    for &(identity, item) in gallery {
        if item.len() != probe.len() {
            return Err(Error::Mismatch(format!(
                "probe has {} values, gallery entry of identity {identity} has {}",
                probe.len(),
                item.len()
            )));
        }
        let d = euclidean(probe, item);
        match best.iter_mut().find(|m| m.identity == identity) {
            Some(m) => m.distance = m.distance.min(d),
            None => best.push(Match { identity, distance: d }),
        }
    }
    best.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.identity.cmp(&b.identity)));
    Ok(best)
}

/// 1-based rank of `identity` in a ranked list.
pub fn rank_of(matches: &[Match], identity: u32) -> Option<usize> {
    matches.iter().position(|m| m.identity == identity).map(|p| p + 1)
}

/// Cumulative match characteristic for ranks `1..=k`: entry `r - 1` is the
/// fraction of probes whose true identity ranks at or above `r`.
pub fn cmc(true_ranks: &[usize], gallery_identities: usize, k: usize) -> Result<Vec<f64>> {
    if true_ranks.is_empty() {
        return Err(Error::InvalidArgument("CMC over zero probes".into()));
    }
    if k == 0 || k > gallery_identities {
        return Err(Error::InvalidArgument(format!(
            "CMC rank {k} outside 1..={gallery_identities} gallery identities"
        )));
    }
    if let Some(&r) = true_ranks.iter().find(|&&r| r == 0 || r > gallery_identities) {
        return Err(Error::InvalidArgument(format!("probe rank {r} outside the gallery")));
    }
    let mut hist = vec![0usize; gallery_identities + 1];
    for &r in true_ranks {
        hist[r] += 1;
    }
    let n = true_ranks.len() as f64;
    let mut acc = 0usize;
    Ok((1..=k)
        .map(|r| {
            acc += hist[r];
            acc as f64 / n
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// ROC of a distance-based verifier: a pair is accepted when its distance is
/// at most the threshold. Thresholds sweep every distinct distance; the
/// curve starts at `(0, 0)` and the area is integrated with the trapezoid rule.
pub fn verification_roc(genuine: &[f64], impostor: &[f64]) -> Result<Roc> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::InvalidArgument(
            "ROC needs at least one genuine and one impostor distance".into(),
        ));
    }
    if genuine.iter().chain(impostor).any(|d| !d.is_finite()) {
        return Err(Error::InvalidArgument("ROC distances must be finite".into()));
    }
    let mut all: Vec<(f64, bool)> = genuine
        .iter()
        .map(|&d| (d, true))
        .chain(impostor.iter().map(|&d| (d, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (ng, ni) = (genuine.len() as f64, impostor.len() as f64);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / ni, tp as f64 / ng));
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum();
    Ok(Roc { points, auc })
}
