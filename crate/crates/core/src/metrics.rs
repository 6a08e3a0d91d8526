//! Observation cost and retrieval/recognition metrics.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{CxsError, Result};

/// Per-scene `|S| / P` and their mean (0 for no scenes).
pub fn obr(selected_counts: &[usize], tiles: usize) -> (Vec<f64>, f64) {
    let per: Vec<f64> = selected_counts.iter().map(|&n| n as f64 / tiles as f64).collect();
    let mean = if per.is_empty() { 0.0 } else { per.iter().sum::<f64>() / per.len() as f64 };
    (per, mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub area_total: f64,
    pub cost_per_unit_area: BTreeMap<String, f64>,
}

impl CostModel {
    pub fn new(area_total: f64, costs: impl IntoIterator<Item = (String, f64)>) -> Result<Self> {
        let model = Self {
            area_total,
            cost_per_unit_area: costs.into_iter().collect(),
        };
        model.validate()?;
        Ok(model)
    }

    /// Two-level model: free LR, unit-cost HR.
    pub fn lr_hr(area_total: f64) -> Result<Self> {
        Self::new(area_total, [("lr".to_string(), 0.0), ("hr".to_string(), 1.0)])
    }

    fn validate(&self) -> Result<()> {
        if !(self.area_total.is_finite() && self.area_total > 0.0) {
            return Err(CxsError::InvalidCostModel(format!("total area {} must be positive", self.area_total)));
        }
        if let Some((r, c)) = self.cost_per_unit_area.iter().find(|(_, c)| !(c.is_finite() && **c >= 0.0)) {
            return Err(CxsError::InvalidCostModel(format!("cost of {r} is {c}")));
        }
        if self.max_cost() <= 0.0 {
            return Err(CxsError::InvalidCostModel("no resolution has positive cost".into()));
        }
        Ok(())
    }

    /// `c(r_max)`.
    pub fn max_cost(&self) -> f64 {
        self.cost_per_unit_area.values().copied().fold(0.0, f64::max)
    }

    pub fn full_cost(&self) -> f64 {
        self.area_total * self.max_cost()
    }
}

/// `Σ a_i c(r_i) / (A c(r_max))`.
pub fn mocr(requests: &[(f64, &str)], model: &CostModel) -> Result<f64> {
    model.validate()?;
    let mut total = 0.0;
    for &(area, res) in requests {
        if !(area.is_finite() && area >= 0.0) {
            return Err(CxsError::InvalidCostModel(format!("request area {area} must be non-negative")));
        }
        let c = model
            .cost_per_unit_area
            .get(res)
            .ok_or_else(|| CxsError::UnknownResolution(res.to_string()))?;
        total += area * c;
    }
    Ok(total / model.full_cost())
}

/// AP truncated at `k` with denominator `min(|relevant|, k)`.
pub fn average_precision_at_k(ranking: &[usize], relevant: &HashSet<usize>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(CxsError::InvalidCutoff(k));
    }
    let mut seen = HashSet::with_capacity(ranking.len());
    for &item in ranking {
        if !seen.insert(item) {
            return Err(CxsError::DuplicateItem(item));
        }
    }
    if relevant.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, item) in ranking.iter().take(k).enumerate() {
        if relevant.contains(item) {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Ok(sum / relevant.len().min(k) as f64)
}

/// Indices sorted by descending score, ties by lower index.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Concept-as-query retrieval over scenes. `scene_vectors` are unit vectors
/// in the concept space; `labels[i]` is scene `i`'s bitmask. Concepts with no
/// relevant scene are skipped; the result is 0 when none qualifies.
pub fn retrieval_map(scene_vectors: &[Vec<f64>], labels: &[u64], concept_table: &[Vec<f64>], k: usize) -> Result<f64> {
    if scene_vectors.len() != labels.len() {
        return Err(CxsError::LengthMismatch(format!(
            "{} scene vectors for {} label sets",
            scene_vectors.len(),
            labels.len()
        )));
    }
    let mut aps = Vec::new();
    for (c, text) in concept_table.iter().enumerate() {
        let relevant: HashSet<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &m)| m >> c & 1 == 1)
            .map(|(i, _)| i)
            .collect();
        if relevant.is_empty() {
            continue;
        }
        let scores: Vec<f64> = scene_vectors.iter().map(|v| crate::encoders::cosine(v, text)).collect();
        aps.push(average_precision_at_k(&rank_descending(&scores), &relevant, k)?);
    }
    Ok(if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recognition {
    /// Top-1 accuracy over single-label scenes (0 when there are none).
    pub top1: f64,
    pub single_label_scenes: usize,
    /// Mean AP@C over scenes with at least one label.
    pub multilabel_map: f64,
}

/// `rankings[i]` is scene `i`'s concept ranking, best first.
pub fn recognition_metrics(rankings: &[Vec<usize>], labels: &[u64]) -> Result<Recognition> {
    if rankings.len() != labels.len() {
        return Err(CxsError::LengthMismatch(format!(
            "{} rankings for {} label sets",
            rankings.len(),
            labels.len()
        )));
    }
    let (mut correct, mut singles) = (0usize, 0usize);
    let mut aps = Vec::new();
    for (ranking, &mask) in rankings.iter().zip(labels) {
        if mask.count_ones() == 1 {
            singles += 1;
            if ranking.first().is_some_and(|&c| c < 64 && mask >> c & 1 == 1) {
                correct += 1;
            }
        }
        if mask != 0 {
            let relevant: HashSet<usize> = (0..64).filter(|c| mask >> c & 1 == 1).collect();
            aps.push(average_precision_at_k(ranking, &relevant, ranking.len().max(1))?);
        }
    }
    Ok(Recognition {
        top1: if singles == 0 { 0.0 } else { correct as f64 / singles as f64 },
        single_label_scenes: singles,
        multilabel_map: if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[usize]) -> HashSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn obr_examples() {
        assert_eq!(obr(&[12], 100).1, 0.12);
        assert_eq!(obr(&[0, 100], 100).0, vec![0.0, 1.0]);
        assert_eq!(obr(&[], 100).1, 0.0);
    }

    #[test]
    fn mocr_examples() {
        let m = CostModel::lr_hr(100.0).unwrap();
        assert_eq!(mocr(&[(100.0, "hr")], &m).unwrap(), 1.0);
        assert_eq!(mocr(&[(100.0, "lr"), (50.0, "hr")], &m).unwrap(), 0.5);
        assert_eq!(mocr(&[(100.0, "hr"), (100.0, "hr")], &m).unwrap(), 2.0);
        assert!(matches!(mocr(&[(1.0, "sar")], &m), Err(CxsError::UnknownResolution(_))));
        assert!(CostModel::lr_hr(0.0).is_err());
        assert!(CostModel::new(1.0, [("lr".to_string(), 0.0)]).is_err());
    }

    #[test]
    fn ap_examples() {
        let ap = average_precision_at_k(&[7, 1, 9, 4], &set(&[7, 9]), 3).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision_at_k(&[1, 2, 3, 4], &set(&[1, 2, 3, 4, 5]), 3).unwrap(), 1.0);
        assert_eq!(average_precision_at_k(&[1, 2, 3, 4], &set(&[4]), 3).unwrap(), 0.0);
        assert_eq!(average_precision_at_k(&[1, 2], &set(&[]), 3).unwrap(), 0.0);
        assert!(matches!(
            average_precision_at_k(&[1, 2, 1], &set(&[1]), 3),
            Err(CxsError::DuplicateItem(1))
        ));
    }

    #[test]
    fn rank_ties_prefer_lower_index() {
        assert_eq!(rank_descending(&[0.5, 0.9, 0.5, 0.9]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn retrieval_with_exact_vectors_is_perfect() {
        let table: Vec<Vec<f64>> = (0..3).map(|c| (0..3).map(|i| (i == c) as u8 as f64).collect()).collect();
        let labels = [1u64, 2, 4, 1, 4];
        let vecs: Vec<Vec<f64>> = labels.iter().map(|m| table[m.trailing_zeros() as usize].clone()).collect();
        assert_eq!(retrieval_map(&vecs, &labels, &table, 100).unwrap(), 1.0);
        assert_eq!(retrieval_map(&vecs[..1], &labels[..1], &table, 1).unwrap(), 1.0);
    }

    #[test]
    fn recognition_examples() {
        let labels = [1u64 << 3, 1 << 5];
        let perfect = vec![vec![3, 0, 1, 2, 4, 5, 6, 7], vec![5, 0, 1, 2, 3, 4, 6, 7]];
        let r = recognition_metrics(&perfect, &labels).unwrap();
        assert_eq!((r.top1, r.multilabel_map), (1.0, 1.0));
        let reversed: Vec<Vec<usize>> = perfect.iter().map(|v| v.iter().rev().copied().collect()).collect();
        assert_eq!(recognition_metrics(&reversed, &labels).unwrap().top1, 0.0);
    }
}
