//! Ranked-retrieval metrics: Recall@X, MMRR and MAP, plus the reward metrics used by
//! the alignment loop.
//!
//! A [`Judgment`] pairs a ranked list `h` (at most `k` ids) with the relevant set `y`
//! (`n = |y| >= 1`). Positions past the end of a short list count as non-relevant.
//!
//! MMRR normalizes the average rank of the relevant items by the average rank of a
//! perfect retrieval, `(n + 1) / 2`; a relevant item missing from the top `k` is
//! counted at rank `k + 1`. [`MmrrNumerator::Printed`] switches the numerator to the
//! literal `n / 2` variant, under which a perfect retrieval scores `n / (n + 1)`.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::index::RankedRetrieval;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("cutoff {cutoff} outside 1..={k}")]
    BadCutoff { cutoff: usize, k: usize },
    #[error("invalid judgment: {0}")]
    InvalidJudgment(String),
    #[error("no judgments to aggregate")]
    EmptyEvaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    ranked_ids: Vec<String>,
    k: usize,
    relevant_ids: BTreeSet<String>,
}

impl Judgment {
    pub fn new(
        ranked_ids: Vec<String>,
        k: usize,
        relevant_ids: BTreeSet<String>,
    ) -> Result<Self, MetricError> {
        if k == 0 {
            return Err(MetricError::InvalidJudgment("k must be at least 1".into()));
        }
        if relevant_ids.is_empty() {
            return Err(MetricError::InvalidJudgment("empty relevant set".into()));
        }
        if ranked_ids.len() > k {
            return Err(MetricError::InvalidJudgment(format!(
                "{} ranked ids exceed depth {k}",
                ranked_ids.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ranked_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(MetricError::InvalidJudgment(format!("duplicate ranked id {dup:?}")));
        }
        Ok(Self {
            ranked_ids,
            k,
            relevant_ids,
        })
    }

    pub fn from_retrieval(
        retrieval: &RankedRetrieval,
        relevant_ids: &BTreeSet<String>,
    ) -> Result<Self, MetricError> {
        Self::new(retrieval.ids(), retrieval.k, relevant_ids.clone())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.relevant_ids.len()
    }

    pub fn ranked_ids(&self) -> &[String] {
        &self.ranked_ids
    }

    pub fn relevant_ids(&self) -> &BTreeSet<String> {
        &self.relevant_ids
    }

    /// Relevance indicator for each ranked position.
    fn hits(&self) -> impl Iterator<Item = bool> + '_ {
        self.ranked_ids.iter().map(|id| self.relevant_ids.contains(id))
    }
}

pub fn recall_at(j: &Judgment, cutoff: usize) -> Result<f64, MetricError> {
    if cutoff == 0 || cutoff > j.k {
        return Err(MetricError::BadCutoff { cutoff, k: j.k });
    }
    let found = j.hits().take(cutoff).filter(|&h| h).count();
    Ok(found as f64 / j.n() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmrrNumerator {
    /// `(n + 1) / 2`, the mean rank of a perfect retrieval.
    #[default]
    Corrected,
    /// `n / 2`.
    Printed,
}

impl MmrrNumerator {
    fn value(self, n: usize) -> f64 {
        match self {
            Self::Corrected => (n as f64 + 1.0) / 2.0,
            Self::Printed => n as f64 / 2.0,
        }
    }
}

pub fn mmrr(j: &Judgment) -> Result<f64, MetricError> {
    mmrr_with(j, MmrrNumerator::Corrected)
}

pub fn mmrr_with(j: &Judgment, numerator: MmrrNumerator) -> Result<f64, MetricError> {
    let n = j.n();
    if n > j.k {
        return Err(MetricError::InvalidJudgment(format!(
            "{n} relevant items exceed depth {}",
            j.k
        )));
    }
    let (rank_sum, found) = j
        .hits()
        .enumerate()
        .filter(|(_, h)| *h)
        .fold((0usize, 0usize), |(s, c), (i, _)| (s + i + 1, c + 1));
    let missing = n - found;
    let mean_rank = (rank_sum + (j.k + 1) * missing) as f64 / n as f64;
    Ok(numerator.value(n) / mean_rank)
}

pub fn map(j: &Judgment) -> f64 {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (i, hit) in j.hits().enumerate() {
        if hit {
            found += 1;
            sum += found as f64 / (i + 1) as f64;
        }
    }
    sum / j.n() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMetric {
    #[default]
    Mmrr,
    Map,
    /// `(Recall@5 + Recall@11) / 2`; needs `k >= 11`.
    AvgRecall5_11,
}

impl std::fmt::Display for RewardMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mmrr => "MMRR",
            Self::Map => "MAP",
            Self::AvgRecall5_11 => "Avg(Recall@5,Recall@11)",
        })
    }
}

pub fn reward(j: &Judgment, metric: RewardMetric) -> Result<f64, MetricError> {
    reward_with(j, metric, MmrrNumerator::Corrected)
}

pub fn reward_with(
    j: &Judgment,
    metric: RewardMetric,
    numerator: MmrrNumerator,
) -> Result<f64, MetricError> {
    match metric {
        RewardMetric::Mmrr => mmrr_with(j, numerator),
        RewardMetric::Map => Ok(map(j)),
        RewardMetric::AvgRecall5_11 => Ok((recall_at(j, 5)? + recall_at(j, 11)?) / 2.0),
    }
}

pub const DEFAULT_CUTOFFS: [usize; 3] = [3, 5, 11];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub mmrr: f64,
    pub map: f64,
    /// Keyed by cutoff.
    pub recall: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerSampleMetrics {
    pub mmrr: Vec<f64>,
    pub map: Vec<f64>,
    pub recall: BTreeMap<usize, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_samples: usize,
    pub cutoffs: Vec<usize>,
    pub mmrr_numerator: MmrrNumerator,
    pub means: MetricMeans,
    pub per_sample: PerSampleMetrics,
}

impl MetricReport {
    pub fn recall(&self, cutoff: usize) -> Option<f64> {
        self.means.recall.get(&cutoff).copied()
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unweighted means over judgments; per-sample values are kept.
pub fn aggregate(
    js: &[Judgment],
    cutoffs: &[usize],
    numerator: MmrrNumerator,
) -> Result<MetricReport, MetricError> {
    if js.is_empty() {
        return Err(MetricError::EmptyEvaluation);
    }
    let mmrrs = js
        .iter()
        .map(|j| mmrr_with(j, numerator))
        .collect::<Result<Vec<_>, _>>()?;
    let maps: Vec<f64> = js.iter().map(map).collect();
    let mut recall = BTreeMap::new();
    for &c in cutoffs {
        let vals = js
            .iter()
            .map(|j| recall_at(j, c))
            .collect::<Result<Vec<_>, _>>()?;
        recall.insert(c, vals);
    }
    Ok(MetricReport {
        n_samples: js.len(),
        cutoffs: cutoffs.to_vec(),
        mmrr_numerator: numerator,
        means: MetricMeans {
            mmrr: mean(&mmrrs),
            map: mean(&maps),
            recall: recall.iter().map(|(c, v)| (*c, mean(v))).collect(),
        },
        per_sample: PerSampleMetrics {
            mmrr: mmrrs,
            map: maps,
            recall,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Judgment with relevant items at the given 1-based ranks, filler elsewhere.
    pub(crate) fn judged(k: usize, ranks: &[usize], n: usize) -> Judgment {
        let mut ranked: Vec<String> = (1..=k).map(|i| format!("x{i}")).collect();
        let mut relevant = BTreeSet::new();
        for (j, &r) in ranks.iter().enumerate() {
            ranked[r - 1] = format!("rel{j}");
            relevant.insert(format!("rel{j}"));
        }
        for j in ranks.len()..n {
            relevant.insert(format!("missing{j}"));
        }
        Judgment::new(ranked, k, relevant).unwrap()
    }

    fn close(a: f64, b: f64) {
        assert!((a - b).abs() < 1e-12, "{a} != {b}");
    }

    #[test]
    fn recall_hand_values() {
        let h: Vec<String> = ["A", "B", "C", "D", "E"].iter().map(|s| s.to_string()).collect();
        let y = |ids: &[&str]| ids.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        let j = Judgment::new(h.clone(), 5, y(&["A", "C"])).unwrap();
        close(recall_at(&j, 3).unwrap(), 1.0);
        let j = Judgment::new(h.clone(), 5, y(&["A", "F"])).unwrap();
        close(recall_at(&j, 3).unwrap(), 0.5);
        let j = Judgment::new(h, 5, y(&["Z"])).unwrap();
        for x in 1..=5 {
            close(recall_at(&j, x).unwrap(), 0.0);
        }
        assert!(matches!(recall_at(&j, 6), Err(MetricError::BadCutoff { .. })));
        assert!(matches!(recall_at(&j, 0), Err(MetricError::BadCutoff { .. })));
    }

    #[test]
    fn short_list_positions_count_as_misses() {
        let j = Judgment::new(vec!["a".into()], 5, ["b".to_string()].into()).unwrap();
        close(recall_at(&j, 5).unwrap(), 0.0);
        close(mmrr(&j).unwrap(), 1.0 / 6.0);
    }

    #[test]
    fn mmrr_hand_values() {
        close(mmrr(&judged(5, &[1], 1)).unwrap(), 1.0);
        close(mmrr(&judged(5, &[3], 1)).unwrap(), 1.0 / 3.0);
        close(mmrr(&judged(5, &[1, 3], 2)).unwrap(), 0.75);
        close(mmrr(&judged(5, &[2], 2)).unwrap(), 0.375);
        close(mmrr(&judged(5, &[], 1)).unwrap(), 1.0 / 6.0);
    }

    #[test]
    fn printed_numerator_gives_n_over_n_plus_one_for_perfect() {
        for n in 1..=3 {
            let ranks: Vec<usize> = (1..=n).collect();
            let v = mmrr_with(&judged(11, &ranks, n), MmrrNumerator::Printed).unwrap();
            close(v, n as f64 / (n as f64 + 1.0));
        }
    }

    #[test]
    fn mmrr_rejects_more_relevant_than_depth() {
        let j = judged(2, &[1, 2], 3);
        assert!(matches!(mmrr(&j), Err(MetricError::InvalidJudgment(_))));
    }

    #[test]
    fn map_hand_values() {
        close(map(&judged(5, &[1, 2], 2)), 1.0);
        assert!((map(&judged(5, &[1, 3], 2)) - 0.8333).abs() < 1e-4);
        close(map(&judged(5, &[1, 3], 2)), 0.5 * (1.0 + 2.0 / 3.0));
        close(map(&judged(5, &[], 2)), 0.0);
    }

    #[test]
    fn reward_dispatch() {
        let j = judged(11, &[2, 9], 3);
        assert_eq!(reward(&j, RewardMetric::Mmrr).unwrap(), mmrr(&j).unwrap());
        assert_eq!(reward(&j, RewardMetric::Map).unwrap(), map(&j));
        let perfect = judged(11, &[1, 2], 2);
        for m in [RewardMetric::Mmrr, RewardMetric::Map, RewardMetric::AvgRecall5_11] {
            close(reward(&perfect, m).unwrap(), 1.0);
        }
        close(reward(&judged(11, &[7], 1), RewardMetric::AvgRecall5_11).unwrap(), 0.5);
        assert!(matches!(
            reward(&judged(5, &[1], 1), RewardMetric::AvgRecall5_11),
            Err(MetricError::BadCutoff { .. })
        ));
    }

    #[test]
    fn judgment_validation() {
        assert!(Judgment::new(vec!["a".into(), "a".into()], 5, ["a".to_string()].into()).is_err());
        assert!(Judgment::new(vec![], 5, BTreeSet::new()).is_err());
        assert!(Judgment::new(vec!["a".into(), "b".into()], 1, ["a".to_string()].into()).is_err());
    }

    #[test]
    fn aggregate_means_and_round_trip() {
        let js = vec![judged(11, &[1], 1), judged(11, &[1, 3], 2)];
        let r = aggregate(&js, &DEFAULT_CUTOFFS, MmrrNumerator::Corrected).unwrap();
        close(r.means.mmrr, 0.875);
        assert_eq!(r.per_sample.mmrr, vec![1.0, 0.75]);
        let single = aggregate(&js[1..], &DEFAULT_CUTOFFS, MmrrNumerator::Corrected).unwrap();
        close(single.means.map, map(&js[1]));
        close(single.recall(3).unwrap(), 1.0);

        let text = serde_json::to_string(&r).unwrap();
        let back: MetricReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);

        assert_eq!(
            aggregate(&[], &DEFAULT_CUTOFFS, MmrrNumerator::Corrected),
            Err(MetricError::EmptyEvaluation)
        );
    }
}
