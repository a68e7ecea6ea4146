//! Statistical core: empirical token distributions, the total-variation
//! statistic, the support-mismatch test and its closed-form error bounds.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("empirical distribution needs at least one sample")]
    EmptySample,
    #[error("statistic needs a nonempty list of values")]
    EmptyInput,
    #[error("value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("support size must be at least 1")]
    ZeroSupport,
    #[error("sample count must be at least 1")]
    ZeroSamples,
    #[error("intersection size {intersection} exceeds min(k1, k2) = {min}")]
    IntersectionTooLarge { intersection: u64, min: u64 },
}

/// Token-to-count table over observed output strings.
///
/// Tokens are compared as exact strings. Zero counts are never stored, so
/// the key set is the empirical support.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawDistribution", into = "RawDistribution")]
pub struct EmpiricalDistribution {
    counts: BTreeMap<String, u64>,
    total: u64,
}

#[derive(Serialize, Deserialize)]
struct RawDistribution {
    counts: BTreeMap<String, u64>,
    total: u64,
}

impl TryFrom<RawDistribution> for EmpiricalDistribution {
    type Error = String;

    fn try_from(raw: RawDistribution) -> Result<Self, Self::Error> {
        let dist = EmpiricalDistribution::from_counts(raw.counts).map_err(|e| e.to_string())?;
        if dist.total != raw.total {
            return Err(format!(
                "total {} does not match sum of counts {}",
                raw.total, dist.total
            ));
        }
        Ok(dist)
    }
}

impl From<EmpiricalDistribution> for RawDistribution {
    fn from(d: EmpiricalDistribution) -> Self {
        RawDistribution {
            counts: d.counts,
            total: d.total,
        }
    }
}

impl EmpiricalDistribution {
    /// Builds a distribution from raw observations.
    pub fn from_samples<I, S>(samples: I) -> Result<Self, StatsError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut counts = BTreeMap::new();
        let mut total = 0u64;
        for s in samples {
            *counts.entry(s.into()).or_insert(0) += 1;
            total += 1;
        }
        if total == 0 {
            return Err(StatsError::EmptySample);
        }
        Ok(Self { counts, total })
    }

    /// Builds a distribution from `(token, count)` pairs. Zero counts are dropped
    /// and repeated tokens are summed.
    pub fn from_counts<I, S>(pairs: I) -> Result<Self, StatsError>
    where
        I: IntoIterator<Item = (S, u64)>,
        S: Into<String>,
    {
        let mut counts = BTreeMap::new();
        let mut total = 0u64;
        for (token, c) in pairs {
            if c == 0 {
                continue;
            }
            *counts.entry(token.into()).or_insert(0) += c;
            total += c;
        }
        if total == 0 {
            return Err(StatsError::EmptySample);
        }
        Ok(Self { counts, total })
    }

    pub fn record(&mut self, token: impl Into<String>) {
        *self.counts.entry(token.into()).or_insert(0) += 1;
        self.total += 1;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn count(&self, token: &str) -> u64 {
        self.counts.get(token).copied().unwrap_or(0)
    }

    pub fn frequency(&self, token: &str) -> f64 {
        self.count(token) as f64 / self.total as f64
    }

    pub fn support(&self) -> BTreeSet<&str> {
        self.counts.keys().map(String::as_str).collect()
    }

    pub fn support_size(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &BTreeMap<String, u64> {
        &self.counts
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.counts.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Total variation distance between the empirical frequency vectors of `p` and `q`.
///
/// Raw frequencies are used, so the two samples may have different sizes.
pub fn tv_distance(p: &EmpiricalDistribution, q: &EmpiricalDistribution) -> f64 {
    let union: BTreeSet<&str> = p.support().union(&q.support()).copied().collect();
    let l1: f64 = union
        .into_iter()
        .map(|t| (p.frequency(t) - q.frequency(t)).abs())
        .sum();
    (0.5 * l1).clamp(0.0, 1.0)
}

/// Support-mismatch rejection event: true iff some token was observed in one
/// sample and not in the other.
pub fn support_mismatch(reference: &EmpiricalDistribution, detection: &EmpiricalDistribution) -> bool {
    reference.counts.keys().ne(detection.counts.keys())
}

/// Mean of the per-prompt TV distances.
pub fn aggregate_statistic(per_prompt_tv: &[f64]) -> Result<f64, StatsError> {
    if per_prompt_tv.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    if let Some(&bad) = per_prompt_tv
        .iter()
        .find(|v| !(0.0..=1.0).contains(*v))
    {
        return Err(StatsError::OutOfRange(bad));
    }
    let mean = per_prompt_tv.iter().sum::<f64>() / per_prompt_tv.len() as f64;
    Ok(mean.clamp(0.0, 1.0))
}

/// Upper bound on the false-rejection probability of the support-mismatch test
/// when both samples come from the uniform distribution on the same `k` tokens.
/// Clamped to 1.
pub fn type1_bound(k: u64, n1: u64, n2: u64) -> Result<f64, StatsError> {
    if k == 0 {
        return Err(StatsError::ZeroSupport);
    }
    if n1 == 0 || n2 == 0 {
        return Err(StatsError::ZeroSamples);
    }
    let kf = k as f64;
    let miss = 1.0 - 1.0 / kf;
    let bound = kf * powu(miss, n1) + kf * powu(miss, n2);
    Ok(bound.min(1.0))
}

/// Support sizes and sample counts for the Type-II bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBoundInputs {
    pub k1: u64,
    pub k2: u64,
    pub intersection_size: u64,
    pub n1: u64,
    pub n2: u64,
}

impl ErrorBoundInputs {
    pub fn new(k1: u64, k2: u64, intersection_size: u64, n1: u64, n2: u64) -> Result<Self, StatsError> {
        if k1 == 0 || k2 == 0 {
            return Err(StatsError::ZeroSupport);
        }
        if n1 == 0 || n2 == 0 {
            return Err(StatsError::ZeroSamples);
        }
        let min = k1.min(k2);
        if intersection_size > min {
            return Err(StatsError::IntersectionTooLarge {
                intersection: intersection_size,
                min,
            });
        }
        Ok(Self {
            k1,
            k2,
            intersection_size,
            n1,
            n2,
        })
    }
}

/// Upper bound on the probability that the support-mismatch test fails to
/// reject when the supports differ: `(|I|/k1)^n1 * (|I|/k2)^n2`.
pub fn type2_bound(inputs: &ErrorBoundInputs) -> f64 {
    let p1 = inputs.intersection_size as f64 / inputs.k1 as f64;
    let p2 = inputs.intersection_size as f64 / inputs.k2 as f64;
    powu(p1, inputs.n1) * powu(p2, inputs.n2)
}

/// `2^-(n+1)`: no test can have Type-I + Type-II below this when a balanced
/// two-token support collapses to one of its tokens, with `n` samples per side.
pub fn risk_lower_bound(n: u64) -> Result<f64, StatsError> {
    if n == 0 {
        return Err(StatsError::ZeroSamples);
    }
    Ok(powu(0.5, n + 1))
}

/// ROC AUC via the Mann-Whitney statistic. A tied (positive, negative) pair
/// counts as one half.
pub fn roc_auc(positive_scores: &[f64], negative_scores: &[f64]) -> Result<f64, StatsError> {
    if positive_scores.is_empty() || negative_scores.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    // Rank-sum form: midranks over the pooled sample handle ties in O(n log n).
    let mut pooled: Vec<(f64, bool)> = positive_scores
        .iter()
        .map(|&s| (s, true))
        .chain(negative_scores.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        // ranks are 1-based; the group spans ranks i+1..=j+1
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let positives_in_group = pooled[i..=j].iter().filter(|(_, pos)| *pos).count();
        positive_rank_sum += midrank * positives_in_group as f64;
        i = j + 1;
    }

    let n_pos = positive_scores.len() as f64;
    let n_neg = negative_scores.len() as f64;
    let u = positive_rank_sum - n_pos * (n_pos + 1.0) / 2.0;
    Ok((u / (n_pos * n_neg)).clamp(0.0, 1.0))
}

fn powu(base: f64, exp: u64) -> f64 {
    match i32::try_from(exp) {
        Ok(e) => base.powi(e),
        Err(_) => base.powf(exp as f64),
    }
}
