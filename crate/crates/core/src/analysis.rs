//! Pair-set stability across steps and output fidelity metrics.

use serde::{Deserialize, Serialize};

use crate::cache::BlockId;
use crate::error::{Error, Result};
use crate::grid::Tokens;
use crate::matching::MergePlan;

/// PSNR reported for identical inputs (and the ceiling for any input).
pub const PSNR_CAP_DB: f64 = 200.0;

/// The `(src, dst)` pairs one block merged at one step, sorted and unique.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PairSet(Vec<(usize, usize)>);

impl PairSet {
    pub fn new(mut pairs: Vec<(usize, usize)>) -> Self {
        pairs.sort_unstable();
        pairs.dedup();
        Self(pairs)
    }

    pub fn from_plan(plan: &MergePlan) -> Self {
        // plan pairs are already sorted by unique source
        Self(plan.pairs.clone())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.0
    }

    pub fn intersection_len(&self, other: &PairSet) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < self.0.len() && j < other.0.len() {
            match self.0[i].cmp(&other.0[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }
}

/// `1 - |A ∩ B| / |A ∪ B|`, with two empty sets at distance 0.
pub fn jaccard_distance(a: &PairSet, b: &PairSet) -> f64 {
    let inter = a.intersection_len(b);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        return 0.0;
    }
    1.0 - inter as f64 / union as f64
}

/// Distances between the pair sets of consecutive steps for one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JaccardTrace {
    pub block: BlockId,
    /// `distances[n]` compares step `n` with step `n + 1`.
    pub distances: Vec<f64>,
}

impl JaccardTrace {
    pub fn median(&self) -> f64 {
        median(&self.distances)
    }
}

pub(crate) fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    crate::bench::quantile(&sorted, 0.5)
}

/// Builds a trace from per-step pair sets. Every step must be present.
pub fn jaccard_trace(block: BlockId, steps: &[Option<PairSet>]) -> Result<JaccardTrace> {
    let sets = steps
        .iter()
        .enumerate()
        .map(|(n, s)| {
            s.as_ref()
                .ok_or_else(|| Error::IncompleteTrace(format!("block {block} has no pair set for step {n}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(JaccardTrace {
        block,
        distances: sets.windows(2).map(|w| jaccard_distance(w[0], w[1])).collect(),
    })
}

/// Per-step mean and spread of several traces (repeated seeds or blocks).
/// Variance is the population variance; the standard deviation is its
/// square root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub runs: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub std_dev: Vec<f64>,
}

pub fn summarize_traces(traces: &[JaccardTrace]) -> Result<TraceSummary> {
    let first = traces
        .first()
        .ok_or_else(|| Error::IncompleteTrace("no traces to summarize".into()))?;
    let len = first.distances.len();
    if traces.iter().any(|t| t.distances.len() != len) {
        return Err(Error::IncompleteTrace("traces have different lengths".into()));
    }
    let runs = traces.len() as f64;
    let mut mean = vec![0.0; len];
    let mut variance = vec![0.0; len];
    for n in 0..len {
        let m = traces.iter().map(|t| t.distances[n]).sum::<f64>() / runs;
        mean[n] = m;
        variance[n] = traces.iter().map(|t| (t.distances[n] - m).powi(2)).sum::<f64>() / runs;
    }
    Ok(TraceSummary {
        runs: traces.len(),
        std_dev: variance.iter().map(|v| v.sqrt()).collect(),
        mean,
        variance,
    })
}

/// Peak signal-to-noise ratio of `candidate` against `reference`, using the
/// reference's value range as the peak. Capped at [`PSNR_CAP_DB`].
pub fn psnr(reference: &Tokens, candidate: &Tokens) -> Result<f64> {
    if reference.len() != candidate.len() || reference.channels() != candidate.channels() {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            reference.len(),
            reference.channels(),
            candidate.len(),
            candidate.channels()
        )));
    }
    let a = reference.as_slice();
    let b = candidate.as_slice();
    if a.is_empty() {
        return Err(Error::DegenerateReference);
    }
    let (lo, hi) = a.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let range = hi as f64 - lo as f64;
    if range <= 0.0 {
        return Err(Error::DegenerateReference);
    }
    let mse = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (range * range / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean cosine similarity between corresponding rows.
pub fn mean_row_cosine(a: &Tokens, b: &Tokens) -> Result<f64> {
    if a.len() != b.len() || a.channels() != b.channels() {
        return Err(Error::Shape("token matrices differ in shape".into()));
    }
    if a.is_empty() {
        return Ok(1.0);
    }
    let total: f64 = (0..a.len())
        .map(|i| crate::matching::cosine_similarity_unchecked(a.row(i), b.row(i)) as f64)
        .sum();
    Ok(total / a.len() as f64)
}
