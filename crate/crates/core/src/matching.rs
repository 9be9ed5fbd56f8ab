//! Bipartite matching between source and destination tokens.
//!
//! The grid is cut into `stride_y x stride_x` tiles; one token per tile is a
//! destination and the rest are sources. Every source is scored against
//! every destination by cosine similarity and assigned its best destination.
//! A [`MergePlan`] then keeps either the top `r` fraction of sources
//! ([`MatchConfig::FixedRate`]) or every source whose best similarity is
//! strictly above `t` ([`MatchConfig::Threshold`]).
//!
//! Tie-breaking is fixed: argmax ties go to the lowest destination
//! position, and ranking ties go to the lowest source index.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{grid_index, rng_from_seed, Tokens};
use crate::kernels;

/// Norms below this are treated as zero; such tokens score 0 against
/// everything.
pub const ZERO_NORM: f32 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DestinationRule {
    TopLeft,
    RandomInStride { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub stride_x: usize,
    pub stride_y: usize,
    pub dst_rule: DestinationRule,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            stride_x: 2,
            stride_y: 2,
            dst_rule: DestinationRule::TopLeft,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub num_tokens: usize,
    /// Sorted, one per stride.
    pub dst_indices: Vec<usize>,
    /// Sorted complement of `dst_indices`.
    pub src_indices: Vec<usize>,
}

pub fn partition_strides(height: usize, width: usize, cfg: &PartitionConfig) -> Result<Partition> {
    let (sx, sy) = (cfg.stride_x, cfg.stride_y);
    if sx == 0 || sy == 0 || !height.is_multiple_of(sy) || !width.is_multiple_of(sx) {
        return Err(Error::Dimension {
            height,
            width,
            stride_y: sy,
            stride_x: sx,
        });
    }
    if sx * sy == 1 {
        return Err(Error::Domain("a 1x1 stride leaves no source tokens".into()));
    }

    let mut rng = match cfg.dst_rule {
        DestinationRule::TopLeft => None,
        DestinationRule::RandomInStride { seed } => Some(rng_from_seed(seed)),
    };
    let num_tokens = height * width;
    let mut is_dst = vec![false; num_tokens];
    for sr in 0..height / sy {
        for sc in 0..width / sx {
            let offset = rng.as_mut().map_or(0, |rng| rng.random_range(0..sx * sy));
            let (dy, dx) = (offset / sx, offset % sx);
            is_dst[grid_index(sr * sy + dy, sc * sx + dx, width)] = true;
        }
    }
    let (dst_indices, src_indices) = (0..num_tokens).partition(|&i| is_dst[i]);
    Ok(Partition {
        num_tokens,
        dst_indices,
        src_indices,
    })
}

/// Cosine similarity with the zero-norm convention and the result clamped
/// to `[-1, 1]`.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "vector lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(cosine_similarity_unchecked(a, b))
}

pub(crate) fn cosine_similarity_unchecked(a: &[f32], b: &[f32]) -> f32 {
    let mut dot = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
    }
    cosine_from_parts(dot, norm(a), norm(b))
}

#[inline]
fn norm(v: &[f32]) -> f32 {
    let mut sq = 0.0f32;
    for x in v {
        sq += x * x;
    }
    sq.sqrt()
}

#[inline]
fn cosine_from_parts(dot: f32, norm_a: f32, norm_b: f32) -> f32 {
    if norm_a < ZERO_NORM || norm_b < ZERO_NORM {
        return 0.0;
    }
    (dot / (norm_a * norm_b)).clamp(-1.0, 1.0)
}

/// Dense `|src| x |dst|` cosine similarities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl SimilarityMatrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} similarity matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged similarity rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }
}

/// Scores every source feature against every destination feature.
pub fn build_similarity_matrix(features: &Tokens, part: &Partition) -> Result<SimilarityMatrix> {
    if features.len() != part.num_tokens {
        return Err(Error::Shape(format!(
            "partition covers {} tokens but features have {} rows",
            part.num_tokens,
            features.len()
        )));
    }
    let channels = features.channels();
    let n_dst = part.dst_indices.len();

    let mut dst_t = vec![0.0f32; channels * n_dst];
    let mut dst_norm = Vec::with_capacity(n_dst);
    for (j, &d) in part.dst_indices.iter().enumerate() {
        let tok = features.row(d);
        for (c, &v) in tok.iter().enumerate() {
            dst_t[c * n_dst + j] = v;
        }
        dst_norm.push(norm(tok));
    }

    let mut data = vec![0.0f32; part.src_indices.len() * n_dst];
    for (i, &s) in part.src_indices.iter().enumerate() {
        let tok = features.row(s);
        let src_norm = norm(tok);
        let row = &mut data[i * n_dst..(i + 1) * n_dst];
        kernels::dot_columns(tok, &dst_t, n_dst, row);
        for (v, &dn) in row.iter_mut().zip(&dst_norm) {
            *v = cosine_from_parts(*v, src_norm, dn);
        }
    }
    SimilarityMatrix::from_vec(part.src_indices.len(), n_dst, data)
}

/// A source's best destination, as a column position in the matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub dst_position: usize,
    pub similarity: f32,
}

pub fn best_destination_assignment(sim: &SimilarityMatrix) -> Result<Vec<Assignment>> {
    if sim.cols == 0 {
        return Err(Error::Domain("no destination tokens to assign to".into()));
    }
    Ok((0..sim.rows)
        .map(|i| {
            let row = sim.row(i);
            let mut best = Assignment {
                dst_position: 0,
                similarity: row[0],
            };
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best.similarity {
                    best = Assignment {
                        dst_position: j,
                        similarity: v,
                    };
                }
            }
            best
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchConfig {
    /// Merge `floor(rate * |src|)` sources.
    FixedRate { rate: f64 },
    /// Merge every source whose best similarity is strictly above `threshold`.
    Threshold { threshold: f32 },
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MatchConfig::FixedRate { rate } if !(0.0..=1.0).contains(&rate) => {
                Err(Error::Domain(format!("merge rate {rate} outside [0, 1]")))
            }
            MatchConfig::Threshold { threshold } if !(-1.0..=1.0).contains(&threshold) => {
                Err(Error::Domain(format!("threshold {threshold} outside [-1, 1]")))
            }
            _ => Ok(()),
        }
    }
}

/// Number of sources merged at `rate`.
pub fn fixed_rate_count(rate: f64, num_sources: usize) -> usize {
    ((rate * num_sources as f64).floor() as usize).min(num_sources)
}

/// The result of matching: which sources fold into which destinations.
#[derive(Debug, Clone, PartialEq)]
pub struct MergePlan {
    pub num_tokens: usize,
    /// `(src_index, dst_index)` sorted by source index.
    pub pairs: Vec<(usize, usize)>,
    /// Similarity of each pair, parallel to `pairs`.
    pub similarities: Vec<f32>,
    pub dst_indices: Vec<usize>,
    /// Sources not in any pair, ascending.
    pub unmerged_src_indices: Vec<usize>,
}

impl MergePlan {
    /// A plan that merges nothing.
    pub fn empty(part: &Partition) -> Self {
        Self {
            num_tokens: part.num_tokens,
            pairs: Vec::new(),
            similarities: Vec::new(),
            dst_indices: part.dst_indices.clone(),
            unmerged_src_indices: part.src_indices.clone(),
        }
    }

    /// Builds a plan from `(src_index, dst_index, similarity)` triples.
    pub fn from_pairs(part: &Partition, mut pairs: Vec<(usize, usize, f32)>) -> Result<Self> {
        pairs.sort_by_key(|p| p.0);
        let mut merged = vec![false; part.num_tokens];
        for &(s, _, _) in &pairs {
            if s >= part.num_tokens {
                return Err(Error::Bounds(format!("source index {s} >= {}", part.num_tokens)));
            }
            merged[s] = true;
        }
        let plan = Self {
            num_tokens: part.num_tokens,
            similarities: pairs.iter().map(|p| p.2).collect(),
            pairs: pairs.into_iter().map(|(s, d, _)| (s, d)).collect(),
            dst_indices: part.dst_indices.clone(),
            unmerged_src_indices: part.src_indices.iter().copied().filter(|&s| !merged[s]).collect(),
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn num_merged(&self) -> usize {
        self.pairs.len()
    }

    pub fn num_sources(&self) -> usize {
        self.pairs.len() + self.unmerged_src_indices.len()
    }

    /// Tokens left after merging.
    pub fn reduced_len(&self) -> usize {
        self.num_tokens - self.pairs.len()
    }

    /// Checks the structural invariants: indices in range, sources unique
    /// and sorted, no destination used as a source, and the index sets
    /// covering every token exactly once.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_tokens;
        let bad = |msg: String| Err(Error::InvariantViolation(msg));
        if self.similarities.len() != self.pairs.len() {
            return bad("similarities not parallel to pairs".into());
        }
        let mut role = vec![0u8; n]; // 1 = dst, 2 = merged src, 3 = unmerged src
        for &d in &self.dst_indices {
            if d >= n || role[d] != 0 {
                return bad(format!("bad destination index {d}"));
            }
            role[d] = 1;
        }
        for w in self.pairs.windows(2) {
            if w[0].0 >= w[1].0 {
                return bad("pairs not strictly sorted by source".into());
            }
        }
        for &(s, d) in &self.pairs {
            if s >= n || d >= n || role[s] != 0 || role[d] != 1 {
                return bad(format!("bad pair ({s}, {d})"));
            }
            role[s] = 2;
        }
        for &s in &self.unmerged_src_indices {
            if s >= n || role[s] != 0 {
                return bad(format!("bad unmerged source {s}"));
            }
            role[s] = 3;
        }
        if role.contains(&0) {
            return bad("plan does not cover every token".into());
        }
        Ok(())
    }

    /// Rejects plans built for a different token count.
    pub fn check_len(&self, num_tokens: usize) -> Result<()> {
        if self.num_tokens != num_tokens {
            return Err(Error::PlanMismatch {
                expected: self.num_tokens,
                actual: num_tokens,
            });
        }
        Ok(())
    }
}

fn check_matrix(sim: &SimilarityMatrix, part: &Partition) -> Result<()> {
    if sim.rows != part.src_indices.len() || sim.cols != part.dst_indices.len() {
        return Err(Error::Shape(format!(
            "similarity matrix is {}x{} but partition has {} sources and {} destinations",
            sim.rows,
            sim.cols,
            part.src_indices.len(),
            part.dst_indices.len()
        )));
    }
    Ok(())
}

fn assigned_pair(part: &Partition, src_pos: usize, a: Assignment) -> (usize, usize, f32) {
    (
        part.src_indices[src_pos],
        part.dst_indices[a.dst_position],
        a.similarity,
    )
}

/// Keeps the `floor(rate * |src|)` sources with the highest best similarity.
pub fn plan_top_r(sim: &SimilarityMatrix, part: &Partition, rate: f64) -> Result<MergePlan> {
    MatchConfig::FixedRate { rate }.validate()?;
    check_matrix(sim, part)?;
    let count = fixed_rate_count(rate, part.src_indices.len());
    if count == 0 {
        return Ok(MergePlan::empty(part));
    }
    let best = best_destination_assignment(sim)?;
    let mut order: Vec<usize> = (0..best.len()).collect();
    // Source positions are ascending in source index, so the secondary key
    // breaks ties by lower source index. partial_cmp keeps -0.0 == 0.0.
    order.sort_by(|&a, &b| {
        best[b]
            .similarity
            .partial_cmp(&best[a].similarity)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let pairs = order[..count]
        .iter()
        .map(|&i| assigned_pair(part, i, best[i]))
        .collect();
    MergePlan::from_pairs(part, pairs)
}

/// Keeps every source whose best similarity is strictly greater than
/// `threshold`.
pub fn plan_threshold(sim: &SimilarityMatrix, part: &Partition, threshold: f32) -> Result<MergePlan> {
    MatchConfig::Threshold { threshold }.validate()?;
    check_matrix(sim, part)?;
    if part.src_indices.is_empty() {
        return Ok(MergePlan::empty(part));
    }
    let pairs = best_destination_assignment(sim)?
        .into_iter()
        .enumerate()
        .filter(|(_, a)| a.similarity > threshold)
        .map(|(i, a)| assigned_pair(part, i, a))
        .collect();
    MergePlan::from_pairs(part, pairs)
}

/// Similarity matrix plus plan selection in one call.
pub fn plan_merge(features: &Tokens, part: &Partition, cfg: &MatchConfig) -> Result<MergePlan> {
    let sim = build_similarity_matrix(features, part)?;
    match *cfg {
        MatchConfig::FixedRate { rate } => plan_top_r(&sim, part, rate),
        MatchConfig::Threshold { threshold } => plan_threshold(&sim, part, threshold),
    }
}
