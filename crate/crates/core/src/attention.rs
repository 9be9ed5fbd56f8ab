//! A minimal pre-norm transformer block with an optional merged path.
//!
//! The block computes `a = Attn(LN1(x))`, `f = FFN(LN2(x + a))` and returns
//! `x + a + f`. With merging enabled the update `a + f` is computed on the
//! reduced token set and copied back to full resolution before the residual
//! is added, so the block's input and output shapes always match.

use serde::{Deserialize, Serialize};

use crate::bench::Stopwatch;
use crate::error::{Error, Result};
use crate::grid::{rng_from_seed, TokenGrid, Tokens};
use crate::kernels::{self, ROW_BLOCK};
use crate::matching::{partition_strides, plan_merge, MatchConfig, MergePlan, PartitionConfig};
use crate::merging::{apply_merge, apply_unmerge, SizedTokens};

const LN_EPS: f32 = 1e-5;

/// Which representation the similarity matrix is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityFeatures {
    /// The hidden states entering the block.
    #[default]
    Hidden,
    /// Attention keys, `LN1(x) · Wk`.
    Keys,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub merge_enabled: bool,
    pub matching: MatchConfig,
    pub partition: PartitionConfig,
    /// Adds `ln(size)` to each key's logit so a merged token attends like
    /// the copies it replaced.
    pub proportional_attention: bool,
    pub features: SimilarityFeatures,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            merge_enabled: false,
            matching: MatchConfig::Threshold { threshold: 0.7 },
            partition: PartitionConfig::default(),
            proportional_attention: false,
            features: SimilarityFeatures::Hidden,
        }
    }
}

/// Surrogate weights. Matrices are stored `in x out` row-major and applied
/// as `x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub channels: usize,
    pub heads: usize,
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
    pub ln1_gamma: Vec<f32>,
    pub ln1_beta: Vec<f32>,
    pub ln2_gamma: Vec<f32>,
    pub ln2_beta: Vec<f32>,
}

impl BlockWeights {
    /// Uniform weights in `[-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero biases,
    /// identity normalization.
    pub fn from_seed(channels: usize, heads: usize, seed: u64) -> Result<Self> {
        use rand::Rng;
        if channels == 0 || heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{channels} channels cannot be split into {heads} heads"
            )));
        }
        let mut rng = rng_from_seed(seed);
        let mut matrix = |fan_in: usize, fan_out: usize| -> Vec<f32> {
            let bound = 1.0 / (fan_in as f32).sqrt();
            (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let c = channels;
        let hidden = 4 * c;
        Ok(Self {
            channels,
            heads,
            wq: matrix(c, c),
            wk: matrix(c, c),
            wv: matrix(c, c),
            wo: matrix(c, c),
            w1: matrix(c, hidden),
            b1: vec![0.0; hidden],
            w2: matrix(hidden, c),
            b2: vec![0.0; c],
            ln1_gamma: vec![1.0; c],
            ln1_beta: vec![0.0; c],
            ln2_gamma: vec![1.0; c],
            ln2_beta: vec![0.0; c],
        })
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    fn check(&self, tokens: &Tokens) -> Result<()> {
        if tokens.channels() != self.channels {
            return Err(Error::Shape(format!(
                "weights expect {} channels, tokens have {}",
                self.channels,
                tokens.channels()
            )));
        }
        Ok(())
    }
}

fn linear(x: &Tokens, w: &[f32], out_dim: usize, bias: Option<&[f32]>) -> Tokens {
    let mut out = Tokens::zeros(x.len(), out_dim);
    kernels::linear(x.as_slice(), x.channels(), w, out_dim, bias, out.as_mut_slice());
    out
}

pub(crate) fn layer_norm(x: &Tokens, gamma: &[f32], beta: &[f32]) -> Tokens {
    let c = x.channels();
    let mut out = Tokens::zeros(x.len(), c);
    for i in 0..x.len() {
        let row = x.row(i);
        let mean = row.iter().sum::<f32>() / c as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (o, ((&v, &g), &b)) in out.row_mut(i).iter_mut().zip(row.iter().zip(gamma).zip(beta)) {
            *o = (v - mean) * inv * g + b;
        }
    }
    out
}

fn gelu(x: f32) -> f32 {
    const K: f32 = 0.797_884_6; // sqrt(2 / pi)
    0.5 * x * (1.0 + (K * (x + 0.044_715 * x * x * x)).tanh())
}

fn add_into(dst: &mut Tokens, src: &Tokens) {
    dst.as_mut_slice()
        .iter_mut()
        .zip(src.as_slice())
        .for_each(|(d, s)| *d += s);
}

/// Channel-major copy of one head's columns: `out[c * m + j] = x[j, offset + c]`.
fn head_transposed(x: &Tokens, offset: usize, head_dim: usize) -> Vec<f32> {
    let m = x.len();
    let mut out = vec![0.0f32; head_dim * m];
    for j in 0..m {
        let row = &x.row(j)[offset..offset + head_dim];
        for (c, &v) in row.iter().enumerate() {
            out[c * m + j] = v;
        }
    }
    out
}

/// Scaled dot-product self-attention followed by the output projection.
///
/// With `proportional` set and `sizes` given, `ln(size_j)` is added to the
/// logit of key `j`.
pub fn attention_forward(
    tokens: &Tokens,
    weights: &BlockWeights,
    sizes: Option<&[u32]>,
    proportional: bool,
) -> Result<Tokens> {
    weights.check(tokens)?;
    let m = tokens.len();
    if m == 0 {
        return Err(Error::Shape("attention needs at least one token".into()));
    }
    let c = weights.channels;
    let q = linear(tokens, &weights.wq, c, None);
    let k = linear(tokens, &weights.wk, c, None);
    let v = linear(tokens, &weights.wv, c, None);

    let bias: Option<Vec<f32>> = match (proportional, sizes) {
        (true, Some(sizes)) => {
            if sizes.len() != m {
                return Err(Error::Shape(format!("{} sizes for {m} tokens", sizes.len())));
            }
            Some(sizes.iter().map(|&s| (s as f32).ln()).collect())
        }
        _ => None,
    };

    let d = weights.head_dim();
    let scale = 1.0 / (d as f32).sqrt();
    let mut mixed = Tokens::zeros(m, c);
    let mut logits = vec![0.0f32; ROW_BLOCK * m];
    let mut block_q = vec![0.0f32; ROW_BLOCK * d];
    let mut block_out = vec![0.0f32; ROW_BLOCK * d];
    for h in 0..weights.heads {
        let offset = h * d;
        let kt = head_transposed(&k, offset, d);
        let vt = head_transposed(&v, offset, d);
        for start in (0..m).step_by(ROW_BLOCK) {
            let rows = ROW_BLOCK.min(m - start);
            // a short final block is padded with zero queries
            block_q.fill(0.0);
            for r in 0..rows {
                block_q[r * d..(r + 1) * d].copy_from_slice(&q.row(start + r)[offset..offset + d]);
            }
            let finite = kernels::attend_rows(
                &block_q,
                &kt,
                &vt,
                m,
                scale,
                bias.as_deref(),
                &mut logits,
                &mut block_out,
            );
            if !finite {
                return Err(Error::numeric("attention logits"));
            }
            for r in 0..rows {
                mixed.row_mut(start + r)[offset..offset + d].copy_from_slice(&block_out[r * d..(r + 1) * d]);
            }
        }
    }
    let out = linear(&mixed, &weights.wo, c, None);
    if !out.is_finite() {
        return Err(Error::numeric("attention output"));
    }
    Ok(out)
}

/// The block's update `a + f` for a token set (without the outer residual).
fn block_update(x: &Tokens, weights: &BlockWeights, sizes: Option<&[u32]>, proportional: bool) -> Result<Tokens> {
    let normed = layer_norm(x, &weights.ln1_gamma, &weights.ln1_beta);
    let mut update = attention_forward(&normed, weights, sizes, proportional)?;

    let mut hidden = x.clone();
    add_into(&mut hidden, &update);
    let normed = layer_norm(&hidden, &weights.ln2_gamma, &weights.ln2_beta);
    let mut inner = linear(&normed, &weights.w1, 4 * weights.channels, Some(&weights.b1));
    inner.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
    let ff = linear(&inner, &weights.w2, weights.channels, Some(&weights.b2));

    add_into(&mut update, &ff);
    if !update.is_finite() {
        return Err(Error::numeric("block update"));
    }
    Ok(update)
}

/// Builds the merge plan a block would use for `grid` under `cfg`.
pub fn compute_plan(grid: &TokenGrid, weights: &BlockWeights, cfg: &BlockConfig) -> Result<MergePlan> {
    let part = partition_strides(grid.height(), grid.width(), &cfg.partition)?;
    match cfg.features {
        SimilarityFeatures::Hidden => plan_merge(grid.tokens(), &part, &cfg.matching),
        SimilarityFeatures::Keys => {
            weights.check(grid.tokens())?;
            let normed = layer_norm(grid.tokens(), &weights.ln1_gamma, &weights.ln1_beta);
            let keys = linear(&normed, &weights.wk, weights.channels, None);
            plan_merge(&keys, &part, &cfg.matching)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BlockCounters {
    pub tokens_before: usize,
    /// Tokens that went through attention.
    pub tokens_after: usize,
    pub merged_pairs: usize,
    /// Whether the plan was built inside this call.
    pub plan_computed: bool,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub grid: TokenGrid,
    /// The plan that was applied; `None` when merging is disabled.
    pub plan: Option<MergePlan>,
    pub counters: BlockCounters,
}

/// Runs one block. When merging is enabled, `plan` is used if given and
/// otherwise computed from `grid`.
pub fn block_forward(
    grid: &TokenGrid,
    weights: &BlockWeights,
    cfg: &BlockConfig,
    plan: Option<&MergePlan>,
) -> Result<BlockOutput> {
    let clock = Stopwatch::start();
    let x = grid.tokens();
    let n = x.len();

    let (plan, plan_computed) = if !cfg.merge_enabled {
        (None, false)
    } else if let Some(plan) = plan {
        plan.check_len(n)?;
        (Some(plan.clone()), false)
    } else {
        (Some(compute_plan(grid, weights, cfg)?), true)
    };

    let update = match &plan {
        Some(plan) if !plan.is_empty() => {
            let merged = apply_merge(&SizedTokens::unit(x.clone()), plan)?;
            let reduced = block_update(
                merged.tokens(),
                weights,
                Some(merged.sizes()),
                cfg.proportional_attention,
            )?;
            apply_unmerge(&reduced, plan)?
        }
        // an empty plan takes the unmerged path so both are bit-identical
        _ => block_update(x, weights, None, cfg.proportional_attention)?,
    };

    let mut out = x.clone();
    add_into(&mut out, &update);
    let merged_pairs = plan.as_ref().map_or(0, MergePlan::num_merged);
    Ok(BlockOutput {
        grid: grid.with_tokens(out)?,
        counters: BlockCounters {
            tokens_before: n,
            tokens_after: n - merged_pairs,
            merged_pairs,
            plan_computed,
            wall_time_s: clock.elapsed_s(),
        },
        plan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_synthetic_grid, RedundancyProfile};
    use crate::matching::Partition;

    /// Textbook attention with no layout tricks, in f64.
    fn naive_attention(x: &Tokens, w: &BlockWeights) -> Vec<Vec<f64>> {
        let (m, c) = (x.len(), w.channels);
        let proj = |mat: &[f32]| -> Vec<Vec<f64>> {
            (0..m)
                .map(|i| {
                    (0..c)
                        .map(|j| (0..c).map(|k| x.row(i)[k] as f64 * mat[k * c + j] as f64).sum())
                        .collect()
                })
                .collect()
        };
        let (q, k, v) = (proj(&w.wq), proj(&w.wk), proj(&w.wv));
        let scale = 1.0 / (c as f64).sqrt();
        let mut mixed = vec![vec![0.0; c]; m];
        for i in 0..m {
            let logits: Vec<f64> = (0..m)
                .map(|j| (0..c).map(|t| q[i][t] * k[j][t]).sum::<f64>() * scale)
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..c {
                mixed[i][t] = (0..m).map(|j| e[j] * v[j][t]).sum::<f64>() / z;
            }
        }
        (0..m)
            .map(|i| {
                (0..c)
                    .map(|j| (0..c).map(|t| mixed[i][t] * w.wo[t * c + j] as f64).sum())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn single_token_passes_value_chain() {
        let w = BlockWeights::from_seed(4, 1, 3).unwrap();
        let x = Tokens::from_rows(&[vec![0.5, -1.0, 2.0, 0.25]]).unwrap();
        let out = attention_forward(&x, &w, None, false).unwrap();
        let chain = linear(&linear(&x, &w.wv, 4, None), &w.wo, 4, None);
        for (a, b) in out.as_slice().iter().zip(chain.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_tokens_give_identical_rows() {
        let w = BlockWeights::from_seed(6, 2, 5).unwrap();
        let x = Tokens::from_rows(&vec![vec![0.1, 0.2, -0.3, 0.4, 0.0, 1.0]; 2]).unwrap();
        let out = attention_forward(&x, &w, None, false).unwrap();
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn matches_naive_three_token_attention() {
        let mut w = BlockWeights::from_seed(2, 1, 0).unwrap();
        w.wq = vec![0.5, -0.25, 0.75, 1.0];
        w.wk = vec![1.0, 0.5, -0.5, 0.25];
        w.wv = vec![0.2, 0.4, -0.6, 0.8];
        w.wo = vec![1.0, 0.0, 0.3, -1.2];
        let x = Tokens::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.25], vec![3.0, -1.0]]).unwrap();
        let out = attention_forward(&x, &w, None, false).unwrap();
        let expect = naive_attention(&x, &w);
        for (i, row) in expect.iter().enumerate() {
            for (j, &e) in row.iter().enumerate() {
                assert!((out.row(i)[j] as f64 - e).abs() < 1e-5, "({i},{j})");
            }
        }
    }

    #[test]
    fn matches_naive_on_random_tokens() {
        let w = BlockWeights::from_seed(16, 1, 9).unwrap();
        let grid = make_synthetic_grid(
            6,
            7,
            16,
            &RedundancyProfile {
                seed: 4,
                smoothing_radius: 1,
                amplitude: 2.0,
            },
        )
        .unwrap();
        let out = attention_forward(grid.tokens(), &w, None, false).unwrap();
        let expect = naive_attention(grid.tokens(), &w);
        for (i, row) in expect.iter().enumerate() {
            for (j, &e) in row.iter().enumerate() {
                assert!((out.row(i)[j] as f64 - e).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn proportional_sizes_act_like_duplicates() {
        let w = BlockWeights::from_seed(4, 1, 2).unwrap();
        let a = vec![0.3, -0.7, 1.1, 0.2];
        let b = vec![-1.0, 0.4, 0.0, 0.9];
        let dup = Tokens::from_rows(&[a.clone(), a.clone(), b.clone()]).unwrap();
        let full = attention_forward(&dup, &w, None, false).unwrap();
        let merged = Tokens::from_rows(&[a, b]).unwrap();
        let prop = attention_forward(&merged, &w, Some(&[2, 1]), true).unwrap();
        for c in 0..4 {
            assert!((full.row(0)[c] - prop.row(0)[c]).abs() < 1e-5);
            assert!((full.row(2)[c] - prop.row(1)[c]).abs() < 1e-5);
        }
    }

    fn test_grid(h: usize, w: usize, c: usize, seed: u64) -> TokenGrid {
        make_synthetic_grid(
            h,
            w,
            c,
            &RedundancyProfile {
                seed,
                smoothing_radius: 1,
                amplitude: 1.0,
            },
        )
        .unwrap()
    }

    #[test]
    fn empty_plan_is_bit_identical_to_unmerged() {
        let w = BlockWeights::from_seed(8, 2, 1).unwrap();
        let grid = test_grid(8, 8, 8, 2);
        let off = block_forward(&grid, &w, &BlockConfig::default(), None).unwrap();
        let cfg = BlockConfig {
            merge_enabled: true,
            ..Default::default()
        };
        let part = partition_strides(8, 8, &cfg.partition).unwrap();
        let on = block_forward(&grid, &w, &cfg, Some(&MergePlan::empty(&part))).unwrap();
        let bits = |g: &TokenGrid| g.tokens().as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&off.grid), bits(&on.grid));
        assert_eq!(on.counters.tokens_after, 64);
    }

    #[test]
    fn merging_duplicates_with_proportional_attention_is_exact() {
        let w = BlockWeights::from_seed(8, 1, 7).unwrap();
        let grid = test_grid(4, 4, 8, 3);
        let mut data = grid.tokens().as_slice().to_vec();
        let first: Vec<f32> = data[..8].to_vec();
        data[8..16].copy_from_slice(&first);
        let grid = TokenGrid::from_vec(4, 4, 8, data).unwrap();

        let cfg = BlockConfig {
            merge_enabled: true,
            proportional_attention: true,
            ..Default::default()
        };
        let part = partition_strides(4, 4, &cfg.partition).unwrap();
        let plan = MergePlan::from_pairs(&part, vec![(1, 0, 1.0)]).unwrap();
        let merged = block_forward(&grid, &w, &cfg, Some(&plan)).unwrap();
        let full = block_forward(&grid, &w, &BlockConfig::default(), None).unwrap();
        for (a, b) in merged
            .grid
            .tokens()
            .as_slice()
            .iter()
            .zip(full.grid.tokens().as_slice())
        {
            assert!((a - b).abs() <= 1e-4);
        }
        assert_eq!(merged.counters.tokens_after, 15);
    }

    #[test]
    fn counters_track_reduced_token_count() {
        let w = BlockWeights::from_seed(8, 1, 1).unwrap();
        let grid = test_grid(64, 64, 8, 5);
        let cfg = BlockConfig {
            merge_enabled: true,
            matching: MatchConfig::FixedRate { rate: 0.5 },
            ..Default::default()
        };
        let out = block_forward(&grid, &w, &cfg, None).unwrap();
        let pairs = out.plan.as_ref().unwrap().num_merged();
        assert_eq!(pairs, 1536);
        assert_eq!(out.counters.tokens_after, 4096 - pairs);
        assert!(out.counters.plan_computed);
    }

    #[test]
    fn stale_plan_is_rejected() {
        let w = BlockWeights::from_seed(4, 1, 1).unwrap();
        let grid = test_grid(4, 4, 4, 1);
        let cfg = BlockConfig {
            merge_enabled: true,
            ..Default::default()
        };
        let stale = Partition {
            num_tokens: 4,
            dst_indices: vec![0],
            src_indices: vec![1, 2, 3],
        };
        let err = block_forward(&grid, &w, &cfg, Some(&MergePlan::empty(&stale))).unwrap_err();
        assert_eq!(
            err,
            Error::PlanMismatch {
                expected: 4,
                actual: 16
            }
        );
    }

    #[test]
    fn key_features_produce_valid_plans() {
        let w = BlockWeights::from_seed(8, 1, 1).unwrap();
        let grid = test_grid(8, 8, 8, 5);
        let cfg = BlockConfig {
            merge_enabled: true,
            features: SimilarityFeatures::Keys,
            matching: MatchConfig::FixedRate { rate: 0.5 },
            ..Default::default()
        };
        let plan = compute_plan(&grid, &w, &cfg).unwrap();
        assert_eq!(plan.num_merged(), 24);
        plan.validate().unwrap();
    }

    #[test]
    fn overflow_is_reported() {
        let mut w = BlockWeights::from_seed(2, 1, 0).unwrap();
        w.wq = vec![f32::MAX; 4];
        w.wk = vec![f32::MAX; 4];
        let x = Tokens::from_rows(&[vec![1.0, 1.0], vec![1.0, 2.0]]).unwrap();
        assert!(matches!(
            attention_forward(&x, &w, None, false),
            Err(Error::Numeric { .. })
        ));
    }
}
