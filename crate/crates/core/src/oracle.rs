//! Brute-force reference for merge planning.
//!
//! [`oracle_plan`] recomputes a plan with plain nested loops: no similarity
//! matrix, no sorting, no shared helpers with [`crate::matching`]. Each
//! cosine is evaluated with the same floating-point formula (sequential dot
//! product over channels, `dot / (|a| |b|)`, clamped), so the two paths
//! agree exactly rather than approximately.

use std::time::Instant;

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{rng_from_seed, Tokens};
use crate::matching::{
    partition_strides, plan_merge, DestinationRule, MatchConfig, MergePlan, Partition, PartitionConfig,
};

fn naive_cosine(a: &[f32], b: &[f32]) -> f32 {
    let mut dot = 0.0f32;
    let mut aa = 0.0f32;
    let mut bb = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
    }
    for x in a {
        aa += x * x;
    }
    for y in b {
        bb += y * y;
    }
    let (na, nb) = (aa.sqrt(), bb.sqrt());
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

pub fn oracle_plan(features: &Tokens, part: &Partition, cfg: &MatchConfig) -> Result<MergePlan> {
    cfg.validate()?;
    if features.len() != part.num_tokens {
        return Err(Error::Shape(format!(
            "partition covers {} tokens but features have {} rows",
            part.num_tokens,
            features.len()
        )));
    }
    let n_src = part.src_indices.len();
    if n_src > 0 && part.dst_indices.is_empty() {
        return Err(Error::Domain("no destination tokens to assign to".into()));
    }

    // best[k] = (dst index, similarity) for the k-th source
    let mut best: Vec<(usize, f32)> = Vec::with_capacity(n_src);
    for &s in &part.src_indices {
        let mut best_dst = usize::MAX;
        let mut best_sim = f32::NEG_INFINITY;
        for &d in &part.dst_indices {
            let sim = naive_cosine(features.row(s), features.row(d));
            if best_dst == usize::MAX || sim > best_sim {
                best_dst = d;
                best_sim = sim;
            }
        }
        best.push((best_dst, best_sim));
    }

    let mut chosen = vec![false; n_src];
    match *cfg {
        MatchConfig::FixedRate { rate } => {
            let count = (rate * n_src as f64).floor() as usize;
            for _ in 0..count.min(n_src) {
                let mut pick = usize::MAX;
                for k in 0..n_src {
                    if chosen[k] {
                        continue;
                    }
                    if pick == usize::MAX || best[k].1 > best[pick].1 {
                        pick = k;
                    }
                }
                chosen[pick] = true;
            }
        }
        MatchConfig::Threshold { threshold } => {
            for k in 0..n_src {
                chosen[k] = best[k].1 > threshold;
            }
        }
    }

    let mut plan = MergePlan {
        num_tokens: part.num_tokens,
        pairs: Vec::new(),
        similarities: Vec::new(),
        dst_indices: part.dst_indices.clone(),
        unmerged_src_indices: Vec::new(),
    };
    for k in 0..n_src {
        let s = part.src_indices[k];
        if chosen[k] {
            plan.pairs.push((s, best[k].0));
            plan.similarities.push(best[k].1);
        } else {
            plan.unmerged_src_indices.push(s);
        }
    }
    Ok(plan)
}

/// Parameters of a randomized oracle-equivalence run.
#[derive(Debug, Clone, Copy)]
pub struct OracleSuite {
    pub instances: usize,
    pub max_tokens: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct OracleMismatch {
    pub instance: usize,
    pub description: String,
}

#[derive(Debug, Clone)]
pub struct OracleReport {
    pub instances: usize,
    pub mismatches: Vec<OracleMismatch>,
    pub elapsed_s: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

pub const ORACLE_RATES: [f64; 4] = [0.0, 0.25, 0.5, 1.0];
pub const ORACLE_THRESHOLDS: [f32; 5] = [-1.0, 0.0, 0.5, 0.7, 1.0];

/// One randomly drawn planning problem.
#[derive(Debug, Clone)]
pub struct OracleInstance {
    pub height: usize,
    pub width: usize,
    pub partition: PartitionConfig,
    pub features: Tokens,
    pub matching: MatchConfig,
}

/// Draws a random instance. Some instances use coarsely quantized values,
/// duplicated tokens or zero tokens so that ties and the zero-norm rule
/// are exercised.
pub fn random_instance(rng: &mut impl Rng, max_tokens: usize) -> OracleInstance {
    const STRIDES: [(usize, usize); 4] = [(2, 2), (2, 2), (2, 1), (1, 2)];
    let (sx, sy) = STRIDES[rng.random_range(0..STRIDES.len())];
    let max_tiles = (max_tokens / (sx * sy)).max(1);
    let tiles_y = rng.random_range(1..=max_tiles.min(8));
    let tiles_x = rng.random_range(1..=(max_tiles / tiles_y).clamp(1, 8));
    let (height, width) = (tiles_y * sy, tiles_x * sx);
    let n = height * width;
    let channels = rng.random_range(1..=8);

    let quantized = rng.random_bool(0.3);
    let mut data: Vec<f32> = (0..n * channels)
        .map(|_| {
            if quantized {
                rng.random_range(-2i32..=2) as f32
            } else {
                rng.random_range(-1.0f32..1.0)
            }
        })
        .collect();
    if rng.random_bool(0.3) {
        for _ in 0..rng.random_range(1..=n) {
            let (from, to) = (rng.random_range(0..n), rng.random_range(0..n));
            let src: Vec<f32> = data[from * channels..(from + 1) * channels].to_vec();
            data[to * channels..(to + 1) * channels].copy_from_slice(&src);
        }
    }
    if rng.random_bool(0.2) {
        let z = rng.random_range(0..n);
        data[z * channels..(z + 1) * channels].fill(0.0);
    }

    let dst_rule = if rng.random_bool(0.25) {
        DestinationRule::RandomInStride { seed: rng.random() }
    } else {
        DestinationRule::TopLeft
    };
    let matching = if rng.random_bool(0.5) {
        MatchConfig::FixedRate {
            rate: ORACLE_RATES[rng.random_range(0..ORACLE_RATES.len())],
        }
    } else {
        MatchConfig::Threshold {
            threshold: ORACLE_THRESHOLDS[rng.random_range(0..ORACLE_THRESHOLDS.len())],
        }
    };
    OracleInstance {
        height,
        width,
        partition: PartitionConfig {
            stride_x: sx,
            stride_y: sy,
            dst_rule,
        },
        features: Tokens::from_vec(n, channels, data).expect("consistent instance shape"),
        matching,
    }
}

fn compare(instance: &OracleInstance, part: &Partition) -> Result<Option<String>> {
    let fast = plan_merge(&instance.features, part, &instance.matching)?;
    let slow = oracle_plan(&instance.features, part, &instance.matching)?;
    if fast == slow {
        return Ok(None);
    }
    Ok(Some(format!(
        "{}x{} {:?} {:?}: fast pairs {:?}, oracle pairs {:?}",
        instance.height, instance.width, instance.partition, instance.matching, fast.pairs, slow.pairs
    )))
}

/// Runs the fast planner and the oracle on `instances` random problems and
/// collects every disagreement.
pub fn run_oracle_suite(suite: &OracleSuite) -> Result<OracleReport> {
    if suite.max_tokens < 2 {
        return Err(Error::Config("oracle instances need at least 2 tokens".into()));
    }
    let start = Instant::now();
    let mut rng = rng_from_seed(suite.seed);
    let mut mismatches = Vec::new();
    for i in 0..suite.instances {
        let instance = random_instance(&mut rng, suite.max_tokens);
        let part = partition_strides(instance.height, instance.width, &instance.partition)?;
        if let Some(description) = compare(&instance, &part)? {
            mismatches.push(OracleMismatch {
                instance: i,
                description,
            });
        }
    }
    Ok(OracleReport {
        instances: suite.instances,
        mismatches,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}
