//! Surrogate multi-step denoising loop.
//!
//! A latent grid is pushed `steps` times through a stack of transformer
//! blocks with the damped update `x <- x + step_size * (stack(x) - x)`, so
//! consecutive steps see slowly drifting tokens. Stages may run at a pooled
//! resolution (the inner, low-token layers of a U-Net); merge-enabled
//! stages stand in for the outermost encoder and decoder layers.

use serde::{Deserialize, Serialize};

use crate::analysis::{jaccard_trace, mean_row_cosine, psnr, JaccardTrace, PairSet};
use crate::attention::{block_forward, compute_plan, layer_norm, BlockConfig, BlockWeights, SimilarityFeatures};
use crate::bench::{time_fn, time_round_robin, Stopwatch, TimingSample};
use crate::cache::{BlockId, CheckpointSchedule, PairCache};
use crate::error::{Error, Result};
use crate::grid::{make_synthetic_grid, RedundancyProfile, TokenGrid, Tokens};
use crate::matching::{
    best_destination_assignment, build_similarity_matrix, partition_strides, MatchConfig, PartitionConfig,
};

/// One position in the block stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub merge_enabled: bool,
    /// Pooling factor applied before the block (1 = full resolution).
    pub downsample: usize,
}

impl StageConfig {
    pub const fn full(merge_enabled: bool) -> Self {
        Self {
            merge_enabled,
            downsample: 1,
        }
    }

    pub const fn pooled(downsample: usize) -> Self {
        Self {
            merge_enabled: false,
            downsample,
        }
    }
}

/// Outer blocks merge at full resolution; the two inner blocks run on a
/// 2x pooled grid.
pub fn default_stages() -> Vec<StageConfig> {
    vec![
        StageConfig::full(true),
        StageConfig::pooled(2),
        StageConfig::pooled(2),
        StageConfig::full(true),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub enum PipelineMode {
    /// No merging anywhere.
    Baseline,
    /// Top-`rate` merging, plans rebuilt every step.
    FixedRate { rate: f64 },
    /// Threshold merging with plans rebuilt only at checkpoints.
    CaTome {
        threshold: f32,
        schedule: CheckpointSchedule,
    },
    /// Threshold merging with plans rebuilt every step and no cache.
    Adaptive { threshold: f32 },
}

impl PipelineMode {
    pub fn label(&self) -> &'static str {
        match self {
            PipelineMode::Baseline => "baseline",
            PipelineMode::FixedRate { .. } => "tome",
            PipelineMode::CaTome { .. } => "catome",
            PipelineMode::Adaptive { .. } => "adaptive",
        }
    }

    fn matching(&self) -> Option<MatchConfig> {
        match *self {
            PipelineMode::Baseline => None,
            PipelineMode::FixedRate { rate } => Some(MatchConfig::FixedRate { rate }),
            PipelineMode::CaTome { threshold, .. } | PipelineMode::Adaptive { threshold } => {
                Some(MatchConfig::Threshold { threshold })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub steps: usize,
    pub stages: Vec<StageConfig>,
    pub mode: PipelineMode,
    /// Damping of the update; 0 freezes the latent.
    pub step_size: f32,
    pub seed: u64,
    pub smoothing_radius: usize,
    pub amplitude: f32,
    pub heads: usize,
    pub partition: PartitionConfig,
    pub proportional_attention: bool,
    pub features: SimilarityFeatures,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 16,
            steps: 50,
            stages: default_stages(),
            mode: PipelineMode::Baseline,
            step_size: 0.02,
            seed: 0,
            smoothing_radius: 4,
            // a radius-4 box filter shrinks unit-range noise to a standard
            // deviation of about 1/16; this restores roughly unit scale
            amplitude: 16.0,
            heads: 1,
            partition: PartitionConfig::default(),
            proportional_attention: false,
            features: SimilarityFeatures::Hidden,
        }
    }
}

impl PipelineConfig {
    pub fn with_mode(&self, mode: PipelineMode) -> Self {
        Self { mode, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return cfg_err("grid dimensions must be positive".into());
        }
        if self.steps == 0 {
            return cfg_err("at least one step is required".into());
        }
        if self.stages.is_empty() {
            return cfg_err("at least one block is required".into());
        }
        if !(self.amplitude.is_finite() && self.amplitude > 0.0) {
            return cfg_err(format!("amplitude {} must be positive", self.amplitude));
        }
        if self.smoothing_radius > self.height.min(self.width) {
            return cfg_err(format!(
                "smoothing radius {} exceeds the grid's shorter side",
                self.smoothing_radius
            ));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return cfg_err(format!("{} heads do not divide {} channels", self.heads, self.channels));
        }
        if !(self.step_size.is_finite() && (0.0..=1.0).contains(&self.step_size)) {
            return cfg_err(format!("step size {} outside [0, 1]", self.step_size));
        }
        for (b, stage) in self.stages.iter().enumerate() {
            let f = stage.downsample;
            if f == 0 || !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) {
                return cfg_err(format!("block {b}: downsample {f} does not divide the grid"));
            }
            if stage.merge_enabled {
                partition_strides(self.height / f, self.width / f, &self.partition)?;
            }
        }
        if let Some(m) = self.mode.matching() {
            m.validate()?;
        }
        if let PipelineMode::CaTome { schedule, .. } = &self.mode {
            if schedule.total_steps != self.steps {
                return cfg_err(format!(
                    "schedule {} covers {} steps, pipeline runs {}",
                    schedule.name, schedule.total_steps, self.steps
                ));
            }
        }
        Ok(())
    }

    pub fn profile(&self) -> RedundancyProfile {
        RedundancyProfile {
            seed: self.seed,
            smoothing_radius: self.smoothing_radius,
            amplitude: self.amplitude,
        }
    }

    fn block_config(&self, stage: &StageConfig) -> BlockConfig {
        let matching = self.mode.matching();
        BlockConfig {
            merge_enabled: stage.merge_enabled && matching.is_some(),
            matching: matching.unwrap_or(MatchConfig::FixedRate { rate: 0.0 }),
            partition: self.partition,
            proportional_attention: self.proportional_attention,
            features: self.features,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// What one stage did at one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageRecord {
    pub tokens_before: usize,
    pub tokens_after: usize,
    pub merged_pairs: usize,
    /// Sources available for merging (0 when merging is off).
    pub sources: usize,
    pub recomputed: bool,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub final_grid: TokenGrid,
    /// `steps[n][b]` is stage `b` at step `n`.
    pub steps: Vec<Vec<StageRecord>>,
    /// Per merge-enabled block, the pair set used at every step.
    pub pair_sets: Vec<(BlockId, Vec<PairSet>)>,
    pub total_time_s: f64,
}

impl RunOutput {
    /// Plan constructions by `block` over the run.
    pub fn similarity_builds(&self, block: BlockId) -> usize {
        self.steps.iter().filter(|s| s[block].recomputed).count()
    }

    pub fn merge_counts(&self, block: BlockId) -> Vec<usize> {
        self.steps.iter().map(|s| s[block].merged_pairs).collect()
    }

    /// Merged pairs over available sources, averaged across merge-enabled
    /// block-steps; 0 when nothing was eligible.
    pub fn mean_merge_fraction(&self) -> f64 {
        let (sum, n) = self
            .steps
            .iter()
            .flatten()
            .filter(|r| r.sources > 0)
            .fold((0.0, 0usize), |(s, n), r| {
                (s + r.merged_pairs as f64 / r.sources as f64, n + 1)
            });
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn merge_blocks(&self) -> Vec<BlockId> {
        self.pair_sets.iter().map(|(b, _)| *b).collect()
    }

    pub fn jaccard_trace(&self, block: BlockId) -> Result<JaccardTrace> {
        let (_, sets) = self
            .pair_sets
            .iter()
            .find(|(b, _)| *b == block)
            .ok_or_else(|| Error::IncompleteTrace(format!("block {block} recorded no pair sets")))?;
        let steps: Vec<Option<PairSet>> = sets.iter().cloned().map(Some).collect();
        if steps.len() != self.steps.len() {
            return Err(Error::IncompleteTrace(format!(
                "block {block} has {} of {} steps",
                steps.len(),
                self.steps.len()
            )));
        }
        jaccard_trace(block, &steps)
    }
}

/// A configured pipeline: weights and the initial latent are built once so
/// that repeated runs time only the step loop.
#[derive(Debug, Clone)]
pub struct Pipeline {
    cfg: PipelineConfig,
    weights: Vec<BlockWeights>,
    blocks: Vec<BlockConfig>,
    initial: TokenGrid,
    unit_gamma: Vec<f32>,
    unit_beta: Vec<f32>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let initial = make_synthetic_grid(cfg.height, cfg.width, cfg.channels, &cfg.profile())?;
        let weights = (0..cfg.stages.len())
            .map(|b| BlockWeights::from_seed(cfg.channels, cfg.heads, splitmix64(cfg.seed ^ (b as u64 + 1))))
            .collect::<Result<Vec<_>>>()?;
        let blocks = cfg.stages.iter().map(|s| cfg.block_config(s)).collect();
        Ok(Self {
            unit_gamma: vec![1.0; cfg.channels],
            unit_beta: vec![0.0; cfg.channels],
            cfg,
            weights,
            blocks,
            initial,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn initial(&self) -> &TokenGrid {
        &self.initial
    }

    pub fn run(&self) -> Result<RunOutput> {
        let clock = Stopwatch::start();
        let cfg = &self.cfg;
        let mut cache = PairCache::new();
        let mut x = self.initial.clone();
        let mut steps = Vec::with_capacity(cfg.steps);
        let mut pair_sets: Vec<(BlockId, Vec<PairSet>)> = self
            .blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.merge_enabled)
            .map(|(i, _)| (i, Vec::with_capacity(cfg.steps)))
            .collect();

        for step in 0..cfg.steps {
            let mut h = x.clone();
            let mut records = Vec::with_capacity(self.blocks.len());
            for (b, (stage, block)) in cfg.stages.iter().zip(&self.blocks).enumerate() {
                let stage_clock = Stopwatch::start();
                let pooled;
                let input = if stage.downsample > 1 {
                    pooled = h.avg_pool(stage.downsample)?;
                    &pooled
                } else {
                    &h
                };
                let weights = &self.weights[b];

                let (out, recomputed) = match &cfg.mode {
                    PipelineMode::CaTome { schedule, .. } if block.merge_enabled => {
                        let (plan, recomputed) = cache
                            .plan_for_step(b, step, input.num_tokens(), schedule, || {
                                compute_plan(input, weights, block)
                            })
                            .map_err(|e| e.at_step(step))?;
                        (block_forward(input, weights, block, Some(plan)), recomputed)
                    }
                    _ => (block_forward(input, weights, block, None), block.merge_enabled),
                };
                let out = out.map_err(|e| e.at_step(step))?;

                if let Some(plan) = &out.plan {
                    if let Some((_, sets)) = pair_sets.iter_mut().find(|(id, _)| *id == b) {
                        sets.push(PairSet::from_plan(plan));
                    }
                }
                let sources = out.plan.as_ref().map_or(0, |p| p.num_sources());
                let counters = out.counters;

                h = if stage.downsample > 1 {
                    let delta = subtract(out.grid.tokens(), input.tokens());
                    let delta = input.with_tokens(delta)?.upsample_nearest(stage.downsample)?;
                    let mut next = h.into_tokens();
                    add_scaled(&mut next, delta.tokens(), 1.0);
                    x.with_tokens(next).map_err(|e| e.at_step(step))?
                } else {
                    out.grid
                };
                records.push(StageRecord {
                    tokens_before: counters.tokens_before,
                    tokens_after: counters.tokens_after,
                    merged_pairs: counters.merged_pairs,
                    sources,
                    recomputed,
                    wall_time_s: stage_clock.elapsed_s(),
                });
            }

            // final per-token normalization keeps the latent at unit scale
            let h = layer_norm(h.tokens(), &self.unit_gamma, &self.unit_beta);
            let drift = subtract(&h, x.tokens());
            let mut next = x.into_tokens();
            add_scaled(&mut next, &drift, cfg.step_size);
            x = TokenGrid::new(cfg.height, cfg.width, next).map_err(|e| match e {
                Error::Numeric { .. } => Error::Numeric {
                    context: "latent update".into(),
                    step: Some(step),
                },
                other => other,
            })?;
            steps.push(records);
        }

        Ok(RunOutput {
            final_grid: x,
            steps,
            pair_sets,
            total_time_s: clock.elapsed_s(),
        })
    }
}

fn subtract(a: &Tokens, b: &Tokens) -> Tokens {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x - y).collect();
    Tokens::from_vec(a.len(), a.channels(), data).expect("same shape")
}

fn add_scaled(dst: &mut Tokens, src: &Tokens, factor: f32) {
    dst.as_mut_slice()
        .iter_mut()
        .zip(src.as_slice())
        .for_each(|(d, s)| *d += factor * s);
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunOutput> {
    Pipeline::new(cfg.clone())?.run()
}

/// A run timed over several repetitions.
#[derive(Debug, Clone)]
pub struct TimedRun {
    pub timing: TimingSample,
    pub output: RunOutput,
}

/// Builds the pipeline once, then times `warmup + repetitions` runs of the
/// step loop.
pub fn timed_run(cfg: &PipelineConfig, label: &str, warmup: usize, repetitions: usize) -> Result<TimedRun> {
    let (timing, output) = time_fn(label, || Pipeline::new(cfg.clone()), |p| p.run(), warmup, repetitions)?;
    Ok(TimedRun { timing, output })
}

/// Times several configurations with their repetitions interleaved, one
/// run of each per round. Prefer this over repeated [`timed_run`] calls when
/// the timings will be compared with each other.
pub fn timed_runs(cfgs: &[(PipelineConfig, String)], warmup: usize, repetitions: usize) -> Result<Vec<TimedRun>> {
    let pipelines = cfgs
        .iter()
        .map(|(cfg, _)| Pipeline::new(cfg.clone()))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<String> = cfgs.iter().map(|(_, l)| l.clone()).collect();
    Ok(time_round_robin(&labels, pipelines, |p| p.run(), warmup, repetitions)?
        .into_iter()
        .map(|(timing, output)| TimedRun { timing, output })
        .collect())
}

#[inline]
pub fn speedup(reference_s: f64, candidate_s: f64) -> f64 {
    reference_s / candidate_s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub psnr_db: f64,
    pub mean_cosine: f64,
    pub speedup: f64,
    pub reference_merge_fraction: f64,
    pub candidate_merge_fraction: f64,
}

/// Compares a candidate run's final latent and single-run wall time with a
/// reference run.
pub fn compare_runs(reference: &RunOutput, candidate: &RunOutput) -> Result<Fidelity> {
    let (a, b) = (&reference.final_grid, &candidate.final_grid);
    if (a.height(), a.width(), a.channels()) != (b.height(), b.width(), b.channels())
        || reference.steps.len() != candidate.steps.len()
    {
        return Err(Error::Shape("runs differ in grid shape or step count".into()));
    }
    Ok(Fidelity {
        psnr_db: psnr(a.tokens(), b.tokens())?,
        mean_cosine: mean_row_cosine(a.tokens(), b.tokens())?,
        speedup: speedup(reference.total_time_s, candidate.total_time_s),
        reference_merge_fraction: reference.mean_merge_fraction(),
        candidate_merge_fraction: candidate.mean_merge_fraction(),
    })
}

/// Picks a threshold so that about `target_fraction` of the first
/// merge-enabled block's sources merge at step 0 (at least that fraction
/// when similarities are distinct).
pub fn calibrate_threshold(cfg: &PipelineConfig, target_fraction: f64) -> Result<f32> {
    if !(0.0..=1.0).contains(&target_fraction) {
        return Err(Error::Domain(format!(
            "target fraction {target_fraction} outside [0, 1]"
        )));
    }
    let pipeline = Pipeline::new(cfg.with_mode(PipelineMode::Baseline))?;
    let stage = cfg
        .stages
        .iter()
        .find(|s| s.merge_enabled)
        .ok_or_else(|| Error::Config("no merge-enabled block to calibrate".into()))?;
    let grid = pipeline.initial.avg_pool(stage.downsample)?;
    let part = partition_strides(grid.height(), grid.width(), &cfg.partition)?;
    let features = match cfg.features {
        SimilarityFeatures::Hidden => grid.tokens().clone(),
        SimilarityFeatures::Keys => {
            return Err(Error::Config(
                "threshold calibration supports hidden-state features only".into(),
            ))
        }
    };
    let sim = build_similarity_matrix(&features, &part)?;
    let mut best: Vec<f32> = best_destination_assignment(&sim)?
        .iter()
        .map(|a| a.similarity)
        .collect();
    best.sort_by(|a, b| b.total_cmp(a));
    let k = ((target_fraction * best.len() as f64).ceil() as usize).min(best.len());
    Ok(if k == best.len() {
        -1.0
    } else {
        best[k].clamp(-1.0, 1.0)
    })
}
