//! Token merging for transformer blocks over 2D token grids: bipartite
//! matching, size-weighted merge and unmerge, proportional attention,
//! per-block plan caching across steps, and the analysis and timing tools
//! used to evaluate them on a multi-step surrogate pipeline.

pub mod analysis;
pub mod attention;
pub mod bench;
pub mod cache;
pub mod error;
pub mod grid;
mod kernels;
pub mod matching;
pub mod merging;
pub mod oracle;
pub mod pipeline;

pub use analysis::{jaccard_distance, psnr, JaccardTrace, PairSet, TraceSummary};
pub use attention::{block_forward, BlockConfig, BlockCounters, BlockOutput, BlockWeights, SimilarityFeatures};
pub use bench::{time_fn, time_round_robin, EnvFingerprint, TimingSample};
pub use cache::{named_schedule, CheckpointSchedule, PairCache, NAMED_SCHEDULES};
pub use error::{Error, Result};
pub use grid::{make_synthetic_grid, RedundancyProfile, TokenGrid, Tokens};
pub use matching::{partition_strides, plan_merge, MatchConfig, MergePlan, Partition, PartitionConfig};
pub use merging::{apply_merge, apply_unmerge, SizedTokens};
pub use pipeline::{run_pipeline, Pipeline, PipelineConfig, PipelineMode, RunOutput, StageConfig};
