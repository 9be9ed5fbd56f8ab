//! Checkpoint schedules and per-block reuse of merge plans.
//!
//! At a checkpoint step a block recomputes its plan; at any other step it
//! reuses the plan from its most recent checkpoint. Only the pair list is
//! cached, never similarity values.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::MergePlan;

/// The named checkpoint lists, verbatim. `CONF_ADAPTIVE` ends in the
/// inclusive range 46-51.
const NAMED: [(&str, &[usize]); 6] = [
    ("CONFIG_1", &[0, 1, 2, 3, 5, 10, 15, 25, 35]),
    ("CONFIG_2", &[0, 10, 11, 12, 15, 20, 25, 30, 35, 45]),
    ("CONFIG_3", &[0, 8, 11, 13, 20, 25, 30, 35, 45, 46, 47, 48, 49]),
    ("CONFIG_4", &[0, 9, 13, 14, 15, 28, 29, 32, 36, 45]),
    (
        "CONF_ADAPTIVE",
        &[0, 1, 5, 7, 10, 12, 15, 35, 40, 45, 46, 47, 48, 49, 50, 51],
    ),
    ("CONFIG_Five", &[0, 5, 10, 15, 20, 25, 30, 35, 40, 45, 50]),
];

/// Canonical names of the six published checkpoint configurations.
pub const NAMED_SCHEDULES: [&str; 6] = [
    "CONFIG_1",
    "CONFIG_2",
    "CONFIG_3",
    "CONFIG_4",
    "CONF_ADAPTIVE",
    "CONFIG_Five",
];

pub const EVERY_STEP: &str = "EVERY_STEP";
pub const ONLY_FIRST: &str = "ONLY_FIRST";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointSchedule {
    pub name: String,
    /// Strictly increasing, starts at 0, every entry `< total_steps`.
    pub steps: Vec<usize>,
    pub total_steps: usize,
}

/// Maps spellings like `conf_3`, `CONFIG_FIVE` or `config_adaptive` onto the
/// canonical name.
pub fn canonical_name(name: &str) -> Option<&'static str> {
    let upper = name.trim().to_ascii_uppercase().replace('-', "_");
    let key = upper
        .strip_prefix("CONFIG_")
        .or_else(|| upper.strip_prefix("CONF_"))
        .unwrap_or(&upper);
    Some(match key {
        "1" | "ONE" => "CONFIG_1",
        "2" | "TWO" => "CONFIG_2",
        "3" | "THREE" => "CONFIG_3",
        "4" | "FOUR" => "CONFIG_4",
        "ADAPTIVE" => "CONF_ADAPTIVE",
        "5" | "FIVE" => "CONFIG_Five",
        "EVERY_STEP" => EVERY_STEP,
        "ONLY_FIRST" => ONLY_FIRST,
        _ => return None,
    })
}

impl CheckpointSchedule {
    /// Builds a schedule from an explicit list. Entries at or beyond
    /// `total_steps` are dropped with a warning; the list must otherwise be
    /// strictly increasing and start at 0.
    pub fn from_steps(name: impl Into<String>, steps: &[usize], total_steps: usize) -> Result<Self> {
        let name = name.into();
        if total_steps == 0 {
            return Err(Error::Config("a schedule needs at least one step".into()));
        }
        if steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("schedule {name} is not strictly increasing")));
        }
        if steps.first() != Some(&0) {
            return Err(Error::Config(format!("schedule {name} must start at step 0")));
        }
        let (kept, dropped): (Vec<usize>, Vec<usize>) = steps.iter().partition(|&&s| s < total_steps);
        if !dropped.is_empty() {
            log::warn!("schedule {name}: dropping checkpoints {dropped:?} outside 0..{total_steps}");
        }
        Ok(Self {
            name,
            steps: kept,
            total_steps,
        })
    }

    /// Looks up one of the six named configurations, `EVERY_STEP` or
    /// `ONLY_FIRST`. Names are matched case-insensitively and `CONF_` /
    /// `CONFIG_` prefixes are interchangeable.
    pub fn named(name: &str, total_steps: usize) -> Result<Self> {
        let canonical =
            canonical_name(name).ok_or_else(|| Error::Config(format!("unknown checkpoint schedule '{name}'")))?;
        match canonical {
            EVERY_STEP => Self::from_steps(canonical, &(0..total_steps).collect::<Vec<_>>(), total_steps),
            ONLY_FIRST => Self::from_steps(canonical, &[0], total_steps),
            _ => {
                let (_, steps) = NAMED.iter().find(|(n, _)| *n == canonical).expect("table covers names");
                Self::from_steps(canonical, steps, total_steps)
            }
        }
    }

    pub fn is_checkpoint(&self, step: usize) -> bool {
        self.steps.binary_search(&step).is_ok()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

pub fn named_schedule(name: &str, total_steps: usize) -> Result<CheckpointSchedule> {
    CheckpointSchedule::named(name, total_steps)
}

pub type BlockId = usize;

#[derive(Debug, Clone)]
struct CachedPlan {
    plan: MergePlan,
    computed_at: usize,
}

/// Most recent plan per block. One cache belongs to one pipeline run.
#[derive(Debug, Default, Clone)]
pub struct PairCache {
    entries: HashMap<BlockId, CachedPlan>,
}

impl PairCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Step at which `block`'s current plan was computed.
    pub fn computed_at(&self, block: BlockId) -> Option<usize> {
        self.entries.get(&block).map(|e| e.computed_at)
    }

    /// Returns the plan `block` should use at `step`, recomputing it when
    /// `step` is a checkpoint. The boolean is true when `recompute` ran.
    pub fn plan_for_step(
        &mut self,
        block: BlockId,
        step: usize,
        num_tokens: usize,
        schedule: &CheckpointSchedule,
        recompute: impl FnOnce() -> Result<MergePlan>,
    ) -> Result<(&MergePlan, bool)> {
        if step >= schedule.total_steps {
            return Err(Error::Bounds(format!(
                "step {step} outside schedule of {} steps",
                schedule.total_steps
            )));
        }
        if schedule.is_checkpoint(step) {
            let plan = recompute()?;
            plan.check_len(num_tokens)?;
            self.entries.insert(
                block,
                CachedPlan {
                    plan,
                    computed_at: step,
                },
            );
            return Ok((&self.entries[&block].plan, true));
        }
        let entry = self.entries.get(&block).ok_or_else(|| {
            Error::InvariantViolation(format!(
                "no cached plan for block {block} at non-checkpoint step {step}"
            ))
        })?;
        entry.plan.check_len(num_tokens)?;
        Ok((&entry.plan, false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::{partition_strides, PartitionConfig};

    #[test]
    fn named_lists_load_verbatim() {
        assert_eq!(
            named_schedule("CONFIG_3", 50).unwrap().steps,
            vec![0, 8, 11, 13, 20, 25, 30, 35, 45, 46, 47, 48, 49]
        );
        assert_eq!(
            named_schedule("CONFIG_1", 50).unwrap().steps,
            vec![0, 1, 2, 3, 5, 10, 15, 25, 35]
        );
        assert_eq!(
            named_schedule("CONFIG_2", 50).unwrap().steps,
            vec![0, 10, 11, 12, 15, 20, 25, 30, 35, 45]
        );
        assert_eq!(
            named_schedule("CONFIG_4", 50).unwrap().steps,
            vec![0, 9, 13, 14, 15, 28, 29, 32, 36, 45]
        );
        assert_eq!(
            named_schedule("CONF_ADAPTIVE", 50).unwrap().steps,
            vec![0, 1, 5, 7, 10, 12, 15, 35, 40, 45, 46, 47, 48, 49]
        );
        assert_eq!(
            named_schedule("CONFIG_Five", 50).unwrap().steps,
            vec![0, 5, 10, 15, 20, 25, 30, 35, 40, 45]
        );
        assert_eq!(named_schedule("EVERY_STEP", 3).unwrap().steps, vec![0, 1, 2]);
        assert_eq!(named_schedule("ONLY_FIRST", 7).unwrap().steps, vec![0]);
    }

    #[test]
    fn names_are_normalized() {
        assert_eq!(named_schedule("conf_3", 50).unwrap().name, "CONFIG_3");
        assert_eq!(named_schedule("CONF_FIVE", 50).unwrap().name, "CONFIG_Five");
        assert_eq!(named_schedule("config_adaptive", 50).unwrap().name, "CONF_ADAPTIVE");
        assert!(matches!(named_schedule("CONFIG_9", 50), Err(Error::Config(_))));
    }

    #[test]
    fn explicit_lists_are_validated() {
        assert!(CheckpointSchedule::from_steps("x", &[1, 2], 5).is_err());
        assert!(CheckpointSchedule::from_steps("x", &[0, 2, 2], 5).is_err());
        assert_eq!(
            CheckpointSchedule::from_steps("x", &[0, 3, 9], 5).unwrap().steps,
            vec![0, 3]
        );
    }

    fn plan(n_side: usize) -> MergePlan {
        MergePlan::empty(&partition_strides(n_side, n_side, &PartitionConfig::default()).unwrap())
    }

    #[test]
    fn reuses_between_checkpoints() {
        let schedule = CheckpointSchedule::from_steps("first", &[0], 5).unwrap();
        let mut cache = PairCache::new();
        assert!(cache.is_empty());
        let flags: Vec<bool> = (0..5)
            .map(|step| cache.plan_for_step(0, step, 16, &schedule, || Ok(plan(4))).unwrap().1)
            .collect();
        assert_eq!(flags, vec![true, false, false, false, false]);
        assert_eq!(cache.computed_at(0), Some(0));
    }

    #[test]
    fn every_step_always_recomputes() {
        let schedule = named_schedule("EVERY_STEP", 6).unwrap();
        let mut cache = PairCache::new();
        for step in 0..6 {
            assert!(cache.plan_for_step(3, step, 16, &schedule, || Ok(plan(4))).unwrap().1);
        }
    }

    #[test]
    fn config_3_recomputes_thirteen_times() {
        let schedule = named_schedule("CONFIG_3", 50).unwrap();
        let mut cache = PairCache::new();
        let mut count = 0;
        for step in 0..50 {
            cache
                .plan_for_step(1, step, 16, &schedule, || {
                    count += 1;
                    Ok(plan(4))
                })
                .unwrap();
        }
        assert_eq!(count, 13);
    }

    #[test]
    fn blocks_are_cached_independently() {
        let schedule = CheckpointSchedule::from_steps("s", &[0, 2], 4).unwrap();
        let mut cache = PairCache::new();
        cache.plan_for_step(0, 0, 16, &schedule, || Ok(plan(4))).unwrap();
        let err = cache.plan_for_step(1, 1, 16, &schedule, || Ok(plan(4))).unwrap_err();
        assert!(matches!(err, Error::InvariantViolation(_)));
    }

    #[test]
    fn stale_plans_are_errors() {
        let schedule = CheckpointSchedule::from_steps("s", &[0], 3).unwrap();
        let mut cache = PairCache::new();
        cache.plan_for_step(0, 0, 16, &schedule, || Ok(plan(4))).unwrap();
        let err = cache.plan_for_step(0, 1, 64, &schedule, || Ok(plan(8))).unwrap_err();
        assert_eq!(
            err,
            Error::PlanMismatch {
                expected: 16,
                actual: 64
            }
        );
        let err = cache.plan_for_step(0, 0, 64, &schedule, || Ok(plan(4))).unwrap_err();
        assert!(matches!(err, Error::PlanMismatch { .. }));
    }
}
