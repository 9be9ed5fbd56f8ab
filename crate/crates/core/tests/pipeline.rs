use catome_core::pipeline::{calibrate_threshold, run_pipeline, PipelineConfig, PipelineMode};
use catome_core::{named_schedule, Error, NAMED_SCHEDULES};

fn small(steps: usize) -> PipelineConfig {
    PipelineConfig {
        height: 16,
        width: 16,
        channels: 8,
        steps,
        ..Default::default()
    }
}

#[test]
fn every_named_schedule_recomputes_once_per_checkpoint() {
    let base = small(50);
    for name in NAMED_SCHEDULES {
        let schedule = named_schedule(name, 50).unwrap();
        let expected = schedule.len();
        let run = run_pipeline(&base.with_mode(PipelineMode::CaTome {
            threshold: 0.8,
            schedule,
        }))
        .unwrap();
        for block in [0, 3] {
            assert_eq!(run.similarity_builds(block), expected, "{name} block {block}");
        }
        assert_eq!(run.similarity_builds(1), 0);
    }
    let tome = run_pipeline(&base.with_mode(PipelineMode::FixedRate { rate: 0.5 })).unwrap();
    assert_eq!(tome.similarity_builds(0), 50);
}

#[test]
fn threshold_counts_adapt_while_rate_counts_do_not() {
    let base = small(30);
    let threshold = calibrate_threshold(&base, 0.5).unwrap();
    let tome = run_pipeline(&base.with_mode(PipelineMode::FixedRate { rate: 0.5 })).unwrap();
    let adaptive = run_pipeline(&base.with_mode(PipelineMode::Adaptive { threshold })).unwrap();

    let fixed = tome.merge_counts(0);
    assert!(fixed.iter().all(|&c| c == fixed[0]));
    let counts = adaptive.merge_counts(0);
    // equal at step 0 up to similarity ties
    assert!(counts[0] >= fixed[0]);
    assert!(counts.iter().any(|&c| c != counts[0]), "{counts:?}");
}

#[test]
fn counters_cover_every_step_and_block() {
    let run = run_pipeline(&small(7).with_mode(PipelineMode::FixedRate { rate: 0.25 })).unwrap();
    assert_eq!(run.steps.len(), 7);
    for step in &run.steps {
        assert_eq!(step.len(), 4);
        assert_eq!(step[0].tokens_before, 256);
        assert_eq!(step[0].sources, 192);
        assert_eq!(step[0].merged_pairs, 48);
        assert_eq!(step[0].tokens_after, 256 - 48);
        // pooled interior blocks never merge
        assert_eq!(step[1].tokens_before, 64);
        assert_eq!(step[1].merged_pairs, 0);
    }
    assert_eq!(run.pair_sets.len(), 2);
    assert!(run.pair_sets.iter().all(|(_, sets)| sets.len() == 7));
    assert!(run.final_grid.tokens().is_finite());
}

#[test]
fn identical_configs_give_identical_runs() {
    let cfg = small(12).with_mode(PipelineMode::CaTome {
        threshold: 0.85,
        schedule: named_schedule("CONFIG_2", 12).unwrap(),
    });
    let a = run_pipeline(&cfg).unwrap();
    let b = run_pipeline(&cfg).unwrap();
    assert_eq!(a.final_grid, b.final_grid);
    for (x, y) in a.steps.iter().flatten().zip(b.steps.iter().flatten()) {
        assert_eq!(
            (x.merged_pairs, x.sources, x.recomputed),
            (y.merged_pairs, y.sources, y.recomputed)
        );
    }
    assert_eq!(a.pair_sets, b.pair_sets);

    let mut other = cfg.clone();
    other.seed = 1;
    assert_ne!(run_pipeline(&other).unwrap().final_grid, a.final_grid);
}

#[test]
fn invalid_configs_fail_before_running() {
    let mut cfg = small(5);
    cfg.amplitude = 0.0;
    assert!(matches!(run_pipeline(&cfg), Err(Error::Config(_))));
    let mut cfg = small(5);
    cfg.step_size = f32::NAN;
    assert!(matches!(run_pipeline(&cfg), Err(Error::Config(_))));
    let mut cfg = small(5);
    cfg.heads = 3;
    assert!(matches!(run_pipeline(&cfg), Err(Error::Config(_))));
}
