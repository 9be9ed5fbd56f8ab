use catome_core::matching::{partition_strides, plan_merge, DestinationRule, MatchConfig, PartitionConfig};
use catome_core::oracle::oracle_plan;
use catome_core::{apply_merge, apply_unmerge, make_synthetic_grid, RedundancyProfile, SizedTokens};

fn grid(h: usize, w: usize, c: usize, radius: usize, seed: u64) -> catome_core::TokenGrid {
    make_synthetic_grid(
        h,
        w,
        c,
        &RedundancyProfile {
            seed,
            smoothing_radius: radius,
            amplitude: 1.0,
        },
    )
    .unwrap()
}

#[test]
fn merge_then_unmerge_copies_representatives_back() {
    let g = grid(16, 16, 8, 2, 4);
    let part = partition_strides(16, 16, &PartitionConfig::default()).unwrap();
    for cfg in [
        MatchConfig::FixedRate { rate: 0.75 },
        MatchConfig::Threshold { threshold: 0.9 },
    ] {
        let plan = plan_merge(g.tokens(), &part, &cfg).unwrap();
        let merged = apply_merge(&SizedTokens::unit(g.tokens().clone()), &plan).unwrap();
        assert_eq!(merged.len(), plan.reduced_len());
        assert_eq!(merged.sizes().iter().map(|&s| s as usize).sum::<usize>(), 256);

        let restored = apply_unmerge(merged.tokens(), &plan).unwrap();
        for i in 0..merged.len() {
            for &orig in merged.origin(i) {
                assert_eq!(restored.row(orig), merged.tokens().row(i));
            }
        }
    }
}

#[test]
fn fast_plans_equal_oracle_on_synthetic_grids() {
    for seed in 0..4 {
        let g = grid(8, 12, 4, 1, seed);
        for dst_rule in [DestinationRule::TopLeft, DestinationRule::RandomInStride { seed }] {
            let part = partition_strides(
                8,
                12,
                &PartitionConfig {
                    stride_x: 2,
                    stride_y: 2,
                    dst_rule,
                },
            )
            .unwrap();
            for cfg in [
                MatchConfig::FixedRate { rate: 0.5 },
                MatchConfig::Threshold { threshold: 0.5 },
            ] {
                let fast = plan_merge(g.tokens(), &part, &cfg).unwrap();
                let slow = oracle_plan(g.tokens(), &part, &cfg).unwrap();
                assert_eq!(fast, slow);
            }
        }
    }
}
