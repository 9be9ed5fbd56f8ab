//! Applying merge plans and undoing them.
//!
//! Merging replaces each destination with the size-weighted mean of itself
//! and the sources assigned to it. The reduced set is laid out in a fixed
//! canonical order: destinations (ascending index) followed by the sources
//! that were not merged (ascending index). Unmerging copies every reduced
//! token back to all positions it absorbed.

use crate::error::{Error, Result};
use crate::grid::Tokens;
use crate::matching::MergePlan;

/// Tokens annotated with how many original tokens each one stands for.
#[derive(Debug, Clone, PartialEq)]
pub struct SizedTokens {
    tokens: Tokens,
    sizes: Vec<u32>,
    // origin map in compressed form: origins of row i are
    // origin_indices[origin_offsets[i]..origin_offsets[i + 1]], ascending
    origin_offsets: Vec<usize>,
    origin_indices: Vec<usize>,
}

impl SizedTokens {
    /// Every token has size 1 and represents itself.
    pub fn unit(tokens: Tokens) -> Self {
        let n = tokens.len();
        Self {
            tokens,
            sizes: vec![1; n],
            origin_offsets: (0..=n).collect(),
            origin_indices: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &Tokens {
        &self.tokens
    }

    pub fn into_tokens(self) -> Tokens {
        self.tokens
    }

    pub fn sizes(&self) -> &[u32] {
        &self.sizes
    }

    /// Original token indices represented by row `i`, ascending.
    pub fn origin(&self, i: usize) -> &[usize] {
        &self.origin_indices[self.origin_offsets[i]..self.origin_offsets[i + 1]]
    }

    /// Number of original tokens covered (the sum of sizes).
    pub fn original_count(&self) -> usize {
        self.origin_indices.len()
    }
}

pub fn apply_merge(input: &SizedTokens, plan: &MergePlan) -> Result<SizedTokens> {
    plan.check_len(input.len())?;
    let n = input.len();
    let channels = input.tokens.channels();
    let n_dst = plan.dst_indices.len();

    let mut dst_pos = vec![usize::MAX; n];
    for (k, &d) in plan.dst_indices.iter().enumerate() {
        dst_pos[d] = k;
    }
    // sources per destination, CSR; pairs are sorted by source so each
    // bucket comes out ascending
    let mut offsets = vec![0usize; n_dst + 1];
    for &(_, d) in &plan.pairs {
        let k = dst_pos.get(d).copied().unwrap_or(usize::MAX);
        if k == usize::MAX {
            return Err(Error::InvariantViolation(format!("pair targets non-destination {d}")));
        }
        offsets[k + 1] += 1;
    }
    for k in 0..n_dst {
        offsets[k + 1] += offsets[k];
    }
    let mut incoming = vec![0usize; plan.pairs.len()];
    let mut fill = offsets.clone();
    for &(s, d) in &plan.pairs {
        let k = dst_pos[d];
        incoming[fill[k]] = s;
        fill[k] += 1;
    }

    let out_len = n_dst + plan.unmerged_src_indices.len();
    let mut tokens = Tokens::zeros(out_len, channels);
    let mut sizes = Vec::with_capacity(out_len);
    let mut origin_offsets = Vec::with_capacity(out_len + 1);
    let mut origin_indices = Vec::with_capacity(input.original_count());
    origin_offsets.push(0);

    let mut acc = vec![0.0f32; channels];
    for (k, &d) in plan.dst_indices.iter().enumerate() {
        let sources = &incoming[offsets[k]..offsets[k + 1]];
        let row = tokens.row_mut(k);
        if sources.is_empty() {
            row.copy_from_slice(input.tokens.row(d));
            sizes.push(input.sizes[d]);
            origin_indices.extend_from_slice(input.origin(d));
        } else {
            let mut total = input.sizes[d];
            let w = total as f32;
            acc.iter_mut().zip(input.tokens.row(d)).for_each(|(a, &x)| *a = w * x);
            let start = origin_indices.len();
            origin_indices.extend_from_slice(input.origin(d));
            for &s in sources {
                let w = input.sizes[s] as f32;
                acc.iter_mut().zip(input.tokens.row(s)).for_each(|(a, &x)| *a += w * x);
                total += input.sizes[s];
                origin_indices.extend_from_slice(input.origin(s));
            }
            let inv = total as f32;
            row.iter_mut().zip(&acc).for_each(|(r, &a)| *r = a / inv);
            sizes.push(total);
            origin_indices[start..].sort_unstable();
        }
        origin_offsets.push(origin_indices.len());
    }
    for (j, &s) in plan.unmerged_src_indices.iter().enumerate() {
        tokens.row_mut(n_dst + j).copy_from_slice(input.tokens.row(s));
        sizes.push(input.sizes[s]);
        origin_indices.extend_from_slice(input.origin(s));
        origin_offsets.push(origin_indices.len());
    }

    Ok(SizedTokens {
        tokens,
        sizes,
        origin_offsets,
        origin_indices,
    })
}

/// Restores `plan.num_tokens` rows in original order from a reduced set laid
/// out in the canonical merge order.
pub fn apply_unmerge(merged: &Tokens, plan: &MergePlan) -> Result<Tokens> {
    if merged.len() != plan.reduced_len() {
        return Err(Error::PlanMismatch {
            expected: plan.reduced_len(),
            actual: merged.len(),
        });
    }
    let n_dst = plan.dst_indices.len();
    let mut out = Tokens::zeros(plan.num_tokens, merged.channels());
    for (k, &d) in plan.dst_indices.iter().enumerate() {
        out.row_mut(d).copy_from_slice(merged.row(k));
    }
    for &(s, d) in &plan.pairs {
        let k = plan
            .dst_indices
            .binary_search(&d)
            .map_err(|_| Error::InvariantViolation(format!("pair targets non-destination {d}")))?;
        out.row_mut(s).copy_from_slice(merged.row(k));
    }
    for (j, &s) in plan.unmerged_src_indices.iter().enumerate() {
        out.row_mut(s).copy_from_slice(merged.row(n_dst + j));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_synthetic_grid, RedundancyProfile};
    use crate::matching::{partition_strides, plan_merge, MatchConfig, Partition, PartitionConfig};
    use proptest::prelude::*;

    /// Tokens 0 (dst) and 1 (src) with scalar values.
    fn pair_partition() -> Partition {
        Partition {
            num_tokens: 2,
            dst_indices: vec![0],
            src_indices: vec![1],
        }
    }

    #[test]
    fn merge_two_units_takes_mean() {
        let part = pair_partition();
        let plan = MergePlan::from_pairs(&part, vec![(1, 0, 1.0)]).unwrap();
        let x = SizedTokens::unit(Tokens::from_rows(&[vec![2.0], vec![4.0]]).unwrap());
        let m = apply_merge(&x, &plan).unwrap();
        assert_eq!(m.tokens().as_slice(), &[3.0]);
        assert_eq!(m.sizes(), &[2]);
        assert_eq!(m.origin(0), &[0, 1]);
    }

    #[test]
    fn merge_is_size_weighted() {
        // first collapse three copies of 2 into token 0, then fold in a 6
        let part = Partition {
            num_tokens: 4,
            dst_indices: vec![0],
            src_indices: vec![1, 2, 3],
        };
        let x = SizedTokens::unit(Tokens::from_rows(&[vec![2.0], vec![2.0], vec![2.0], vec![6.0]]).unwrap());
        let first = MergePlan::from_pairs(&part, vec![(1, 0, 1.0), (2, 0, 1.0)]).unwrap();
        let m = apply_merge(&x, &first).unwrap();
        assert_eq!((m.tokens().as_slice(), m.sizes()), (&[2.0, 6.0][..], &[3, 1][..]));

        let part2 = pair_partition();
        let second = MergePlan::from_pairs(&part2, vec![(1, 0, 1.0)]).unwrap();
        let m2 = apply_merge(&m, &second).unwrap();
        assert_eq!(m2.tokens().as_slice(), &[3.0]);
        assert_eq!(m2.sizes(), &[4]);
        assert_eq!(m2.origin(0), &[0, 1, 2, 3]);
    }

    fn grid_tokens(seed: u64, h: usize, w: usize, c: usize) -> Tokens {
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
        .into_tokens()
    }

    #[test]
    fn empty_plan_is_identity() {
        let part = partition_strides(4, 4, &PartitionConfig::default()).unwrap();
        let plan = MergePlan::empty(&part);
        let x = grid_tokens(3, 4, 4, 5);
        let m = apply_merge(&SizedTokens::unit(x.clone()), &plan).unwrap();
        assert!(m.sizes().iter().all(|&s| s == 1));
        for (k, &d) in part.dst_indices.iter().chain(&part.src_indices).enumerate() {
            assert_eq!(m.tokens().row(k), x.row(d));
        }
        let back = apply_unmerge(m.tokens(), &plan).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn duplicates_round_trip_exactly() {
        let x = Tokens::from_rows(&[vec![0.3, -1.7], vec![0.3, -1.7], vec![5.0, 1.0], vec![-2.0, 0.5]]).unwrap();
        let part = partition_strides(2, 2, &PartitionConfig::default()).unwrap();
        let plan = MergePlan::from_pairs(&part, vec![(1, 0, 1.0)]).unwrap();
        let m = apply_merge(&SizedTokens::unit(x.clone()), &plan).unwrap();
        assert_eq!(apply_unmerge(m.tokens(), &plan).unwrap(), x);
    }

    #[test]
    fn unmerge_matches_origin_lookup() {
        let x = grid_tokens(8, 16, 16, 8);
        let part = partition_strides(16, 16, &PartitionConfig::default()).unwrap();
        let plan = plan_merge(&x, &part, &MatchConfig::FixedRate { rate: 0.6 }).unwrap();
        let m = apply_merge(&SizedTokens::unit(x), &plan).unwrap();
        let back = apply_unmerge(m.tokens(), &plan).unwrap();
        assert_eq!(back.len(), 256);
        for i in 0..256 {
            let owner = (0..m.len()).find(|&k| m.origin(k).contains(&i)).unwrap();
            assert_eq!(back.row(i), m.tokens().row(owner), "token {i}");
        }
    }

    #[test]
    fn mismatched_plan_is_rejected() {
        let part = partition_strides(4, 4, &PartitionConfig::default()).unwrap();
        let plan = MergePlan::empty(&part);
        let x = SizedTokens::unit(Tokens::zeros(64, 2));
        assert_eq!(
            apply_merge(&x, &plan).unwrap_err(),
            Error::PlanMismatch {
                expected: 16,
                actual: 64
            }
        );
        assert!(matches!(
            apply_unmerge(&Tokens::zeros(3, 2), &plan),
            Err(Error::PlanMismatch { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn merge_conserves_mass_and_passes_untouched_tokens(seed in 0u64..10_000, t in -0.5f32..1.0) {
            let x = grid_tokens(seed, 8, 8, 4);
            let part = partition_strides(8, 8, &PartitionConfig::default()).unwrap();
            let plan = plan_merge(&x, &part, &MatchConfig::Threshold { threshold: t }).unwrap();
            let m = apply_merge(&SizedTokens::unit(x.clone()), &plan).unwrap();

            prop_assert_eq!(m.sizes().iter().map(|&s| s as usize).sum::<usize>(), 64);
            for k in 0..m.len() {
                prop_assert_eq!(m.sizes()[k] as usize, m.origin(k).len());
            }
            for c in 0..4 {
                let before: f64 = x.rows().map(|r| r[c] as f64).sum();
                let after: f64 = (0..m.len()).map(|k| m.sizes()[k] as f64 * m.tokens().row(k)[c] as f64).sum();
                let scale: f64 = x.rows().map(|r| (r[c] as f64).abs()).sum::<f64>().max(1e-6);
                prop_assert!((before - after).abs() / scale < 1e-4);
            }

            let back = apply_unmerge(m.tokens(), &plan).unwrap();
            prop_assert_eq!(back.len(), 64);
            let mut touched = [false; 64];
            for &(s, d) in &plan.pairs {
                touched[s] = true;
                touched[d] = true;
            }
            for i in (0..64).filter(|&i| !touched[i]) {
                let same = back.row(i).iter().zip(x.row(i)).all(|(a, b)| a.to_bits() == b.to_bits());
                prop_assert!(same);
            }
        }
    }
}
