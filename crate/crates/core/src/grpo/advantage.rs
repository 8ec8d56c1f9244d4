//! Group-relative advantages from a table of raw rewards.
//!
//! Reward-wise mode standardises every reward column inside its group, then
//! aggregates with the category weights. Joint mode aggregates the raw
//! rewards first and standardises the sum. Either way the batch of
//! aggregated advantages is standardised once more across all groups.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{mean_std, Tensor};
use crate::reward::GroupRewards;

/// Spreads below this are treated as zero.
pub const DEGENERATE_STD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    #[default]
    RewardWise,
    Joint,
}

/// Advantages of one group. `per_reward` holds the per-column terms whose
/// weighted sum is `aggregated`; `final_adv` is filled by
/// [`aggregate_and_batch_normalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageTable {
    pub prompt: usize,
    pub names: Vec<String>,
    pub weights: Vec<f64>,
    pub per_reward: Tensor,
    pub degenerate: Vec<bool>,
    pub aggregated: Vec<f64>,
    pub final_adv: Vec<f64>,
}

impl AdvantageTable {
    pub fn group_size(&self) -> usize {
        self.per_reward.rows()
    }

    /// True when no column carries any signal.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate.iter().all(|&d| d)
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.per_reward.rows())
            .map(|i| self.per_reward.row(i)[k])
            .collect()
    }
}

/// `(x − mean)/std` with population statistics, or zeros and `true` when the
/// spread is degenerate.
pub fn standardize(values: &[f64]) -> (Vec<f64>, bool) {
    let (mean, std) = mean_std(values);
    if std < DEGENERATE_STD {
        return (vec![0.0; values.len()], true);
    }
    (values.iter().map(|v| (v - mean) / std).collect(), false)
}

fn check_group(raw: &GroupRewards) -> Result<()> {
    if raw.group_size() < 2 {
        return Err(Error::domain(
            "normalize_per_reward",
            format!("group of {} has no variance", raw.group_size()),
        ));
    }
    Ok(())
}

fn weighted_sum(per_reward: &Tensor, weights: &[f64]) -> Vec<f64> {
    (0..per_reward.rows())
        .map(|i| {
            per_reward
                .row(i)
                .iter()
                .zip(weights)
                .map(|(a, w)| a * w)
                .sum()
        })
        .collect()
}

fn set_column(t: &mut Tensor, k: usize, col: &[f64]) {
    for (i, v) in col.iter().enumerate() {
        t.row_mut(i)[k] = *v;
    }
}

/// Standardises each reward column within the group.
pub fn normalize_per_reward(raw: &GroupRewards) -> Result<AdvantageTable> {
    check_group(raw)?;
    let k = raw.names.len();
    let mut per_reward = Tensor::zeros(&[raw.group_size(), k]);
    let mut degenerate = Vec::with_capacity(k);
    for c in 0..k {
        let (col, deg) = standardize(&raw.column(c));
        set_column(&mut per_reward, c, &col);
        degenerate.push(deg);
    }
    Ok(AdvantageTable {
        prompt: raw.prompt,
        names: raw.names.clone(),
        weights: raw.weights.clone(),
        aggregated: weighted_sum(&per_reward, &raw.weights),
        per_reward,
        degenerate,
        final_adv: Vec::new(),
    })
}

/// Aggregates raw rewards first and standardises the weighted sum. Column
/// `k` of `per_reward` is `(R_k − mean R_k)/std(Σ w R)`.
pub fn normalize_joint(raw: &GroupRewards) -> Result<AdvantageTable> {
    check_group(raw)?;
    let k = raw.names.len();
    let g = raw.group_size();
    let agg = weighted_sum(&raw.values, &raw.weights);
    let (_, std) = mean_std(&agg);
    let deg = std < DEGENERATE_STD;
    let mut per_reward = Tensor::zeros(&[g, k]);
    if !deg {
        for c in 0..k {
            let col = raw.column(c);
            let (mean, _) = mean_std(&col);
            let centred: Vec<f64> = col.iter().map(|v| (v - mean) / std).collect();
            set_column(&mut per_reward, c, &centred);
        }
    }
    Ok(AdvantageTable {
        prompt: raw.prompt,
        names: raw.names.clone(),
        weights: raw.weights.clone(),
        aggregated: weighted_sum(&per_reward, &raw.weights),
        per_reward,
        degenerate: vec![deg; k],
        final_adv: Vec::new(),
    })
}

pub fn group_advantages(raw: &GroupRewards, mode: NormalizationMode) -> Result<AdvantageTable> {
    match mode {
        NormalizationMode::RewardWise => normalize_per_reward(raw),
        NormalizationMode::Joint => normalize_joint(raw),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchStats {
    /// Groups that entered the batch statistics.
    pub included_groups: usize,
    pub degenerate_groups: usize,
    /// Mean and std of the final advantages over included samples.
    pub final_mean: f64,
    pub final_std: f64,
    /// The aggregated advantages had no spread across the batch.
    pub degenerate_batch: bool,
}

/// Standardises aggregated advantages across every non-degenerate group of
/// the batch. Degenerate groups get zero final advantages.
pub fn aggregate_and_batch_normalize(tables: &mut [AdvantageTable]) -> Result<BatchStats> {
    let mut pooled = Vec::new();
    let mut stats = BatchStats::default();
    for t in tables.iter() {
        if t.weights.len() != t.per_reward.cols() {
            return Err(Error::Shape {
                op: "aggregate_and_batch_normalize",
                left: t.per_reward.shape().to_vec(),
                right: vec![t.weights.len()],
            });
        }
        if t.is_degenerate() {
            stats.degenerate_groups += 1;
        } else {
            stats.included_groups += 1;
            pooled.extend(weighted_sum(&t.per_reward, &t.weights));
        }
    }
    let (normalized, deg) = standardize(&pooled);
    stats.degenerate_batch = deg;
    let mut it = normalized.into_iter();
    for t in tables.iter_mut() {
        t.aggregated = weighted_sum(&t.per_reward, &t.weights);
        t.final_adv = if t.is_degenerate() {
            vec![0.0; t.group_size()]
        } else {
            it.by_ref().take(t.group_size()).collect()
        };
    }
    if !deg {
        let all: Vec<f64> = tables
            .iter()
            .filter(|t| !t.is_degenerate())
            .flat_map(|t| t.final_adv.iter().copied())
            .collect();
        (stats.final_mean, stats.final_std) = mean_std(&all);
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::SeededRng;
    use crate::reward::PromptCategory;
    use proptest::prelude::*;

    fn group(cols: &[Vec<f64>], weights: &[f64]) -> GroupRewards {
        let g = cols[0].len();
        let mut values = Tensor::zeros(&[g, cols.len()]);
        for (k, c) in cols.iter().enumerate() {
            set_column(&mut values, k, c);
        }
        let names = (0..cols.len()).map(|k| format!("r{k}")).collect();
        GroupRewards::new(
            values,
            names,
            weights.to_vec(),
            0,
            PromptCategory::GeneralT2I,
        )
        .unwrap()
    }

    #[test]
    fn hand_computed_column() {
        let t = normalize_per_reward(&group(&[vec![1.0, 2.0, 3.0]], &[1.0])).unwrap();
        let want = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in t.column(0).iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(!t.degenerate[0]);
    }

    #[test]
    fn constant_column_is_flagged() {
        let t = normalize_per_reward(&group(
            &[vec![0.4; 4], vec![1.0, 0.0, 0.0, 1.0]],
            &[0.5, 0.5],
        ))
        .unwrap();
        assert_eq!(t.degenerate, vec![true, false]);
        assert!(t.column(0).iter().all(|&v| v == 0.0));
        assert!(!t.is_degenerate());
        let t = normalize_per_reward(&group(&[vec![0.4; 4]], &[1.0])).unwrap();
        assert!(t.is_degenerate());
        assert!(normalize_per_reward(&group(&[vec![1.0]], &[1.0])).is_err());
    }

    #[test]
    fn weighted_aggregate() {
        let a = vec![0.0, 1.0, 0.5, 0.2];
        let b = vec![1.0, 0.3, 0.0, 0.9];
        let t = normalize_per_reward(&group(&[a, b], &[0.7, 0.3])).unwrap();
        for i in 0..4 {
            let want = 0.7 * t.per_reward.row(i)[0] + 0.3 * t.per_reward.row(i)[1];
            assert!((t.aggregated[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn single_group_batch_is_idempotent() {
        let mut tables =
            vec![normalize_per_reward(&group(&[vec![0.1, 0.9, 0.4, 0.3]], &[1.0])).unwrap()];
        let stats = aggregate_and_batch_normalize(&mut tables).unwrap();
        for (a, b) in tables[0].final_adv.iter().zip(tables[0].column(0)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(stats.included_groups, 1);
    }

    #[test]
    fn degenerate_groups_are_excluded() {
        let mut tables = vec![
            normalize_per_reward(&group(&[vec![0.3; 3]], &[1.0])).unwrap(),
            normalize_per_reward(&group(&[vec![0.1, 0.2, 0.6]], &[1.0])).unwrap(),
        ];
        let stats = aggregate_and_batch_normalize(&mut tables).unwrap();
        assert_eq!(stats.degenerate_groups, 1);
        assert_eq!(tables[0].final_adv, vec![0.0; 3]);
        assert!((stats.final_std - 1.0).abs() < 1e-12);
        let mut all_flat = vec![normalize_per_reward(&group(&[vec![0.3; 3]], &[1.0])).unwrap()];
        assert!(
            aggregate_and_batch_normalize(&mut all_flat)
                .unwrap()
                .degenerate_batch
        );
    }

    #[test]
    fn joint_mode_shrinks_low_variance_reward() {
        let mut rng = SeededRng::new(3);
        let hi: Vec<f64> = (0..64).map(|_| rng.uniform()).collect();
        let (m, _) = mean_std(&hi);
        let mut lo: Vec<f64> = hi.iter().map(|v| 0.5 + 0.1 * (v - m)).collect();
        lo.reverse();
        let raw = group(&[hi, lo], &[0.5, 0.5]);
        let rw = normalize_per_reward(&raw).unwrap();
        let jt = normalize_joint(&raw).unwrap();
        let ratio = |t: &AdvantageTable| mean_std(&t.column(1)).1 / mean_std(&t.column(0)).1;
        assert!((ratio(&rw) - 1.0).abs() < 1e-12);
        assert!((ratio(&jt) - 0.1).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn columns_standardized_and_affine_invariant(
            cols in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 8), 1..4),
            a in 0.1f64..10.0,
            b in -5.0f64..5.0,
        ) {
            let w = vec![1.0 / cols.len() as f64; cols.len()];
            let t = normalize_per_reward(&group(&cols, &w)).unwrap();
            for k in 0..cols.len() {
                if t.degenerate[k] { continue; }
                let (m, s) = mean_std(&t.column(k));
                prop_assert!(m.abs() <= 1e-9 && (s - 1.0).abs() <= 1e-9);
            }
            let moved: Vec<Vec<f64>> = cols.iter().map(|c| c.iter().map(|v| a * v + b).collect()).collect();
            let t2 = normalize_per_reward(&group(&moved, &w)).unwrap();
            for (x, y) in t.per_reward.data().iter().zip(t2.per_reward.data()) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }

        #[test]
        fn batch_final_is_standardized(groups in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 8), 1..6)) {
            let mut tables: Vec<AdvantageTable> = groups
                .iter()
                .map(|g| normalize_per_reward(&group(&[g.clone(), g.iter().map(|v| v * v).collect()], &[0.7, 0.3])).unwrap())
                .collect();
            let stats = aggregate_and_batch_normalize(&mut tables).unwrap();
            if !stats.degenerate_batch {
                prop_assert!(stats.final_mean.abs() <= 1e-9);
                prop_assert!((stats.final_std - 1.0).abs() <= 1e-9);
            }
        }
    }
}
