//! Pointwise and pairwise rewards with per-category weights.
//!
//! Every reward lands in `[0, 1]`. The preference reward is a within-group
//! win rate under a deterministic comparator; similarity and OCR are proxies
//! computed against a per-prompt target.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::Trajectory;
use crate::numeric::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptCategory {
    TextRendering,
    #[serde(rename = "general_t2i")]
    GeneralT2I,
}

impl PromptCategory {
    pub const ALL: [PromptCategory; 2] =
        [PromptCategory::TextRendering, PromptCategory::GeneralT2I];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Pointwise,
    Pairwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSource {
    Preference,
    Similarity,
    Ocr,
}

impl RewardSource {
    pub fn kind(self) -> RewardKind {
        match self {
            RewardSource::Preference => RewardKind::Pairwise,
            _ => RewardKind::Pointwise,
        }
    }
}

/// A named reward. `gain` shrinks the score toward 0.5 as
/// `0.5 + gain·(raw − 0.5)`, which keeps it inside `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub name: String,
    pub source: RewardSource,
    pub gain: f64,
    pub weights: BTreeMap<PromptCategory, f64>,
}

impl RewardSpec {
    pub fn new(name: &str, source: RewardSource, weights: &[(PromptCategory, f64)]) -> Self {
        Self {
            name: name.to_string(),
            source,
            gain: 1.0,
            weights: weights.iter().copied().collect(),
        }
    }

    pub fn kind(&self) -> RewardKind {
        self.source.kind()
    }

    pub fn weight(&self, category: PromptCategory) -> f64 {
        self.weights.get(&category).copied().unwrap_or(0.0)
    }
}

/// Which reward set a run optimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardProfile {
    #[default]
    Standard,
    /// One full-scale reward paired with one whose spread is 10× smaller.
    VarianceMismatch,
}

impl RewardProfile {
    pub fn specs(self) -> Vec<RewardSpec> {
        use PromptCategory::*;
        match self {
            RewardProfile::Standard => vec![
                RewardSpec::new(
                    "preference",
                    RewardSource::Preference,
                    &[(TextRendering, 0.2), (GeneralT2I, 0.7)],
                ),
                RewardSpec::new(
                    "similarity",
                    RewardSource::Similarity,
                    &[(TextRendering, 0.1), (GeneralT2I, 0.3)],
                ),
                RewardSpec::new("ocr", RewardSource::Ocr, &[(TextRendering, 0.7)]),
            ],
            RewardProfile::VarianceMismatch => {
                let mut ocr =
                    RewardSpec::new("ocr_damped", RewardSource::Ocr, &[(TextRendering, 0.5)]);
                ocr.gain = 0.1;
                let mut pref = RewardSpec::new(
                    "preference_damped",
                    RewardSource::Preference,
                    &[(GeneralT2I, 0.5)],
                );
                pref.gain = 0.1;
                vec![
                    RewardSpec::new(
                        "similarity",
                        RewardSource::Similarity,
                        &[(TextRendering, 0.5), (GeneralT2I, 0.5)],
                    ),
                    ocr,
                    pref,
                ]
            }
        }
    }
}

/// Active `(name, weight)` pairs of the standard reward set for a category.
pub fn category_weights(category: PromptCategory) -> Vec<(String, f64)> {
    RewardProfile::Standard
        .specs()
        .into_iter()
        .filter_map(|s| {
            let w = s.weight(category);
            (w > 0.0).then_some((s.name, w))
        })
        .collect()
}

/// Weights must be nonnegative and sum to one within each category that has
/// any active reward.
pub fn validate_specs(specs: &[RewardSpec]) -> Result<()> {
    for s in specs {
        if !(s.gain > 0.0 && s.gain <= 1.0) {
            return Err(Error::Config(format!(
                "reward {} gain {} outside (0, 1]",
                s.name, s.gain
            )));
        }
        if s.weights.values().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(format!(
                "reward {} has a negative weight",
                s.name
            )));
        }
    }
    for cat in PromptCategory::ALL {
        let total: f64 = specs.iter().map(|s| s.weight(cat)).sum();
        if total != 0.0 && (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "weights for {cat:?} sum to {total}, not 1"
            )));
        }
    }
    Ok(())
}

/// `exp(−‖sample − centroid‖²/τ)`.
pub fn similarity_proxy(sample: &Tensor, centroid: &Tensor, tau: f64) -> Result<f64> {
    if sample.len() != centroid.len() {
        return Err(Error::Shape {
            op: "similarity_proxy",
            left: sample.shape().to_vec(),
            right: centroid.shape().to_vec(),
        });
    }
    if !(tau > 0.0) {
        return Err(Error::domain(
            "similarity_proxy",
            format!("tau={tau} must be positive"),
        ));
    }
    let d2: f64 = sample
        .data()
        .iter()
        .zip(centroid.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((-d2 / tau).exp())
}

pub const GRID_CELLS: usize = 64;
pub const CODE_BITS: usize = 4;

/// Fraction of the first four top-row cells whose sign matches the code
/// (positive for 1, negative for 0).
pub fn ocr_proxy(sample: &Tensor, code: &[u8]) -> Result<f64> {
    if sample.len() != GRID_CELLS {
        return Err(Error::Shape {
            op: "ocr_proxy",
            left: sample.shape().to_vec(),
            right: vec![GRID_CELLS],
        });
    }
    if code.len() != CODE_BITS || code.iter().any(|&b| b > 1) {
        return Err(Error::domain(
            "ocr_proxy",
            format!("malformed code {code:?}"),
        ));
    }
    let hits = code
        .iter()
        .zip(sample.data())
        .filter(|(&bit, &v)| if bit == 1 { v > 0.0 } else { v < 0.0 })
        .count();
    Ok(hits as f64 / CODE_BITS as f64)
}

/// `(wins + ties/2) / (G − 1)` for every member under `cmp`
/// (`Greater` means the left item wins).
pub fn pairwise_winrates<T>(items: &[T], cmp: impl Fn(&T, &T) -> Ordering) -> Result<Vec<f64>> {
    let g = items.len();
    if g < 2 {
        return Err(Error::domain(
            "pairwise_winrates",
            format!("group of {g} has no opponents"),
        ));
    }
    let mut score = vec![0.0; g];
    for i in 0..g {
        for j in (i + 1)..g {
            match cmp(&items[i], &items[j]) {
                Ordering::Greater => score[i] += 1.0,
                Ordering::Less => score[j] += 1.0,
                Ordering::Equal => {
                    score[i] += 0.5;
                    score[j] += 0.5;
                }
            }
        }
    }
    Ok(score.into_iter().map(|s| s / (g - 1) as f64).collect())
}

/// Win rates of scalar scores, higher is better.
pub fn winrates_by_score(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("preference scores".into()));
    }
    pairwise_winrates(scores, |a, b| a.partial_cmp(b).expect("finite"))
}

/// The judge behind the preference reward: negative L1 distance to the
/// prompt's target.
pub fn preference_score(sample: &Tensor, centroid: &Tensor) -> f64 {
    -sample
        .data()
        .iter()
        .zip(centroid.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
}

/// What a prompt asks for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTarget {
    pub id: usize,
    pub category: PromptCategory,
    pub centroid: Tensor,
    pub code: Option<Vec<u8>>,
}

/// Raw rewards of one group, `G × K` over the category's active rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRewards {
    pub values: Tensor,
    pub names: Vec<String>,
    pub weights: Vec<f64>,
    pub prompt: usize,
    pub category: PromptCategory,
}

impl GroupRewards {
    pub fn new(
        values: Tensor,
        names: Vec<String>,
        weights: Vec<f64>,
        prompt: usize,
        category: PromptCategory,
    ) -> Result<Self> {
        if values.shape().len() != 2 || values.cols() != names.len() || names.len() != weights.len()
        {
            return Err(Error::Shape {
                op: "GroupRewards::new",
                left: values.shape().to_vec(),
                right: vec![names.len(), weights.len()],
            });
        }
        values.ensure_finite("group rewards")?;
        Ok(Self {
            values,
            names,
            weights,
            prompt,
            category,
        })
    }

    pub fn group_size(&self) -> usize {
        self.values.rows()
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.values.rows())
            .map(|i| self.values.row(i)[k])
            .collect()
    }

    pub fn column_by_name(&self, name: &str) -> Option<Vec<f64>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|k| self.column(k))
    }
}

/// A reward set bound to the prompt targets of a task.
#[derive(Debug, Clone)]
pub struct RewardSuite {
    pub specs: Vec<RewardSpec>,
    pub tau: f64,
    targets: BTreeMap<usize, PromptTarget>,
}

impl RewardSuite {
    pub fn new(specs: Vec<RewardSpec>, tau: f64, targets: Vec<PromptTarget>) -> Result<Self> {
        validate_specs(&specs)?;
        if !(tau > 0.0) {
            return Err(Error::Config(format!(
                "similarity tau {tau} must be positive"
            )));
        }
        let targets = targets.into_iter().map(|t| (t.id, t)).collect();
        Ok(Self {
            specs,
            tau,
            targets,
        })
    }

    pub fn target(&self, id: usize) -> Result<&PromptTarget> {
        self.targets
            .get(&id)
            .ok_or_else(|| Error::domain("RewardSuite", format!("unknown condition id {id}")))
    }

    /// Active specs for a category, in suite order.
    pub fn active(&self, category: PromptCategory) -> Vec<&RewardSpec> {
        self.specs
            .iter()
            .filter(|s| s.weight(category) > 0.0)
            .collect()
    }

    /// Every reward name the suite can emit, in suite order.
    pub fn names(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.name.clone()).collect()
    }

    fn pointwise(&self, spec: &RewardSpec, target: &PromptTarget, sample: &Tensor) -> Result<f64> {
        match spec.source {
            RewardSource::Similarity => similarity_proxy(sample, &target.centroid, self.tau),
            RewardSource::Ocr => {
                let code = target.code.as_ref().ok_or_else(|| {
                    Error::domain("ocr_proxy", format!("prompt {} has no code", target.id))
                })?;
                ocr_proxy(sample, code)
            }
            RewardSource::Preference => unreachable!("pairwise"),
        }
    }

    /// Scores samples of one prompt. Pairwise rewards need at least two.
    pub fn evaluate_samples(&self, prompt: usize, samples: &[&Tensor]) -> Result<GroupRewards> {
        let target = self.target(prompt)?;
        let active = self.active(target.category);
        let g = samples.len();
        let mut values = Tensor::zeros(&[g, active.len()]);
        for (k, spec) in active.iter().enumerate() {
            let raw: Vec<f64> = match spec.kind() {
                RewardKind::Pairwise => {
                    let scores: Vec<f64> = samples
                        .iter()
                        .map(|s| preference_score(s, &target.centroid))
                        .collect();
                    winrates_by_score(&scores)?
                }
                RewardKind::Pointwise => samples
                    .iter()
                    .map(|s| self.pointwise(spec, target, s))
                    .collect::<Result<_>>()?,
            };
            for (i, r) in raw.into_iter().enumerate() {
                values.row_mut(i)[k] = if spec.gain == 1.0 {
                    r
                } else {
                    0.5 + spec.gain * (r - 0.5)
                };
            }
        }
        GroupRewards::new(
            values,
            active.iter().map(|s| s.name.clone()).collect(),
            active.iter().map(|s| s.weight(target.category)).collect(),
            prompt,
            target.category,
        )
    }

    /// Scores a rollout group; all trajectories must share a prompt.
    pub fn evaluate_group(&self, trajectories: &[Trajectory]) -> Result<GroupRewards> {
        let Some(first) = trajectories.first() else {
            return Err(Error::domain("evaluate_group", "empty group"));
        };
        if trajectories.iter().any(|t| t.condition != first.condition) {
            return Err(Error::domain("evaluate_group", "group mixes prompts"));
        }
        let samples: Vec<&Tensor> = trajectories.iter().map(|t| &t.x0).collect();
        self.evaluate_samples(first.condition, &samples)
    }
}

/// Writes `prompt_id, sample_idx, reward_name, value` rows.
pub fn write_reward_csv(out: &mut impl Write, groups: &[GroupRewards]) -> std::io::Result<()> {
    writeln!(out, "prompt_id,sample_idx,reward_name,value")?;
    for g in groups {
        for i in 0..g.group_size() {
            for (k, name) in g.names.iter().enumerate() {
                writeln!(out, "{},{},{},{}", g.prompt, i, name, g.values.row(i)[k])?;
            }
        }
    }
    Ok(())
}
