//! One on-policy RL update: rollout, reward, advantage, surrogate, step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::advantage::{
    aggregate_and_batch_normalize, group_advantages, AdvantageTable, BatchStats, NormalizationMode,
};
use super::surrogate::{grpo_surrogate, total_loss, SurrogateConfig, SurrogateInput};
use crate::error::{Error, Result};
use crate::flow::{fm_loss, sample_group, Condition, FmExample, Policy, Trajectory, VelocityModel};
use crate::numeric::{AdamW, AdamWConfig, ParamStore, SeededRng, StepOutcome};
use crate::reward::{GroupRewards, RewardSuite};
use crate::scb::ForwardMode;

/// Sub-stream labels inside one step's RNG.
const STREAM_ROLLOUT: u64 = 0;
const STREAM_SFT: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub denoise_steps: usize,
    pub sde_eta: f64,
    pub timestep_fraction: f64,
    pub clip_range: f64,
    pub kl_coeff: f64,
    pub sft_aux_coeff: f64,
    pub normalization: NormalizationMode,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            denoise_steps: 50,
            sde_eta: 1.0,
            timestep_fraction: 0.6,
            clip_range: 1e-4,
            kl_coeff: 5e-7,
            sft_aux_coeff: 1e-4,
            normalization: NormalizationMode::RewardWise,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.group_size < 2 {
            return bad(format!("group_size {} < 2", self.group_size));
        }
        if self.denoise_steps == 0 {
            return bad("denoise_steps must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.sde_eta) {
            return bad(format!("sde_eta {} outside [0, 1]", self.sde_eta));
        }
        if !(self.timestep_fraction > 0.0 && self.timestep_fraction <= 1.0) {
            return bad(format!(
                "timestep_fraction {} outside (0, 1]",
                self.timestep_fraction
            ));
        }
        if !(self.clip_range > 0.0) {
            return bad(format!("clip_range {} must be positive", self.clip_range));
        }
        if !(self.kl_coeff >= 0.0) {
            return bad(format!("kl_coeff {} must be nonnegative", self.kl_coeff));
        }
        if !(0.0..1.0).contains(&self.sft_aux_coeff) {
            return bad(format!(
                "sft_aux_coeff {} outside [0, 1)",
                self.sft_aux_coeff
            ));
        }
        Ok(())
    }

    pub fn surrogate(&self) -> SurrogateConfig {
        SurrogateConfig {
            clip_range: self.clip_range,
            kl_coeff: self.kl_coeff,
            timestep_fraction: self.timestep_fraction,
        }
    }
}

/// The trained policy, the rollout snapshot and the frozen reference, all
/// sharing one architecture.
#[derive(Debug, Clone)]
pub struct PolicyBundle {
    pub model: VelocityModel,
    pub policy: ParamStore,
    pub old: ParamStore,
    pub reference: ParamStore,
    pub optimizer: AdamW,
    pub max_grad_norm: Option<f64>,
}

impl PolicyBundle {
    /// `init` seeds the policy; its values also become the reference.
    pub fn new(
        model: VelocityModel,
        init: ParamStore,
        optimizer: AdamWConfig,
        max_grad_norm: Option<f64>,
    ) -> Self {
        let mut reference = init.clone();
        reference.freeze_all();
        let old = reference.clone();
        let optimizer = AdamW::new(optimizer, &init);
        Self {
            model,
            policy: init,
            old,
            reference,
            optimizer,
            max_grad_norm,
        }
    }

    pub fn refresh_snapshot(&mut self) -> Result<()> {
        self.old.copy_values_from(&self.policy)
    }
}

/// Everything logged for one RL step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    /// Mean raw reward per suite reward, over samples where it is active
    /// (NaN when no prompt of the batch uses it).
    pub mean_rewards: Vec<(String, f64)>,
    /// Mean category-weighted raw reward over all samples.
    pub mean_reward_aggregate: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub loss_grpo: f64,
    pub loss_sft: f64,
    pub loss_total: f64,
    pub degenerate_groups: usize,
    pub clamped_ratios: usize,
    pub adv_mean: f64,
    pub adv_std: f64,
    pub max_ratio_deviation: f64,
    pub grad_norm: f64,
    pub skipped: bool,
}

impl StepMetrics {
    pub fn csv_header(reward_names: &[String]) -> String {
        let mut cols = vec!["step".to_string()];
        cols.extend(reward_names.iter().map(|n| format!("mean_reward_{n}")));
        cols.extend(
            [
                "mean_reward_aggregate",
                "kl",
                "clip_fraction",
                "loss_grpo",
                "loss_sft",
                "loss_total",
                "degenerate_groups",
                "clamped_ratios",
                "adv_mean",
                "adv_std",
                "max_ratio_deviation",
                "grad_norm",
                "skipped",
            ]
            .map(String::from),
        );
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.step.to_string()];
        cols.extend(self.mean_rewards.iter().map(|(_, v)| v.to_string()));
        cols.extend([
            self.mean_reward_aggregate.to_string(),
            self.kl.to_string(),
            self.clip_fraction.to_string(),
            self.loss_grpo.to_string(),
            self.loss_sft.to_string(),
            self.loss_total.to_string(),
            self.degenerate_groups.to_string(),
            self.clamped_ratios.to_string(),
            self.adv_mean.to_string(),
            self.adv_std.to_string(),
            self.max_ratio_deviation.to_string(),
            self.grad_norm.to_string(),
            u8::from(self.skipped).to_string(),
        ]);
        cols.join(",")
    }
}

/// Per-name means over the samples where each reward is active, plus the
/// mean weighted aggregate.
pub fn summarize_rewards(
    suite: &RewardSuite,
    groups: &[GroupRewards],
) -> (Vec<(String, f64)>, f64) {
    let means = suite
        .names()
        .into_iter()
        .map(|name| {
            let vals: Vec<f64> = groups
                .iter()
                .filter_map(|g| g.column_by_name(&name))
                .flatten()
                .collect();
            let m = if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            };
            (name, m)
        })
        .collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for g in groups {
        for i in 0..g.group_size() {
            total += g
                .values
                .row(i)
                .iter()
                .zip(&g.weights)
                .map(|(r, w)| r * w)
                .sum::<f64>();
            count += 1;
        }
    }
    (
        means,
        if count == 0 {
            f64::NAN
        } else {
            total / count as f64
        },
    )
}

/// Rolls out one group per prompt from the snapshot, in parallel.
pub fn rollout_groups(
    model: &VelocityModel,
    snapshot: &ParamStore,
    prompts: &[Condition],
    cfg: &GrpoConfig,
    rng: &SeededRng,
) -> Result<Vec<Vec<Trajectory>>> {
    let policy = Policy::new(model, snapshot);
    prompts
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            sample_group(
                policy,
                c,
                cfg.group_size,
                cfg.denoise_steps,
                cfg.sde_eta,
                &rng.split(i as u64),
            )
        })
        .collect()
}

/// Rollouts, rewards and batch-normalized advantages of one step.
pub struct RolloutBatch {
    pub groups: Vec<Vec<Trajectory>>,
    pub rewards: Vec<GroupRewards>,
    pub advantages: Vec<AdvantageTable>,
    pub stats: BatchStats,
}

pub fn collect_batch(
    model: &VelocityModel,
    snapshot: &ParamStore,
    prompts: &[Condition],
    suite: &RewardSuite,
    cfg: &GrpoConfig,
    rng: &SeededRng,
) -> Result<RolloutBatch> {
    let groups = rollout_groups(model, snapshot, prompts, cfg, rng)?;
    let rewards: Vec<GroupRewards> = groups
        .par_iter()
        .map(|g| suite.evaluate_group(g))
        .collect::<Result<_>>()?;
    let mut advantages: Vec<AdvantageTable> = rewards
        .iter()
        .map(|r| group_advantages(r, cfg.normalization))
        .collect::<Result<_>>()?;
    let stats = aggregate_and_batch_normalize(&mut advantages)?;
    Ok(RolloutBatch {
        groups,
        rewards,
        advantages,
        stats,
    })
}

/// A full update: snapshot refresh, rollouts, rewards, advantages, the
/// surrogate with KL, the auxiliary flow-matching term and one AdamW step.
#[allow(clippy::too_many_arguments)]
pub fn rl_train_step(
    bundle: &mut PolicyBundle,
    prompts: &[Condition],
    suite: &RewardSuite,
    cfg: &GrpoConfig,
    sft_batch: Option<&[FmExample]>,
    rng: &SeededRng,
    lr: f64,
    step: usize,
) -> Result<StepMetrics> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(Error::domain("rl_train_step", "no prompts"));
    }
    bundle.refresh_snapshot()?;
    let batch = collect_batch(
        &bundle.model,
        &bundle.old,
        prompts,
        suite,
        cfg,
        &rng.split(STREAM_ROLLOUT),
    )?;
    let (mean_rewards, mean_reward_aggregate) = summarize_rewards(suite, &batch.rewards);
    let mut metrics = StepMetrics {
        step,
        mean_rewards,
        mean_reward_aggregate,
        kl: 0.0,
        clip_fraction: 0.0,
        loss_grpo: 0.0,
        loss_sft: 0.0,
        loss_total: 0.0,
        degenerate_groups: batch.stats.degenerate_groups,
        clamped_ratios: 0,
        adv_mean: batch.stats.final_mean,
        adv_std: batch.stats.final_std,
        max_ratio_deviation: 0.0,
        grad_norm: 0.0,
        skipped: false,
    };
    if batch.stats.degenerate_batch || batch.stats.included_groups == 0 {
        log::info!("step {step}: every group is degenerate, skipping the update");
        metrics.skipped = true;
        return Ok(metrics);
    }
    let inputs: Vec<SurrogateInput> = batch
        .groups
        .iter()
        .zip(prompts)
        .zip(&batch.advantages)
        .filter(|(_, adv)| !adv.is_degenerate())
        .flat_map(|((g, c), adv)| {
            g.iter()
                .zip(&adv.final_adv)
                .map(move |(t, &a)| SurrogateInput {
                    traj: t,
                    cond: c,
                    advantage: a,
                })
        })
        .collect();
    let lambda = match sft_batch {
        Some(_) => cfg.sft_aux_coeff,
        None => 0.0,
    };
    let PolicyBundle {
        model,
        policy,
        reference,
        optimizer,
        max_grad_norm,
        ..
    } = bundle;
    policy.zero_grad();
    let st = grpo_surrogate(
        model,
        policy,
        Some(reference),
        &inputs,
        &cfg.surrogate(),
        1.0 - lambda,
    )?;
    let loss_sft = match sft_batch {
        Some(b) if lambda > 0.0 => fm_loss(
            model,
            policy,
            b,
            &mut rng.split(STREAM_SFT),
            ForwardMode::Eval,
            lambda,
        )?,
        _ => 0.0,
    };
    metrics.kl = st.kl;
    metrics.clip_fraction = st.clip_fraction;
    metrics.clamped_ratios = st.clamped_ratios;
    metrics.max_ratio_deviation = st.max_ratio_deviation;
    metrics.loss_grpo = st.loss;
    metrics.loss_sft = loss_sft;
    metrics.loss_total = total_loss(st.loss, loss_sft, lambda);
    metrics.grad_norm = match max_grad_norm {
        Some(m) => policy.clip_grad_norm(*m),
        None => policy.trainable_grad_norm(),
    };
    if let StepOutcome::Skipped { param } = optimizer.step(policy, lr)? {
        log::warn!("step {step}: non-finite gradient in {param}, update skipped");
        metrics.skipped = true;
    }
    Ok(metrics)
}
