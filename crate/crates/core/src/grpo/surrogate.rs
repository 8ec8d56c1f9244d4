//! Clipped surrogate over denoising steps and the velocity-space KL.
//!
//! The objective is minimised:
//!
//! `L = mean_i mean_{t<T'} [ −min(r·Â, clip(r, 1−ε, 1+ε)·Â) + β·‖v̂_θ − v̂_ref‖² ]`
//!
//! with `r = exp(log p_θ − log p_old)` evaluated at the stored rollout step.

use crate::error::{Error, Result};
use crate::flow::{mean_coefficients, step_mean, Condition, Trajectory, VelocityModel};
use crate::numeric::{MlpCache, ParamStore, Tensor};
use crate::scb::ForwardMode;

/// Log-ratio magnitude beyond which the exponent is clamped.
pub const RATIO_EXPONENT_LIMIT: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ratio {
    pub value: f64,
    pub clamped: bool,
}

/// `exp(logp_new − logp_old)` with the exponent clamped to `±30`.
pub fn importance_ratio(logp_new: f64, logp_old: f64) -> Result<Ratio> {
    if !(logp_new.is_finite() && logp_old.is_finite()) {
        return Err(Error::NonFinite(
            "log-probabilities for the importance ratio".into(),
        ));
    }
    let d = logp_new - logp_old;
    let clamped = d.abs() > RATIO_EXPONENT_LIMIT;
    Ok(Ratio {
        value: d.clamp(-RATIO_EXPONENT_LIMIT, RATIO_EXPONENT_LIMIT).exp(),
        clamped,
    })
}

/// Number of leading (highest-noise) steps that enter the objective.
pub fn included_steps(steps: usize, fraction: f64) -> usize {
    ((fraction * steps as f64).ceil() as usize).clamp(1, steps.max(1))
}

/// `(1−λ)·grpo + λ·sft`.
pub fn total_loss(grpo: f64, sft: f64, lambda: f64) -> f64 {
    (1.0 - lambda) * grpo + lambda * sft
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateConfig {
    pub clip_range: f64,
    pub kl_coeff: f64,
    pub timestep_fraction: f64,
}

/// One rollout with its prompt and final advantage.
#[derive(Debug, Clone, Copy)]
pub struct SurrogateInput<'a> {
    pub traj: &'a Trajectory,
    pub cond: &'a Condition,
    pub advantage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SurrogateStats {
    /// Clipped policy term alone.
    pub policy_loss: f64,
    /// Mean velocity-space KL over the included steps.
    pub kl: f64,
    /// `policy_loss + β·kl`.
    pub loss: f64,
    pub clip_fraction: f64,
    pub clamped_ratios: usize,
    pub max_ratio_deviation: f64,
    pub terms: usize,
}

struct Rows {
    x: Tensor,
    t: Vec<f64>,
    conds: Vec<usize>,
    /// (input index, step index) per row.
    origin: Vec<(usize, usize)>,
}

fn gather(inputs: &[SurrogateInput<'_>], fraction: f64) -> Result<(Rows, usize)> {
    let Some(first) = inputs.first() else {
        return Err(Error::domain("grpo_surrogate", "no rollouts"));
    };
    let steps = first.traj.steps.len();
    let keep = included_steps(steps, fraction);
    let dim = first.traj.x0.len();
    let mut x = Vec::new();
    let mut t = Vec::new();
    let mut conds = Vec::new();
    let mut origin = Vec::new();
    for (i, inp) in inputs.iter().enumerate() {
        if inp.traj.steps.len() != steps {
            return Err(Error::domain(
                "grpo_surrogate",
                "trajectories differ in length",
            ));
        }
        if inp.traj.log_probs.len() != steps {
            return Err(Error::domain(
                "grpo_surrogate",
                "missing stored log-probabilities",
            ));
        }
        if inp.cond.id != inp.traj.condition {
            return Err(Error::domain(
                "grpo_surrogate",
                "condition does not match trajectory",
            ));
        }
        for (j, st) in inp.traj.steps.iter().take(keep).enumerate() {
            x.extend_from_slice(st.x_t.data());
            t.push(st.t);
            conds.push(i);
            origin.push((i, j));
        }
    }
    let n = origin.len();
    Ok((
        Rows {
            x: Tensor::matrix(n, dim, x)?,
            t,
            conds,
            origin,
        },
        keep,
    ))
}

struct Forward {
    stats: SurrogateStats,
    dv: Tensor,
    cache: MlpCache,
    cond_batch: crate::flow::CondBatch,
}

fn forward(
    model: &VelocityModel,
    store: &ParamStore,
    reference: Option<&ParamStore>,
    inputs: &[SurrogateInput<'_>],
    cfg: &SurrogateConfig,
) -> Result<Forward> {
    let (rows, keep) = gather(inputs, cfg.timestep_fraction)?;
    let cond_refs: Vec<&Condition> = rows.conds.iter().map(|&i| inputs[i].cond).collect();
    let cb = model.condition_batch(store, &cond_refs, ForwardMode::Eval)?;
    let (v, cache) = model.velocity(store, &rows.x, &rows.t, &cb.row_matrix())?;
    let v_ref = match reference {
        Some(r) => {
            let rcb = model.condition_batch(r, &cond_refs, ForwardMode::Eval)?;
            Some(model.velocity(r, &rows.x, &rows.t, &rcb.row_matrix())?.0)
        }
        _ => None,
    };
    let n_samples = inputs.len() as f64;
    let per_term = 1.0 / (n_samples * keep as f64);
    let mut dv = Tensor::zeros(v.shape());
    let mut stats = SurrogateStats::default();
    let mut clipped = 0usize;
    for (row, &(i, j)) in rows.origin.iter().enumerate() {
        let st = &inputs[i].traj.steps[j];
        let adv = inputs[i].advantage;
        let v_row = Tensor::vector(v.row(row).to_vec());
        let mu = step_mean(&st.x_t, st.t, st.dt, &v_row, st.eta)?;
        let resid = st.x_next.sub(&mu)?;
        let logp = -resid.sum_sq();
        let ratio = importance_ratio(logp, inputs[i].traj.log_probs[j])?;
        let r = ratio.value;
        stats.clamped_ratios += usize::from(ratio.clamped);
        stats.max_ratio_deviation = stats.max_ratio_deviation.max((r - 1.0).abs());
        if (r - 1.0).abs() > cfg.clip_range {
            clipped += 1;
        }
        let r_clip = r.clamp(1.0 - cfg.clip_range, 1.0 + cfg.clip_range);
        let unclipped = r * adv;
        let bound = r_clip * adv;
        stats.policy_loss -= unclipped.min(bound) * per_term;
        let d_row = dv.row_mut(row);
        if unclipped <= bound && !ratio.clamped {
            // ∂/∂v of −r·Â: r·∂logp/∂μ·∂μ/∂v with ∂logp/∂μ = 2(x_next − μ).
            let (_, b) = mean_coefficients(st.t, st.dt, st.eta);
            let c = -adv * r * 2.0 * b * per_term;
            for (d, e) in d_row.iter_mut().zip(resid.data()) {
                *d += c * e;
            }
        }
        if let Some(vr) = &v_ref {
            let mut sq = 0.0;
            for ((d, a), b) in d_row.iter_mut().zip(v.row(row)).zip(vr.row(row)) {
                let diff = a - b;
                sq += diff * diff;
                *d += cfg.kl_coeff * 2.0 * diff * per_term;
            }
            stats.kl += sq * per_term;
        }
    }
    stats.terms = rows.origin.len();
    stats.clip_fraction = clipped as f64 / stats.terms as f64;
    stats.loss = stats.policy_loss + cfg.kl_coeff * stats.kl;
    if !stats.loss.is_finite() {
        return Err(Error::NonFinite("surrogate loss".into()));
    }
    Ok(Forward {
        stats,
        dv,
        cache,
        cond_batch: cb,
    })
}

/// Objective value without touching gradients.
pub fn grpo_surrogate_value(
    model: &VelocityModel,
    store: &ParamStore,
    reference: Option<&ParamStore>,
    inputs: &[SurrogateInput<'_>],
    cfg: &SurrogateConfig,
) -> Result<SurrogateStats> {
    Ok(forward(model, store, reference, inputs, cfg)?.stats)
}

/// Evaluates the objective and adds `grad_scale · ∂L/∂θ` to the policy
/// store. The reference store only supplies target velocities.
pub fn grpo_surrogate(
    model: &VelocityModel,
    store: &mut ParamStore,
    reference: Option<&ParamStore>,
    inputs: &[SurrogateInput<'_>],
    cfg: &SurrogateConfig,
    grad_scale: f64,
) -> Result<SurrogateStats> {
    let fw = forward(model, store, reference, inputs, cfg)?;
    if grad_scale != 0.0 {
        let dv = fw.dv.scale(grad_scale);
        let dc = model.velocity_backward(store, &fw.cache, &dv)?;
        model.condition_batch_backward(store, &fw.cond_batch, &dc)?;
    }
    Ok(fw.stats)
}

/// Mean over rows of `‖v̂_θ(x, t) − v̂_ref(x, t)‖²` for one prompt.
pub fn velocity_kl(
    model: &VelocityModel,
    policy: &ParamStore,
    reference: &ParamStore,
    x: &Tensor,
    t: &[f64],
    cond: &Condition,
) -> Result<f64> {
    let conds = vec![cond; x.rows()];
    let cb = model.condition_batch(policy, &conds, ForwardMode::Eval)?;
    let (v, _) = model.velocity(policy, x, t, &cb.row_matrix())?;
    let rcb = model.condition_batch(reference, &conds, ForwardMode::Eval)?;
    let (vr, _) = model.velocity(reference, x, t, &rcb.row_matrix())?;
    Ok(v.sub(&vr)?.sum_sq() / x.rows() as f64)
}

/// As [`velocity_kl`], accumulating `scale · ∂KL/∂θ` into the policy store.
pub fn velocity_kl_backward(
    model: &VelocityModel,
    policy: &mut ParamStore,
    reference: &ParamStore,
    x: &Tensor,
    t: &[f64],
    cond: &Condition,
    scale: f64,
) -> Result<f64> {
    let conds = vec![cond; x.rows()];
    let rcb = model.condition_batch(reference, &conds, ForwardMode::Eval)?;
    let (vr, _) = model.velocity(reference, x, t, &rcb.row_matrix())?;
    let cb = model.condition_batch(policy, &conds, ForwardMode::Eval)?;
    let (v, cache) = model.velocity(policy, x, t, &cb.row_matrix())?;
    let diff = v.sub(&vr)?;
    let n = x.rows() as f64;
    let dv = diff.scale(2.0 * scale / n);
    let dc = model.velocity_backward(policy, &cache, &dv)?;
    model.condition_batch_backward(policy, &cb, &dc)?;
    Ok(diff.sum_sq() / n)
}
