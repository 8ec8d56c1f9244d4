//! Fast invariant checks on the configured model, runnable from the CLI.

use super::config::RunConfig;
use super::run::{initial_model, SelfChecks};
use super::task::ToyTask;
use crate::data::weighted_index;
use crate::error::Result;
use crate::flow::{ode_step, predict_endpoints, sample_group, sde_step, Policy};
use crate::grpo::{
    collect_batch, grpo_surrogate_value, normalize_per_reward, velocity_kl, SurrogateInput,
};
use crate::numeric::{mean_std, SeededRng, Tensor};
use crate::reward::{GroupRewards, PromptCategory};

const DRAWS: usize = 2000;

fn sampler_checks(checks: &mut SelfChecks, rng: &mut SeededRng) -> Result<()> {
    let mut worst_ode = 0.0f64;
    let mut final_exact = true;
    for _ in 0..DRAWS {
        let x = rng.normal_tensor(&[3]);
        let v = rng.normal_tensor(&[3]);
        let eps = rng.normal_tensor(&[3]);
        let t = rng.uniform_range(0.05, 1.0);
        let dt = rng.uniform_range(0.0, t);
        let sde = sde_step(&x, t, dt, &v, 0.0, &eps)?;
        let ode = ode_step(&x, t, dt, &v)?;
        worst_ode = worst_ode.max(sde.x_next.sub(&ode)?.max_abs());
        let eta = rng.uniform();
        let last = sde_step(&x, t, t, &v, eta, &eps)?;
        final_exact &= last.x_next == predict_endpoints(&x, t, &v)?.x0_hat;
    }
    checks.check(worst_ode <= 1e-12, || {
        format!("eta=0 step differs from Euler by {worst_ode:e}")
    });
    checks.check(final_exact, || {
        "final step does not land on the predicted clean sample".into()
    });
    Ok(())
}

fn advantage_checks(checks: &mut SelfChecks, rng: &mut SeededRng) -> Result<()> {
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let values: Vec<f64> = (0..16).map(|_| rng.normal() * 3.0 + 1.0).collect();
        let raw = GroupRewards::new(
            Tensor::matrix(8, 2, values)?,
            vec!["a".into(), "b".into()],
            vec![0.5, 0.5],
            0,
            PromptCategory::GeneralT2I,
        )?;
        let adv = normalize_per_reward(&raw)?;
        for k in 0..2 {
            let (m, s) = mean_std(&adv.column(k));
            worst = worst.max(m.abs()).max((s - 1.0).abs());
        }
    }
    checks.check(worst <= 1e-9, || {
        format!("per-reward advantages off by {worst:e}")
    });
    Ok(())
}

fn model_checks(checks: &mut SelfChecks, cfg: &RunConfig) -> Result<()> {
    let task = ToyTask::build(&cfg.task)?;
    let suite = task.reward_suite()?;
    let (model, store) = initial_model(cfg)?;
    let grpo = cfg.grpo();
    let steps = cfg.rl.denoise_steps.min(10);
    let policy = Policy::new(&model, &store);
    let prompt = &task.prompts[0];
    let group = sample_group(
        policy,
        &prompt.cond,
        4,
        steps,
        grpo.sde_eta,
        &SeededRng::new(cfg.run.seed),
    )?;
    let mut worst = 0.0f64;
    for traj in &group {
        for (st, &lp) in traj.steps.iter().zip(&traj.log_probs) {
            let sigma = (st.t - st.dt) * (st.eta * std::f64::consts::FRAC_PI_2).sin();
            let want = -(sigma * sigma) * st.eps.sum_sq();
            let rel = (lp - want).abs() / want.abs().max(1e-300);
            if want != 0.0 || lp != 0.0 {
                worst = worst.max(rel);
            }
        }
    }
    checks.check(worst <= 1e-10, || {
        format!("stored log-probabilities off by {worst:e} relative")
    });

    let x = group[0]
        .steps
        .iter()
        .map(|s| s.x_t.data().to_vec())
        .collect::<Vec<_>>();
    let rows: Vec<&[f64]> = x.iter().map(Vec::as_slice).collect();
    let t: Vec<f64> = group[0].steps.iter().map(|s| s.t).collect();
    let kl = velocity_kl(
        &model,
        &store,
        &store,
        &Tensor::from_rows(&rows)?,
        &t,
        &prompt.cond,
    )?;
    checks.check(kl == 0.0, || {
        format!("velocity KL of a policy with itself is {kl:e}")
    });

    let conds: Vec<_> = task
        .prompts
        .iter()
        .take(2)
        .map(|p| p.cond.clone())
        .collect();
    let cfg_small = crate::grpo::GrpoConfig {
        denoise_steps: steps,
        ..grpo.clone()
    };
    let batch = collect_batch(
        &model,
        &store,
        &conds,
        &suite,
        &cfg_small,
        &SeededRng::new(cfg.run.seed + 1),
    )?;
    let inputs: Vec<SurrogateInput> = batch
        .groups
        .iter()
        .zip(&conds)
        .flat_map(|(g, c)| {
            g.iter().map(move |tr| SurrogateInput {
                traj: tr,
                cond: c,
                advantage: 1.0,
            })
        })
        .collect();
    let st = grpo_surrogate_value(&model, &store, None, &inputs, &cfg_small.surrogate())?;
    checks.check(
        st.max_ratio_deviation <= 1e-12 && st.clip_fraction == 0.0,
        || {
            format!(
                "ratio deviation {:e}, clip fraction {} at the snapshot",
                st.max_ratio_deviation, st.clip_fraction
            )
        },
    );
    Ok(())
}

fn mixture_check(checks: &mut SelfChecks, rng: &mut SeededRng) -> Result<()> {
    let n = 100_000;
    let mut first = 0usize;
    for _ in 0..n {
        first += usize::from(weighted_index(&[3.0, 1.0], rng)? == 0);
    }
    let f = first as f64 / n as f64;
    checks.check((f - 0.75).abs() <= 0.01, || {
        format!("3:1 mixture gave frequency {f}")
    });
    Ok(())
}

/// Runs every check; errors are reported as violations, not propagated.
pub fn selftest(cfg: &RunConfig) -> SelfChecks {
    let mut checks = SelfChecks::default();
    let mut rng = SeededRng::derive(cfg.run.seed, &[99]);
    let results = [
        sampler_checks(&mut checks, &mut rng),
        advantage_checks(&mut checks, &mut rng),
        model_checks(&mut checks, cfg),
        mixture_check(&mut checks, &mut rng),
    ];
    for r in results {
        if let Err(e) = r {
            checks.check(false, || format!("self-test errored: {e}"));
        }
    }
    checks
}
