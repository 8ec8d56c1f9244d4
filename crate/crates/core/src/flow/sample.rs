//! Group rollouts with the noise-preserving sampler.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::model::{Condition, Policy};
use super::path::{log_prob, sde_step, time_grid, FlowStep};
use crate::error::{Error, Result};
use crate::numeric::{SeededRng, Tensor};
use crate::scb::ForwardMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub condition: usize,
    pub steps: Vec<FlowStep>,
    pub x0: Tensor,
    /// `log p` of each realized step under the sampling parameters.
    pub log_probs: Vec<f64>,
}

impl Trajectory {
    pub fn max_reconstruction_error(&self) -> f64 {
        self.steps
            .iter()
            .map(FlowStep::reconstruction_error)
            .fold(0.0, f64::max)
    }
}

/// `G ≥ 2` trajectories for one prompt, as needed for group statistics.
pub fn sample_group(
    policy: Policy<'_>,
    cond: &Condition,
    group_size: usize,
    steps: usize,
    eta: f64,
    rng: &SeededRng,
) -> Result<Vec<Trajectory>> {
    if group_size < 2 {
        return Err(Error::domain(
            "sample_group",
            format!("group size {group_size} < 2"),
        ));
    }
    sample_trajectories(policy, cond, group_size, steps, eta, rng)
}

/// `count ≥ 1` independent trajectories. Trajectory `i` draws its start and
/// its per-step noise from `rng.split(i)`.
pub fn sample_trajectories(
    policy: Policy<'_>,
    cond: &Condition,
    count: usize,
    steps: usize,
    eta: f64,
    rng: &SeededRng,
) -> Result<Vec<Trajectory>> {
    if count == 0 {
        return Err(Error::domain(
            "sample_trajectories",
            "count must be positive",
        ));
    }
    let dim = policy.model.state_dim();
    let mut streams: Vec<SeededRng> = (0..count).map(|i| rng.split(i as u64)).collect();
    let mut init = Vec::with_capacity(count * dim);
    for s in &mut streams {
        init.extend(s.normal_vec(dim));
    }
    let x_init = Tensor::matrix(count, dim, init)?;
    rollout(policy, cond, &x_init, steps, eta, |i| {
        streams[i].normal_vec(dim)
    })
}

/// Rolls out from explicit starting states (one per row) with noise supplied
/// by `noise(row)`, called once per row per step in row order.
pub fn rollout(
    policy: Policy<'_>,
    cond: &Condition,
    x_init: &Tensor,
    steps: usize,
    eta: f64,
    mut noise: impl FnMut(usize) -> Vec<f64>,
) -> Result<Vec<Trajectory>> {
    let dim = policy.model.state_dim();
    if x_init.shape().len() != 2 || x_init.cols() != dim {
        return Err(Error::Shape {
            op: "rollout",
            left: x_init.shape().to_vec(),
            right: vec![x_init.rows(), dim],
        });
    }
    let count = x_init.rows();
    let grid = time_grid(steps)?;
    let (cvec, _) = policy
        .model
        .condition(policy.params, cond, ForwardMode::Eval)?;
    let mut trajectories: Vec<Trajectory> = (0..count)
        .map(|_| Trajectory {
            condition: cond.id,
            steps: Vec::with_capacity(steps),
            x0: Tensor::zeros(&[dim]),
            log_probs: Vec::with_capacity(steps),
        })
        .collect();
    let mut x = x_init.clone();
    for j in 0..steps {
        let t = grid[j];
        let dt = grid[j] - grid[j + 1];
        let v = policy.velocity_shared(&x, &vec![t; count], &cvec)?;
        let mut next = Vec::with_capacity(count * dim);
        for (i, traj) in trajectories.iter_mut().enumerate() {
            let x_t = Tensor::vector(x.row(i).to_vec());
            let v_i = Tensor::vector(v.row(i).to_vec());
            let eps = Tensor::vector(noise(i));
            let step = sde_step(&x_t, t, dt, &v_i, eta, &eps)?;
            traj.log_probs.push(log_prob(&step.x_next, &step.mu)?);
            next.extend_from_slice(step.x_next.data());
            traj.steps.push(step);
        }
        x = Tensor::matrix(count, dim, next)?;
    }
    for (i, traj) in trajectories.iter_mut().enumerate() {
        traj.x0 = Tensor::vector(x.row(i).to_vec());
    }
    x.ensure_finite("rollout samples")?;
    Ok(trajectories)
}

/// Deterministic Euler sampling (`η = 0`) from given starting states.
pub fn sample_ode(
    policy: Policy<'_>,
    cond: &Condition,
    x_init: &Tensor,
    steps: usize,
) -> Result<Tensor> {
    let dim = policy.model.state_dim();
    let trajs = rollout(policy, cond, x_init, steps, 0.0, |_| vec![0.0; dim])?;
    let rows: Vec<&[f64]> = trajs.iter().map(|t| t.x0.data()).collect();
    Tensor::from_rows(&rows)
}

/// Writes one CSV row per step:
/// `traj_id, step, t, dt, eta, x_t..., mu..., x_next..., logp`.
pub fn write_trajectory_csv(
    out: &mut impl Write,
    trajectories: &[Trajectory],
) -> std::io::Result<()> {
    let dim = trajectories.first().map_or(0, |t| t.x0.len());
    let mut header = vec![
        "traj_id".to_string(),
        "step".into(),
        "t".into(),
        "dt".into(),
        "eta".into(),
    ];
    for prefix in ["x_t", "mu", "x_next"] {
        header.extend((0..dim).map(|k| format!("{prefix}_{k}")));
    }
    header.push("logp".into());
    writeln!(out, "{}", header.join(","))?;
    for (id, traj) in trajectories.iter().enumerate() {
        for (j, (step, lp)) in traj.steps.iter().zip(&traj.log_probs).enumerate() {
            let mut row = vec![
                id.to_string(),
                j.to_string(),
                step.t.to_string(),
                step.dt.to_string(),
                step.eta.to_string(),
            ];
            for t in [&step.x_t, &step.mu, &step.x_next] {
                row.extend(t.data().iter().map(|v| v.to_string()));
            }
            row.push(lp.to_string());
            writeln!(out, "{}", row.join(","))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::model::{ConditioningSpec, ModelSpec, VelocityModel};
    use crate::flow::path::noise_scale;
    use crate::numeric::{Activation, ParamStore};

    fn model() -> (VelocityModel, ParamStore) {
        VelocityModel::build(
            ModelSpec {
                state_dim: 3,
                hidden: vec![8],
                activation: Activation::Tanh,
                conditioning: ConditioningSpec::Table {
                    conditions: 2,
                    dim: 2,
                },
            },
            &mut SeededRng::new(1),
        )
        .unwrap()
    }

    #[test]
    fn deterministic_sampler_has_zero_log_probs() {
        let (m, s) = model();
        let p = Policy::new(&m, &s);
        let cond = Condition {
            id: 0,
            tokens: vec![],
        };
        let x = Tensor::matrix(4, 3, [0.3, -0.2, 1.0].repeat(4)).unwrap();
        let mut rng = SeededRng::new(2);
        let trajs = rollout(p, &cond, &x, 5, 0.0, |_| rng.normal_vec(3)).unwrap();
        for tr in &trajs {
            for st in &tr.steps {
                assert_eq!(st.mu, st.x_next);
            }
            assert!(tr.log_probs.iter().all(|&l| l == 0.0));
            assert_eq!(tr.x0, trajs[0].x0);
        }
    }

    #[test]
    fn group_shape_and_seed_determinism() {
        let (m, s) = model();
        let p = Policy::new(&m, &s);
        let cond = Condition {
            id: 1,
            tokens: vec![],
        };
        let a = sample_group(p, &cond, 8, 50, 1.0, &SeededRng::new(9)).unwrap();
        let b = sample_group(p, &cond, 8, 50, 1.0, &SeededRng::new(9)).unwrap();
        assert_eq!(a.len(), 8);
        assert!(a
            .iter()
            .all(|t| t.steps.len() == 50 && t.log_probs.len() == 50));
        assert_eq!(a, b);
        let c = sample_group(p, &cond, 8, 50, 1.0, &SeededRng::new(10)).unwrap();
        assert_ne!(a, c);
        assert!(sample_group(p, &cond, 1, 5, 1.0, &SeededRng::new(9)).is_err());
        assert_eq!(
            sample_trajectories(p, &cond, 1, 5, 1.0, &SeededRng::new(9))
                .unwrap()
                .len(),
            1
        );
    }

    #[test]
    fn stored_steps_satisfy_identities() {
        let (m, s) = model();
        let p = Policy::new(&m, &s);
        let cond = Condition {
            id: 0,
            tokens: vec![],
        };
        let trajs = sample_group(p, &cond, 4, 10, 0.7, &SeededRng::new(3)).unwrap();
        for tr in &trajs {
            assert_eq!(tr.x0, tr.steps.last().unwrap().x_next);
            assert!(tr.max_reconstruction_error() == 0.0);
            for (st, lp) in tr.steps.iter().zip(&tr.log_probs) {
                let want = -noise_scale(st.t, st.dt, st.eta).powi(2) * st.eps.sum_sq();
                if want == 0.0 {
                    assert_eq!(*lp, 0.0);
                } else {
                    assert!(((lp - want) / want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn csv_dump_has_expected_columns() {
        let (m, s) = model();
        let p = Policy::new(&m, &s);
        let trajs = sample_group(
            p,
            &Condition {
                id: 0,
                tokens: vec![],
            },
            2,
            3,
            1.0,
            &SeededRng::new(3),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &trajs).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 2 * 3);
        assert_eq!(lines[0].split(',').count(), 5 + 3 * 3 + 1);
        assert!(lines[0].starts_with("traj_id,step,t,dt,eta,x_t_0"));
        assert!(lines[0].ends_with("x_next_2,logp"));
    }
}
