//! Standard flow-matching regression loss.

use super::model::{Condition, VelocityModel};
use super::path::interpolate;
use crate::error::{Error, Result};
use crate::numeric::{ParamStore, SeededRng, Tensor};
use crate::scb::ForwardMode;

/// One clean data point and the prompt that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct FmExample {
    pub x0: Tensor,
    pub cond: Condition,
}

/// Per-example time and noise draws, fixed so the loss is a plain function
/// of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FmDraws {
    pub t: Vec<f64>,
    pub x1: Tensor,
}

impl FmDraws {
    pub fn sample(rng: &mut SeededRng, n: usize, dim: usize) -> Self {
        let t = (0..n).map(|_| rng.uniform_open()).collect();
        let x1 = rng.normal_tensor(&[n, dim]);
        Self { t, x1 }
    }
}

struct Prepared {
    x_t: Tensor,
    target: Tensor,
}

fn prepare(model: &VelocityModel, batch: &[FmExample], draws: &FmDraws) -> Result<Prepared> {
    if batch.is_empty() {
        return Err(Error::domain("fm_loss", "empty batch"));
    }
    let n = batch.len();
    let d = model.state_dim();
    if draws.t.len() != n || draws.x1.shape() != [n, d] {
        return Err(Error::Shape {
            op: "fm_loss",
            left: vec![n, d],
            right: draws.x1.shape().to_vec(),
        });
    }
    let mut xt = Vec::with_capacity(n * d);
    let mut target = Vec::with_capacity(n * d);
    for (i, ex) in batch.iter().enumerate() {
        if ex.x0.len() != d {
            return Err(Error::Shape {
                op: "fm_loss",
                left: ex.x0.shape().to_vec(),
                right: vec![d],
            });
        }
        let x1 = Tensor::vector(draws.x1.row(i).to_vec());
        let x0 = Tensor::vector(ex.x0.data().to_vec());
        xt.extend(interpolate(&x0, &x1, draws.t[i])?.into_data());
        target.extend(x1.data().iter().zip(x0.data()).map(|(a, b)| a - b));
    }
    Ok(Prepared {
        x_t: Tensor::matrix(n, d, xt)?,
        target: Tensor::matrix(n, d, target)?,
    })
}

/// Loss value only; no gradients are touched.
pub fn fm_loss_value(
    model: &VelocityModel,
    store: &ParamStore,
    batch: &[FmExample],
    draws: &FmDraws,
) -> Result<f64> {
    let p = prepare(model, batch, draws)?;
    let conds: Vec<&Condition> = batch.iter().map(|e| &e.cond).collect();
    let cb = model.condition_batch(store, &conds, ForwardMode::Eval)?;
    let (v, _) = model.velocity(store, &p.x_t, &draws.t, &cb.row_matrix())?;
    Ok(v.sub(&p.target)?.sum_sq() / batch.len() as f64)
}

/// `mean_i ‖v̂(x_t, t, c) − (x₁ − x₀)‖²` with fixed draws. Adds
/// `grad_scale · ∂L/∂θ` into the store's gradients and returns `L`.
pub fn fm_loss_with_draws(
    model: &VelocityModel,
    store: &mut ParamStore,
    batch: &[FmExample],
    draws: &FmDraws,
    mut mode: ForwardMode<'_>,
    grad_scale: f64,
) -> Result<f64> {
    let p = prepare(model, batch, draws)?;
    let conds: Vec<&Condition> = batch.iter().map(|e| &e.cond).collect();
    let cb = model.condition_batch(store, &conds, mode.reborrow())?;
    let (v, cache) = model.velocity(store, &p.x_t, &draws.t, &cb.row_matrix())?;
    let resid = v.sub(&p.target)?;
    let n = batch.len() as f64;
    let loss = resid.sum_sq() / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("flow-matching loss".into()));
    }
    if grad_scale != 0.0 {
        let dv = resid.scale(2.0 * grad_scale / n);
        let dc = model.velocity_backward(store, &cache, &dv)?;
        model.condition_batch_backward(store, &cb, &dc)?;
    }
    Ok(loss)
}

/// Draws `(t, x₁)` from `rng` and evaluates [`fm_loss_with_draws`].
pub fn fm_loss(
    model: &VelocityModel,
    store: &mut ParamStore,
    batch: &[FmExample],
    rng: &mut SeededRng,
    mode: ForwardMode<'_>,
    grad_scale: f64,
) -> Result<f64> {
    let draws = FmDraws::sample(rng, batch.len(), model.state_dim());
    fm_loss_with_draws(model, store, batch, &draws, mode, grad_scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::model::{ConditioningSpec, ModelSpec, Policy};
    use crate::flow::sample::sample_ode;
    use crate::numeric::{
        finite_difference_grad, max_relative_error, Activation, AdamW, AdamWConfig,
    };

    fn spec(dim: usize, hidden: Vec<usize>) -> ModelSpec {
        ModelSpec {
            state_dim: dim,
            hidden,
            activation: Activation::Tanh,
            conditioning: ConditioningSpec::Table {
                conditions: 2,
                dim: 2,
            },
        }
    }

    fn examples(n: usize, dim: usize, rng: &mut SeededRng) -> Vec<FmExample> {
        (0..n)
            .map(|i| FmExample {
                x0: rng.normal_tensor(&[dim]),
                cond: Condition {
                    id: i % 2,
                    tokens: vec![],
                },
            })
            .collect()
    }

    #[test]
    fn empty_batch_rejected() {
        let (m, mut s) = VelocityModel::build(spec(2, vec![4]), &mut SeededRng::new(0)).unwrap();
        let r = fm_loss(
            &m,
            &mut s,
            &[],
            &mut SeededRng::new(1),
            ForwardMode::Eval,
            1.0,
        );
        assert!(r.is_err());
    }

    #[test]
    fn zero_model_loss_is_noise_energy() {
        let dim = 3;
        let (m, mut s) = VelocityModel::build(spec(dim, vec![4]), &mut SeededRng::new(0)).unwrap();
        for (name, p) in s.iter_mut() {
            if name.starts_with("velocity.trunk") {
                p.value.fill(0.0);
            }
        }
        let batch: Vec<FmExample> = (0..20000)
            .map(|i| FmExample {
                x0: Tensor::zeros(&[dim]),
                cond: Condition {
                    id: i % 2,
                    tokens: vec![],
                },
            })
            .collect();
        let loss = fm_loss(
            &m,
            &mut s,
            &batch,
            &mut SeededRng::new(7),
            ForwardMode::Eval,
            0.0,
        )
        .unwrap();
        // Var of ‖x₁‖² is 2·dim, so the standard error here is about 0.017.
        assert!((loss - dim as f64).abs() < 0.1, "{loss}");
    }

    #[test]
    fn exact_target_gives_zero_loss() {
        let (m, s) = VelocityModel::build(spec(2, vec![4]), &mut SeededRng::new(0)).unwrap();
        let batch = examples(5, 2, &mut SeededRng::new(3));
        let mut draws = FmDraws::sample(&mut SeededRng::new(4), 5, 2);
        // Choose x₁ so that x₁ − x₀ equals the model's own prediction at x_t.
        // With x_t = x₀ + t(x₁ − x₀) this is a fixed point; iterate to convergence.
        for _ in 0..200 {
            let p = prepare(&m, &batch, &draws).unwrap();
            let conds: Vec<&Condition> = batch.iter().map(|e| &e.cond).collect();
            let cb = m.condition_batch(&s, &conds, ForwardMode::Eval).unwrap();
            let (v, _) = m.velocity(&s, &p.x_t, &draws.t, &cb.row_matrix()).unwrap();
            for i in 0..5 {
                for k in 0..2 {
                    draws.x1.row_mut(i)[k] = batch[i].x0.data()[k] + v.row(i)[k];
                }
            }
        }
        let loss = fm_loss_value(&m, &s, &batch, &draws).unwrap();
        assert!(loss < 1e-20, "{loss}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (m, mut s) =
            VelocityModel::build(spec(3, vec![5, 4]), &mut SeededRng::new(11)).unwrap();
        let batch = examples(6, 3, &mut SeededRng::new(12));
        let draws = FmDraws::sample(&mut SeededRng::new(13), 6, 3);
        s.zero_grad();
        fm_loss_with_draws(&m, &mut s, &batch, &draws, ForwardMode::Eval, 1.0).unwrap();
        let numeric =
            finite_difference_grad(|p| fm_loss_value(&m, p, &batch, &draws).unwrap(), &s, 1e-5)
                .unwrap();
        let err = max_relative_error(&s.flat_grads(), &numeric.flat());
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn single_point_training_concentrates_samples() {
        let target = Tensor::vector(vec![0.7, -0.4]);
        let (m, mut s) =
            VelocityModel::build(spec(2, vec![32, 32]), &mut SeededRng::new(5)).unwrap();
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            &s,
        );
        let batch: Vec<FmExample> = (0..64)
            .map(|_| FmExample {
                x0: target.clone(),
                cond: Condition {
                    id: 0,
                    tokens: vec![],
                },
            })
            .collect();
        let mut rng = SeededRng::new(6);
        for step in 0..1500 {
            let lr = if step < 1000 { 3e-3 } else { 5e-4 };
            s.zero_grad();
            fm_loss(&m, &mut s, &batch, &mut rng, ForwardMode::Eval, 1.0).unwrap();
            opt.step(&mut s, lr).unwrap();
        }
        let x_init = SeededRng::new(8).normal_tensor(&[200, 2]);
        let out = sample_ode(
            Policy::new(&m, &s),
            &Condition {
                id: 0,
                tokens: vec![],
            },
            &x_init,
            20,
        )
        .unwrap();
        let close = (0..200)
            .filter(|&i| {
                let r = out.row(i);
                ((r[0] - 0.7).powi(2) + (r[1] + 0.4).powi(2)).sqrt() < 0.1
            })
            .count();
        assert!(close >= 190, "{close}/200 within 0.1");
    }
}
