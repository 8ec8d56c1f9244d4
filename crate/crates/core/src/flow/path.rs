//! The linear flow-matching path and single-step samplers.
//!
//! `x_t = (1−t)·x₀ + t·x₁` with `x₀` data and `x₁` noise, so the target
//! velocity is `x₁ − x₀` and sampling integrates from `t = 1` down to `0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

use std::f64::consts::FRAC_PI_2;

fn check_unit(op: &'static str, t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::domain(op, format!("t={t} outside [0, 1]")));
    }
    Ok(())
}

fn check_step(op: &'static str, t: f64, dt: f64) -> Result<()> {
    check_unit(op, t)?;
    if !(dt > 0.0 && dt <= t) {
        return Err(Error::domain(
            op,
            format!("need 0 < dt ≤ t, got dt={dt}, t={t}"),
        ));
    }
    Ok(())
}

fn check_eta(op: &'static str, eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::domain(op, format!("eta={eta} outside [0, 1]")));
    }
    Ok(())
}

pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
    x0.ensure_same_shape(x1, "interpolate")?;
    check_unit("interpolate", t)?;
    let mut out = x0.scale(1.0 - t);
    out.axpy(t, x1)?;
    Ok(out)
}

pub fn target_velocity(x0: &Tensor, x1: &Tensor) -> Result<Tensor> {
    x1.sub(x0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointPrediction {
    pub x0_hat: Tensor,
    pub x1_hat: Tensor,
}

/// `x̂₀ = x_t − t·v̂`, `x̂₁ = x_t + (1−t)·v̂`.
pub fn predict_endpoints(x_t: &Tensor, t: f64, v_hat: &Tensor) -> Result<EndpointPrediction> {
    x_t.ensure_same_shape(v_hat, "predict_endpoints")?;
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::domain(
            "predict_endpoints",
            format!("t={t} outside (0, 1]"),
        ));
    }
    let mut x0_hat = x_t.clone();
    x0_hat.axpy(-t, v_hat)?;
    let mut x1_hat = x_t.clone();
    x1_hat.axpy(1.0 - t, v_hat)?;
    Ok(EndpointPrediction { x0_hat, x1_hat })
}

/// Euler step of `dx = v̂ dt` from `t` to `t − dt`.
pub fn ode_step(x_t: &Tensor, t: f64, dt: f64, v_hat: &Tensor) -> Result<Tensor> {
    x_t.ensure_same_shape(v_hat, "ode_step")?;
    check_step("ode_step", t, dt)?;
    let mut out = x_t.clone();
    out.axpy(-dt, v_hat)?;
    Ok(out)
}

/// Coefficients `(a, b)` with `μ = a·x_t + b·v̂`, expanded from
/// `μ = (1−s)·x̂₀ + s·cos(ηπ/2)·x̂₁`, `s = t − dt`.
pub fn mean_coefficients(t: f64, dt: f64, eta: f64) -> (f64, f64) {
    let s = t - dt;
    let c = (eta * FRAC_PI_2).cos();
    ((1.0 - s) + s * c, -(1.0 - s) * t + s * c * (1.0 - t))
}

/// Deterministic part of the noise-preserving step.
pub fn step_mean(x_t: &Tensor, t: f64, dt: f64, v_hat: &Tensor, eta: f64) -> Result<Tensor> {
    check_step("step_mean", t, dt)?;
    check_eta("step_mean", eta)?;
    let ends = predict_endpoints(x_t, t, v_hat)?;
    let s = t - dt;
    let mut mu = ends.x0_hat.scale(1.0 - s);
    mu.axpy(s * (eta * FRAC_PI_2).cos(), &ends.x1_hat)?;
    Ok(mu)
}

/// Standard deviation of the fresh-noise term, `(t − dt)·sin(ηπ/2)`.
pub fn noise_scale(t: f64, dt: f64, eta: f64) -> f64 {
    (t - dt) * (eta * FRAC_PI_2).sin()
}

/// One realized sampler step with everything needed to re-score it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowStep {
    pub x_t: Tensor,
    pub t: f64,
    pub dt: f64,
    pub eta: f64,
    pub eps: Tensor,
    pub mu: Tensor,
    pub x_next: Tensor,
}

impl FlowStep {
    /// Largest deviation from `x_next = μ + (t−dt)·sin(ηπ/2)·ε`.
    pub fn reconstruction_error(&self) -> f64 {
        let sigma = noise_scale(self.t, self.dt, self.eta);
        self.x_next
            .data()
            .iter()
            .zip(self.mu.data())
            .zip(self.eps.data())
            .map(|((x, m), e)| (x - (m + sigma * e)).abs())
            .fold(0.0, f64::max)
    }
}

/// `x_{t−dt} = μ + (t−dt)·sin(ηπ/2)·ε`.
pub fn sde_step(
    x_t: &Tensor,
    t: f64,
    dt: f64,
    v_hat: &Tensor,
    eta: f64,
    eps: &Tensor,
) -> Result<FlowStep> {
    x_t.ensure_same_shape(eps, "sde_step")?;
    let mu = step_mean(x_t, t, dt, v_hat, eta)?;
    let mut x_next = mu.clone();
    x_next.axpy(noise_scale(t, dt, eta), eps)?;
    Ok(FlowStep {
        x_t: x_t.clone(),
        t,
        dt,
        eta,
        eps: eps.clone(),
        mu,
        x_next,
    })
}

/// Unnormalised Gaussian log-density `−‖x_next − μ‖²`.
pub fn log_prob(x_next: &Tensor, mu: &Tensor) -> Result<f64> {
    x_next.ensure_same_shape(mu, "log_prob")?;
    Ok(-x_next
        .data()
        .iter()
        .zip(mu.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>())
}

/// Uniform grid `t_j = 1 − j/T`, `j = 0..=T`, with `t_T` exactly zero.
pub fn time_grid(steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::domain("time_grid", "need at least one step"));
    }
    let mut grid: Vec<f64> = (0..=steps).map(|j| 1.0 - j as f64 / steps as f64).collect();
    grid[steps] = 0.0;
    Ok(grid)
}
