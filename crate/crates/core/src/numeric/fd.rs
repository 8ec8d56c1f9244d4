//! Central finite differences, the gradient oracle for every backward pass in
//! the crate.

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdScope {
    All,
    TrainableOnly,
}

/// Numerical gradients aligned with the store's parameter order.
#[derive(Debug, Clone)]
pub struct FdGrads {
    pub grads: Vec<Tensor>,
}

impl FdGrads {
    pub fn flat(&self) -> Vec<f64> {
        self.grads
            .iter()
            .flat_map(|g| g.data().iter().copied())
            .collect()
    }
}

/// `(f(θ + h·eᵢ) − f(θ − h·eᵢ)) / 2h` for every scalar parameter.
///
/// `f` must be deterministic in the parameters; fix all randomness first.
pub fn finite_difference_grad(
    f: impl FnMut(&ParamStore) -> f64,
    params: &ParamStore,
    step: f64,
) -> Result<FdGrads> {
    finite_difference_grad_scoped(f, params, step, FdScope::All)
}

/// Like [`finite_difference_grad`]; entries outside `scope` are left at zero.
pub fn finite_difference_grad_scoped(
    mut f: impl FnMut(&ParamStore) -> f64,
    params: &ParamStore,
    step: f64,
    scope: FdScope,
) -> Result<FdGrads> {
    if !(step > 0.0) {
        return Err(Error::domain(
            "finite_difference_grad",
            "step must be positive",
        ));
    }
    let mut probe = params.clone();
    let mut grads = Vec::with_capacity(params.len());
    let ids: Vec<_> = params.iter().map(|(id, _, p)| (id, p.trainable)).collect();
    for (id, trainable) in ids {
        let mut g = Tensor::zeros(params.value(id).shape());
        if scope == FdScope::All || trainable {
            for k in 0..g.len() {
                let orig = probe.value(id).data()[k];
                probe.value_mut(id).data_mut()[k] = orig + step;
                let up = f(&probe);
                probe.value_mut(id).data_mut()[k] = orig - step;
                let down = f(&probe);
                probe.value_mut(id).data_mut()[k] = orig;
                if !up.is_finite() || !down.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "objective at probe of {}[{k}]",
                        params.name(id)
                    )));
                }
                g.data_mut()[k] = (up - down) / (2.0 * step);
            }
        }
        grads.push(g);
    }
    Ok(FdGrads { grads })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(vec![3.0]), true).unwrap();
        let g = finite_difference_grad(|p| p.flat_values()[0].powi(2), &s, 1e-5).unwrap();
        assert!((g.flat()[0] - 6.0).abs() <= 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(vec![1.0, -2.0, 0.5]), true)
            .unwrap();
        let g = finite_difference_grad(|_| 4.2, &s, 1e-5).unwrap();
        assert!(g.flat().iter().all(|v| v.abs() <= 1e-9));
    }

    #[test]
    fn non_finite_probe_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(vec![0.0]), true).unwrap();
        let r = finite_difference_grad(|p| 1.0 / p.flat_values()[0].max(0.0), &s, 1e-5);
        // f(−h) = 1/0 = inf
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn scope_skips_frozen() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::vector(vec![1.0]), true).unwrap();
        s.add("b", Tensor::vector(vec![1.0]), false).unwrap();
        let g = finite_difference_grad_scoped(
            |p| p.flat_values().iter().map(|v| v * v).sum(),
            &s,
            1e-5,
            FdScope::TrainableOnly,
        )
        .unwrap();
        assert!((g.flat()[0] - 2.0).abs() < 1e-8);
        assert_eq!(g.flat()[1], 0.0);
    }
}
