//! Affine layers and a small feed-forward network with exact reverse-mode
//! gradients.
//!
//! Inputs are row-major `batch × features` matrices. Weights are stored
//! `out × in`, so a layer computes `X · Wᵀ + b`. Backward passes accumulate
//! into the owning [`ParamStore`]'s gradient buffers, skipping frozen
//! parameters.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::rng::SeededRng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_NET_UID: AtomicU64 = AtomicU64::new(1);

fn next_uid() -> u64 {
    NEXT_NET_UID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation value.
    pub fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let y = pre.tanh();
                1.0 - y * y
            }
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// `y = x · Wᵀ + b` with `W: out × in`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Registers a layer with `N(0, gain²/in)` weights and zero bias.
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        trainable: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let std = gain / (in_dim.max(1) as f64).sqrt();
        let w = rng.normal_tensor(&[out_dim, in_dim]).scale(std);
        Self::from_values(store, prefix, w, Tensor::zeros(&[out_dim]), trainable)
    }

    pub fn from_values(
        store: &mut ParamStore,
        prefix: &str,
        weight: Tensor,
        bias: Tensor,
        trainable: bool,
    ) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::Shape {
                op: "Linear::from_values",
                left: weight.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
        let weight = store.add(format!("{prefix}.weight"), weight, trainable)?;
        let bias = store.add(format!("{prefix}.bias"), bias, trainable)?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.in_dim {
            return Err(Error::Shape {
                op: "Linear::forward",
                left: x.shape().to_vec(),
                right: store.value(self.weight).shape().to_vec(),
            });
        }
        let mut y = x.matmul_nt(store.value(self.weight))?;
        y.add_row_broadcast(store.value(self.bias).data())?;
        Ok(y)
    }

    /// Accumulates parameter gradients and returns `∂L/∂x`.
    pub fn backward(&self, store: &mut ParamStore, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
        if dy.shape() != [x.rows(), self.out_dim] {
            return Err(Error::Shape {
                op: "Linear::backward",
                left: dy.shape().to_vec(),
                right: vec![x.rows(), self.out_dim],
            });
        }
        if store.param(self.weight).trainable {
            let dw = dy.matmul_tn(x)?;
            store.grad_mut(self.weight).axpy(1.0, &dw)?;
        }
        if store.param(self.bias).trainable {
            let db = dy.sum_rows()?;
            for (g, d) in store.grad_mut(self.bias).data_mut().iter_mut().zip(db) {
                *g += d;
            }
        }
        dy.matmul(store.value(self.weight))
    }
}

/// Feed-forward network: affine layers with an activation between them and a
/// linear output layer.
#[derive(Debug, Clone)]
pub struct MlpNet {
    uid: u64,
    widths: Vec<usize>,
    layers: Vec<Linear>,
    activation: Activation,
}

/// Activation record from [`MlpNet::forward`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    net_uid: u64,
    /// Input to each layer.
    inputs: Vec<Tensor>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Tensor>,
    out_shape: Vec<usize>,
}

impl MlpCache {
    pub fn input(&self) -> &Tensor {
        &self.inputs[0]
    }
}

impl MlpNet {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        widths: &[usize],
        activation: Activation,
        trainable: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!(
                "mlp {prefix} needs at least two widths, got {widths:?}"
            )));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (i, w) in widths.windows(2).enumerate() {
            let last = i + 2 == widths.len();
            let gain = if last { 0.5 } else { 1.0 };
            layers.push(Linear::build(
                store,
                &format!("{prefix}.l{i}"),
                w[0],
                w[1],
                gain,
                trainable,
                rng,
            )?);
        }
        Ok(Self {
            uid: next_uid(),
            widths: widths.to_vec(),
            layers,
            activation,
        })
    }

    /// Network from explicit `(weight, bias)` pairs.
    pub fn from_layers(
        store: &mut ParamStore,
        prefix: &str,
        layers: Vec<(Tensor, Tensor)>,
        activation: Activation,
        trainable: bool,
    ) -> Result<Self> {
        let mut built = Vec::with_capacity(layers.len());
        for (i, (w, b)) in layers.into_iter().enumerate() {
            built.push(Linear::from_values(
                store,
                &format!("{prefix}.l{i}"),
                w,
                b,
                trainable,
            )?);
        }
        let mut widths = vec![built.first().map_or(0, |l| l.in_dim)];
        for pair in built.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Shape {
                    op: "MlpNet::from_layers",
                    left: vec![pair[0].out_dim],
                    right: vec![pair[1].in_dim],
                });
            }
        }
        widths.extend(built.iter().map(|l| l.out_dim));
        Ok(Self {
            uid: next_uid(),
            widths,
            layers: built,
            activation,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn in_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    pub fn forward(&self, store: &ParamStore, input: &Tensor) -> Result<(Tensor, MlpCache)> {
        if input.shape().len() != 2 || input.cols() != self.in_dim() {
            return Err(Error::Shape {
                op: "MlpNet::forward",
                left: input.shape().to_vec(),
                right: vec![input.rows(), self.in_dim()],
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len().saturating_sub(1));
        let mut h = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(store, &h)?;
            inputs.push(h);
            if i + 1 < self.layers.len() {
                h = z.map(|v| self.activation.apply(v));
                pre.push(z);
            } else {
                h = z;
            }
        }
        h.ensure_finite("mlp output")?;
        let out_shape = h.shape().to_vec();
        Ok((
            h,
            MlpCache {
                net_uid: self.uid,
                inputs,
                pre,
                out_shape,
            },
        ))
    }

    /// Accumulates parameter gradients into `store` and returns `∂L/∂input`.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &MlpCache,
        grad_out: &Tensor,
    ) -> Result<Tensor> {
        if cache.net_uid != self.uid {
            return Err(Error::StaleCache(format!(
                "cache from network {} used with network {}",
                cache.net_uid, self.uid
            )));
        }
        if grad_out.shape() != cache.out_shape.as_slice() {
            return Err(Error::Shape {
                op: "MlpNet::backward",
                left: grad_out.shape().to_vec(),
                right: cache.out_shape.clone(),
            });
        }
        let mut g = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if i + 1 < self.layers.len() {
                let z = &cache.pre[i];
                for (gv, &zv) in g.data_mut().iter_mut().zip(z.data()) {
                    *gv *= self.activation.derivative(zv);
                }
            }
            g = layer.backward(store, &cache.inputs[i], &g)?;
        }
        Ok(g)
    }
}
