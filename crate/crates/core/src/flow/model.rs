//! Conditional velocity model `v̂_θ(x_t, t, c)`.
//!
//! A condition embedder (plain lookup table or the stacked-channel bridge)
//! produces a vector `c` per prompt; the trunk MLP consumes
//! `[x_t, t, sin 2πt, cos 2πt, c]` per row.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Activation, MlpCache, MlpNet, ParamId, ParamStore, SeededRng, Tensor};
use crate::scb::{ForwardMode, ScbCache, ScbConditioner, ScbSpec};

/// Prompt identity as seen by the model.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Condition {
    pub id: usize,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConditioningSpec {
    /// Trainable embedding row per condition id.
    Table {
        conditions: usize,
        dim: usize,
    },
    Scb(ScbSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub state_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub conditioning: ConditioningSpec,
}

pub const TIME_FEATURES: usize = 3;

pub fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    [t, (TAU * t).sin(), (TAU * t).cos()]
}

#[derive(Debug, Clone)]
pub enum Conditioner {
    Table {
        param: ParamId,
        conditions: usize,
        dim: usize,
    },
    Scb(ScbConditioner),
}

#[derive(Debug, Clone)]
pub enum CondCache {
    Table { id: usize },
    Scb { cache: ScbCache, rows: usize },
}

/// Conditioning vectors for the distinct prompts of a batch.
#[derive(Debug, Clone)]
pub struct CondBatch {
    entries: Vec<(usize, Vec<f64>, CondCache)>,
    row_to_entry: Vec<usize>,
}

impl CondBatch {
    pub fn rows(&self) -> usize {
        self.row_to_entry.len()
    }

    pub fn vector_for_row(&self, row: usize) -> &[f64] {
        &self.entries[self.row_to_entry[row]].1
    }

    /// Condition vectors laid out one per batch row.
    pub fn row_matrix(&self) -> Tensor {
        let dim = self.entries.first().map_or(0, |e| e.1.len());
        let mut data = Vec::with_capacity(self.rows() * dim);
        for &e in &self.row_to_entry {
            data.extend_from_slice(&self.entries[e].1);
        }
        Tensor::matrix(self.rows(), dim, data).expect("consistent widths")
    }
}

#[derive(Debug, Clone)]
pub struct VelocityModel {
    pub spec: ModelSpec,
    pub conditioner: Conditioner,
    pub trunk: MlpNet,
}

impl VelocityModel {
    /// Builds the architecture and a freshly initialised parameter store.
    pub fn build(spec: ModelSpec, rng: &mut SeededRng) -> Result<(Self, ParamStore)> {
        if spec.state_dim == 0 {
            return Err(Error::Config("state_dim must be positive".into()));
        }
        let mut store = ParamStore::new();
        let conditioner = match &spec.conditioning {
            ConditioningSpec::Table { conditions, dim } => {
                let table = rng.normal_tensor(&[*conditions, *dim]);
                let param = store.add("velocity.embed", table, true)?;
                Conditioner::Table {
                    param,
                    conditions: *conditions,
                    dim: *dim,
                }
            }
            ConditioningSpec::Scb(s) => {
                Conditioner::Scb(ScbConditioner::build(&mut store, *s, rng)?)
            }
        };
        let cond_dim = match &conditioner {
            Conditioner::Table { dim, .. } => *dim,
            Conditioner::Scb(s) => s.out_dim(),
        };
        let mut widths = vec![spec.state_dim + TIME_FEATURES + cond_dim];
        widths.extend(&spec.hidden);
        widths.push(spec.state_dim);
        let trunk = MlpNet::build(
            &mut store,
            "velocity.trunk",
            &widths,
            spec.activation,
            true,
            rng,
        )?;
        Ok((
            Self {
                spec,
                conditioner,
                trunk,
            },
            store,
        ))
    }

    pub fn state_dim(&self) -> usize {
        self.spec.state_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.trunk.in_dim() - self.spec.state_dim - TIME_FEATURES
    }

    pub fn condition(
        &self,
        store: &ParamStore,
        cond: &Condition,
        mode: ForwardMode<'_>,
    ) -> Result<(Vec<f64>, CondCache)> {
        match &self.conditioner {
            Conditioner::Table {
                param, conditions, ..
            } => {
                if cond.id >= *conditions {
                    return Err(Error::domain(
                        "VelocityModel::condition",
                        format!("condition {} outside table of {conditions}", cond.id),
                    ));
                }
                Ok((
                    store.value(*param).row(cond.id).to_vec(),
                    CondCache::Table { id: cond.id },
                ))
            }
            Conditioner::Scb(scb) => {
                let (c, cache) = scb.forward(store, &cond.tokens, mode)?;
                let rows = c.rows();
                Ok((c.mean_rows()?, CondCache::Scb { cache, rows }))
            }
        }
    }

    pub fn condition_backward(
        &self,
        store: &mut ParamStore,
        cache: &CondCache,
        d_vec: &[f64],
    ) -> Result<()> {
        match (&self.conditioner, cache) {
            (Conditioner::Table { param, .. }, CondCache::Table { id }) => {
                if store.param(*param).trainable {
                    for (g, d) in store.grad_mut(*param).row_mut(*id).iter_mut().zip(d_vec) {
                        *g += d;
                    }
                }
                Ok(())
            }
            (Conditioner::Scb(scb), CondCache::Scb { cache, rows }) => {
                let share: Vec<f64> = d_vec.iter().map(|v| v / *rows as f64).collect();
                let mut dc = Tensor::zeros(&[*rows, share.len()]);
                dc.add_row_broadcast(&share)?;
                scb.backward(store, cache, &dc)
            }
            _ => Err(Error::StaleCache(
                "conditioning cache does not match model".into(),
            )),
        }
    }

    /// Conditions every distinct prompt once; rows share entries by id.
    pub fn condition_batch(
        &self,
        store: &ParamStore,
        conds: &[&Condition],
        mut mode: ForwardMode<'_>,
    ) -> Result<CondBatch> {
        let mut entries: Vec<(usize, Vec<f64>, CondCache)> = Vec::new();
        let mut row_to_entry = Vec::with_capacity(conds.len());
        for c in conds {
            let idx = match entries.iter().position(|e| e.0 == c.id) {
                Some(i) => i,
                None => {
                    let (v, cache) = self.condition(store, c, mode.reborrow())?;
                    entries.push((c.id, v, cache));
                    entries.len() - 1
                }
            };
            row_to_entry.push(idx);
        }
        Ok(CondBatch {
            entries,
            row_to_entry,
        })
    }

    /// Sums per-row condition gradients by prompt and backpropagates each once.
    pub fn condition_batch_backward(
        &self,
        store: &mut ParamStore,
        batch: &CondBatch,
        d_rows: &Tensor,
    ) -> Result<()> {
        if d_rows.rows() != batch.rows() {
            return Err(Error::Shape {
                op: "condition_batch_backward",
                left: d_rows.shape().to_vec(),
                right: vec![batch.rows()],
            });
        }
        let dim = d_rows.cols();
        let mut sums = vec![vec![0.0; dim]; batch.entries.len()];
        for (row, &e) in batch.row_to_entry.iter().enumerate() {
            for (s, d) in sums[e].iter_mut().zip(d_rows.row(row)) {
                *s += d;
            }
        }
        for ((_, _, cache), d) in batch.entries.iter().zip(&sums) {
            self.condition_backward(store, cache, d)?;
        }
        Ok(())
    }

    /// Trunk input `[x, features(t), c]` per row.
    fn trunk_input(&self, x: &Tensor, t: &[f64], cond_rows: &Tensor) -> Result<Tensor> {
        let n = x.rows();
        if x.shape() != [n, self.state_dim()]
            || t.len() != n
            || cond_rows.shape() != [n, self.cond_dim()]
        {
            return Err(Error::Shape {
                op: "VelocityModel::velocity",
                left: x.shape().to_vec(),
                right: vec![
                    t.len(),
                    self.state_dim(),
                    cond_rows.rows(),
                    cond_rows.cols(),
                ],
            });
        }
        let width = self.trunk.in_dim();
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            data.extend_from_slice(x.row(i));
            data.extend_from_slice(&time_features(t[i]));
            data.extend_from_slice(cond_rows.row(i));
        }
        Tensor::matrix(n, width, data)
    }

    /// `v̂` for `n` rows of states at per-row times and condition vectors.
    pub fn velocity(
        &self,
        store: &ParamStore,
        x: &Tensor,
        t: &[f64],
        cond_rows: &Tensor,
    ) -> Result<(Tensor, MlpCache)> {
        let input = self.trunk_input(x, t, cond_rows)?;
        self.trunk.forward(store, &input)
    }

    /// Accumulates trunk gradients and returns `∂L/∂c` per row.
    pub fn velocity_backward(
        &self,
        store: &mut ParamStore,
        cache: &MlpCache,
        dv: &Tensor,
    ) -> Result<Tensor> {
        let d_in = self.trunk.backward(store, cache, dv)?;
        let sd = self.state_dim();
        let parts = d_in.split_cols(&[sd, TIME_FEATURES, self.cond_dim()])?;
        Ok(parts.into_iter().nth(2).expect("three parts"))
    }
}

/// A model paired with one parameter store.
#[derive(Debug, Clone, Copy)]
pub struct Policy<'a> {
    pub model: &'a VelocityModel,
    pub params: &'a ParamStore,
}

impl<'a> Policy<'a> {
    pub fn new(model: &'a VelocityModel, params: &'a ParamStore) -> Self {
        Self { model, params }
    }

    /// `v̂` for `n` rows sharing one condition vector.
    pub fn velocity_shared(&self, x: &Tensor, t: &[f64], cond: &[f64]) -> Result<Tensor> {
        let n = x.rows();
        let mut rows = Tensor::zeros(&[n, cond.len()]);
        rows.add_row_broadcast(cond)?;
        Ok(self.model.velocity(self.params, x, t, &rows)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_difference_grad_scoped, max_relative_error, FdScope};
    use crate::scb::{ConditioningMode, LoraConfig};

    fn table_spec() -> ModelSpec {
        ModelSpec {
            state_dim: 2,
            hidden: vec![6],
            activation: Activation::Tanh,
            conditioning: ConditioningSpec::Table {
                conditions: 3,
                dim: 2,
            },
        }
    }

    #[test]
    fn shapes_and_determinism() {
        let (model, store) = VelocityModel::build(table_spec(), &mut SeededRng::new(1)).unwrap();
        let c = Condition {
            id: 1,
            tokens: vec![],
        };
        let (cv, _) = model.condition(&store, &c, ForwardMode::Eval).unwrap();
        let x = SeededRng::new(2).normal_tensor(&[4, 2]);
        let p = Policy::new(&model, &store);
        let a = p.velocity_shared(&x, &[0.1, 0.5, 0.9, 1.0], &cv).unwrap();
        let b = p.velocity_shared(&x, &[0.1, 0.5, 0.9, 1.0], &cv).unwrap();
        assert_eq!(a.shape(), &[4, 2]);
        assert_eq!(a, b);
        assert!(model
            .condition(
                &store,
                &Condition {
                    id: 3,
                    tokens: vec![]
                },
                ForwardMode::Eval
            )
            .is_err());
    }

    #[test]
    fn scb_model_gradients_match_finite_differences() {
        let spec = ModelSpec {
            state_dim: 2,
            hidden: vec![4],
            activation: Activation::Tanh,
            conditioning: ConditioningSpec::Scb(ScbSpec {
                vocab: 4,
                width: 3,
                depth: 3,
                think_tokens: 1,
                selected_layers: 2,
                dit_width: 2,
                connector_depth: 1,
                mode: ConditioningMode::Stacked,
                lora: Some(LoraConfig {
                    rank: 1,
                    alpha: 2.0,
                    dropout: 0.0,
                }),
            }),
        };
        let (model, mut store) = VelocityModel::build(spec, &mut SeededRng::new(3)).unwrap();
        let conds = [
            Condition {
                id: 0,
                tokens: vec![0, 1],
            },
            Condition {
                id: 1,
                tokens: vec![2, 3],
            },
        ];
        let rows: Vec<&Condition> = vec![&conds[0], &conds[1], &conds[0]];
        let x = SeededRng::new(4).normal_tensor(&[3, 2]);
        let t = [0.2, 0.6, 0.9];
        let probe = SeededRng::new(5).normal_tensor(&[3, 2]);
        let f = |s: &ParamStore| {
            let cb = model.condition_batch(s, &rows, ForwardMode::Eval).unwrap();
            let (v, _) = model.velocity(s, &x, &t, &cb.row_matrix()).unwrap();
            v.dot(&probe).unwrap()
        };
        store.zero_grad();
        let cb = model
            .condition_batch(&store, &rows, ForwardMode::Eval)
            .unwrap();
        let (_, cache) = model.velocity(&store, &x, &t, &cb.row_matrix()).unwrap();
        let dc = model.velocity_backward(&mut store, &cache, &probe).unwrap();
        model
            .condition_batch_backward(&mut store, &cb, &dc)
            .unwrap();
        let numeric =
            finite_difference_grad_scoped(f, &store, 1e-5, FdScope::TrainableOnly).unwrap();
        let analytic: Vec<f64> = store
            .iter()
            .flat_map(|(_, _, p)| {
                p.grad
                    .data()
                    .iter()
                    .map(move |&g| if p.trainable { g } else { 0.0 })
            })
            .collect();
        let err = max_relative_error(&analytic, &numeric.flat());
        assert!(err < 1e-6, "{err}");
    }
}
