//! Channel-stacking connector: `c = Fuse(Proj(Concat_ch(x₁, …, xₙ)))`.
//!
//! `Proj` is a two-layer MLP from `n·d` to `d_dit`. `Fuse` is a stack of
//! residual mixer blocks, each a token-wise `tanh` layer followed by a
//! sequence-wise layer applied to the row mean and broadcast back. Every row
//! (prompt or think token) is treated the same way.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Activation, Linear, MlpCache, MlpNet, ParamStore, SeededRng, Tensor};

/// How selected hidden states are combined before projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    /// Only the last selected state (the top layer).
    FinalLayer,
    /// Element-wise mean of the selected states.
    AveragePooled,
    /// Channel-wise concatenation of the selected states.
    #[default]
    Stacked,
}

#[derive(Debug, Clone)]
pub struct MixerBlock {
    pub token: Linear,
    pub seq: Linear,
}

#[derive(Debug, Clone)]
pub struct Connector {
    pub mode: ConditioningMode,
    pub layers: usize,
    pub state_width: usize,
    pub dit_width: usize,
    pub projection: MlpNet,
    pub blocks: Vec<MixerBlock>,
}

impl Connector {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        store: &mut ParamStore,
        mode: ConditioningMode,
        layers: usize,
        state_width: usize,
        dit_width: usize,
        depth: usize,
        activation: Activation,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("connector needs at least one layer".into()));
        }
        let in_width = match mode {
            ConditioningMode::Stacked => layers * state_width,
            _ => state_width,
        };
        let projection = MlpNet::build(
            store,
            "connector.proj",
            &[in_width, dit_width, dit_width],
            activation,
            true,
            rng,
        )?;
        let mut blocks = Vec::with_capacity(depth);
        for b in 0..depth {
            let token = Linear::build(
                store,
                &format!("connector.fuse{b}.token"),
                dit_width,
                dit_width,
                0.5,
                true,
                rng,
            )?;
            let seq = Linear::build(
                store,
                &format!("connector.fuse{b}.seq"),
                dit_width,
                dit_width,
                0.5,
                true,
                rng,
            )?;
            blocks.push(MixerBlock { token, seq });
        }
        Ok(Self {
            mode,
            layers,
            state_width,
            dit_width,
            projection,
            blocks,
        })
    }

    pub fn in_width(&self) -> usize {
        self.projection.in_dim()
    }
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Tensor,
    token_pre: Tensor,
    mid: Tensor,
    mean: Tensor,
    seq_pre: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FuseCache {
    count: usize,
    state_shape: Vec<usize>,
    projection: MlpCache,
    blocks: Vec<BlockCache>,
}

fn tanh_grad(pre: f64) -> f64 {
    let t = pre.tanh();
    1.0 - t * t
}

/// Fuses `n` hidden states of shape `rows × d` into the conditioning matrix
/// `rows × d_dit`.
pub fn scb_fuse(
    store: &ParamStore,
    hiddens: &[Tensor],
    conn: &Connector,
) -> Result<(Tensor, FuseCache)> {
    if hiddens.len() != conn.layers {
        return Err(Error::domain(
            "scb_fuse",
            format!(
                "expected {} hidden states, got {}",
                conn.layers,
                hiddens.len()
            ),
        ));
    }
    let first = &hiddens[0];
    for h in hiddens {
        if h.shape() != first.shape() || h.shape().len() != 2 || h.cols() != conn.state_width {
            return Err(Error::Shape {
                op: "scb_fuse",
                left: first.shape().to_vec(),
                right: h.shape().to_vec(),
            });
        }
    }
    let merged = match conn.mode {
        ConditioningMode::Stacked => {
            let refs: Vec<&Tensor> = hiddens.iter().collect();
            Tensor::concat_cols(&refs)?
        }
        ConditioningMode::FinalLayer => hiddens[hiddens.len() - 1].clone(),
        ConditioningMode::AveragePooled => {
            let mut acc = Tensor::zeros(first.shape());
            for h in hiddens {
                acc.axpy(1.0 / hiddens.len() as f64, h)?;
            }
            acc
        }
    };
    let (mut h, projection) = conn.projection.forward(store, &merged)?;
    let mut blocks = Vec::with_capacity(conn.blocks.len());
    let rows = h.rows();
    for block in &conn.blocks {
        let token_pre = block.token.forward(store, &h)?;
        let mut mid = h.clone();
        for (m, &z) in mid.data_mut().iter_mut().zip(token_pre.data()) {
            *m += z.tanh();
        }
        let mean = Tensor::matrix(1, conn.dit_width, mid.mean_rows()?)?;
        let seq_pre = block.seq.forward(store, &mean)?.into_data();
        let add: Vec<f64> = seq_pre.iter().map(|z| z.tanh()).collect();
        let mut out = mid.clone();
        out.add_row_broadcast(&add)?;
        blocks.push(BlockCache {
            input: h,
            token_pre,
            mid,
            mean,
            seq_pre,
        });
        h = out;
    }
    debug_assert_eq!(h.rows(), rows);
    h.ensure_finite("scb_fuse output")?;
    Ok((
        h,
        FuseCache {
            count: hiddens.len(),
            state_shape: first.shape().to_vec(),
            projection,
            blocks,
        },
    ))
}

/// Gradients of the fused output with respect to each input hidden state.
pub fn scb_fuse_backward(
    store: &mut ParamStore,
    conn: &Connector,
    cache: &FuseCache,
    dc: &Tensor,
) -> Result<Vec<Tensor>> {
    if cache.blocks.len() != conn.blocks.len() {
        return Err(Error::StaleCache(
            "fuse cache from a different connector".into(),
        ));
    }
    let mut g = dc.clone();
    for (block, bc) in conn.blocks.iter().zip(&cache.blocks).rev() {
        let rows = bc.mid.rows() as f64;
        let col: Vec<f64> = g
            .sum_rows()?
            .iter()
            .zip(&bc.seq_pre)
            .map(|(s, &z)| s * tanh_grad(z))
            .collect();
        let dmean =
            block
                .seq
                .backward(store, &bc.mean, &Tensor::matrix(1, conn.dit_width, col)?)?;
        let mut dmid = g;
        let share: Vec<f64> = dmean.data().iter().map(|v| v / rows).collect();
        dmid.add_row_broadcast(&share)?;
        let mut dz = dmid.clone();
        for (d, &z) in dz.data_mut().iter_mut().zip(bc.token_pre.data()) {
            *d *= tanh_grad(z);
        }
        let mut dh = block.token.backward(store, &bc.input, &dz)?;
        dh.axpy(1.0, &dmid)?;
        g = dh;
    }
    let dmerged = conn.projection.backward(store, &cache.projection, &g)?;
    match conn.mode {
        ConditioningMode::Stacked => {
            let widths = vec![conn.state_width; cache.count];
            dmerged.split_cols(&widths)
        }
        ConditioningMode::FinalLayer => {
            let mut out = vec![Tensor::zeros(&cache.state_shape); cache.count];
            out[cache.count - 1] = dmerged;
            Ok(out)
        }
        ConditioningMode::AveragePooled => {
            Ok(vec![dmerged.scale(1.0 / cache.count as f64); cache.count])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_difference_grad, max_relative_error};
    use proptest::prelude::*;

    fn connector(
        mode: ConditioningMode,
        n: usize,
        d: usize,
        dit: usize,
        seed: u64,
    ) -> (ParamStore, Connector) {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(seed);
        let c =
            Connector::build(&mut store, mode, n, d, dit, 2, Activation::Tanh, &mut rng).unwrap();
        for (_, p) in store.iter_mut() {
            if p.value.shape().len() == 1 {
                for v in p.value.data_mut() {
                    *v = rng.normal() * 0.2;
                }
            }
        }
        (store, c)
    }

    #[test]
    fn zero_weights_give_equal_rows() {
        let (mut store, conn) = connector(ConditioningMode::Stacked, 3, 4, 5, 1);
        for (name, p) in store.iter_mut() {
            if name.ends_with(".weight") {
                p.value.fill(0.0);
            }
        }
        let hs: Vec<Tensor> = (0..3)
            .map(|i| SeededRng::new(i).normal_tensor(&[6, 4]))
            .collect();
        let (c, _) = scb_fuse(&store, &hs, &conn).unwrap();
        for r in 1..6 {
            assert_eq!(c.row(r), c.row(0));
        }
    }

    #[test]
    fn wrong_count_and_shapes_rejected() {
        let (store, conn) = connector(ConditioningMode::Stacked, 2, 4, 5, 1);
        let a = Tensor::zeros(&[3, 4]);
        assert!(scb_fuse(&store, &[a.clone()], &conn).is_err());
        assert!(scb_fuse(&store, &[a, Tensor::zeros(&[2, 4])], &conn).is_err());
    }

    #[test]
    fn backward_matches_finite_differences_all_modes() {
        for mode in [
            ConditioningMode::Stacked,
            ConditioningMode::AveragePooled,
            ConditioningMode::FinalLayer,
        ] {
            let (mut store, conn) = connector(mode, 3, 2, 3, 5);
            let hs: Vec<Tensor> = (0..3)
                .map(|i| SeededRng::new(40 + i).normal_tensor(&[4, 2]))
                .collect();
            let probe = SeededRng::new(9).normal_tensor(&[4, 3]);
            let f = |s: &ParamStore| scb_fuse(s, &hs, &conn).unwrap().0.dot(&probe).unwrap();
            store.zero_grad();
            let (_, cache) = scb_fuse(&store, &hs, &conn).unwrap();
            let dh = scb_fuse_backward(&mut store, &conn, &cache, &probe).unwrap();
            let numeric = finite_difference_grad(f, &store, 1e-5).unwrap();
            let err = max_relative_error(&store.flat_grads(), &numeric.flat());
            assert!(err < 1e-6, "{mode:?}: param grad error {err}");
            // Input gradients against perturbing the hidden states directly.
            for (k, d) in dh.iter().enumerate() {
                for idx in 0..d.len() {
                    let mut plus = hs.clone();
                    plus[k].data_mut()[idx] += 1e-5;
                    let mut minus = hs.clone();
                    minus[k].data_mut()[idx] -= 1e-5;
                    let fp = scb_fuse(&store, &plus, &conn)
                        .unwrap()
                        .0
                        .dot(&probe)
                        .unwrap();
                    let fm = scb_fuse(&store, &minus, &conn)
                        .unwrap()
                        .0
                        .dot(&probe)
                        .unwrap();
                    let num = (fp - fm) / 2e-5;
                    assert!(
                        (num - d.data()[idx]).abs() < 1e-6,
                        "{mode:?} state {k}[{idx}]"
                    );
                }
            }
        }
    }

    proptest! {
        #[test]
        fn output_shape_ignores_layer_count_and_width(
            n in 1usize..5,
            d in 1usize..6,
            dit in 1usize..6,
            rows in 1usize..9,
            mode_pick in 0usize..3,
            seed in any::<u64>(),
        ) {
            let mode = [ConditioningMode::Stacked, ConditioningMode::AveragePooled, ConditioningMode::FinalLayer][mode_pick];
            let (store, conn) = connector(mode, n, d, dit, seed);
            let mut rng = SeededRng::new(seed ^ 1);
            let hiddens: Vec<Tensor> = (0..n).map(|_| rng.normal_tensor(&[rows, d])).collect();
            let (c, _) = scb_fuse(&store, &hiddens, &conn).unwrap();
            prop_assert_eq!(c.shape(), &[rows, dit]);
            prop_assert!(c.is_finite());
        }
    }
}
