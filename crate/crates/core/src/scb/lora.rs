//! Low-rank adapters on frozen affine maps.
//!
//! `y = x·Wᵀ + b + (α/r)·dropout(x)·downᵀ·upᵀ`, with `up` zero-initialised so
//! a fresh adapter leaves the base output unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Linear, ParamId, ParamStore, SeededRng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    /// Rank 64, α 128, dropout 0.05.
    fn default() -> Self {
        Self {
            rank: 64,
            alpha: 128.0,
            dropout: 0.05,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Whether stochastic layers (adapter dropout) are active.
#[derive(Debug)]
pub enum ForwardMode<'a> {
    Eval,
    Train(&'a mut SeededRng),
}

impl ForwardMode<'_> {
    pub fn reborrow(&mut self) -> ForwardMode<'_> {
        match self {
            ForwardMode::Eval => ForwardMode::Eval,
            ForwardMode::Train(rng) => ForwardMode::Train(rng),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub config: LoraConfig,
    pub down: ParamId,
    pub up: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LoraAdapter {
    /// `down: r×in` Gaussian with std 1/√in, `up: out×r` zeros.
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        config: LoraConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if config.rank == 0 || config.rank > in_dim.min(out_dim) {
            return Err(Error::domain(
                "LoraAdapter::build",
                format!(
                    "rank {} must be in 1..={} for a {out_dim}×{in_dim} map",
                    config.rank,
                    in_dim.min(out_dim)
                ),
            ));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::domain(
                "LoraAdapter::build",
                "dropout must be in [0, 1)",
            ));
        }
        let down = rng
            .normal_tensor(&[config.rank, in_dim])
            .scale(1.0 / (in_dim as f64).sqrt());
        let down = store.add(format!("{prefix}.down"), down, true)?;
        let up = store.add(
            format!("{prefix}.up"),
            Tensor::zeros(&[out_dim, config.rank]),
            true,
        )?;
        Ok(Self {
            config,
            down,
            up,
            in_dim,
            out_dim,
        })
    }

    pub fn scale(&self) -> f64 {
        self.config.scale()
    }
}

#[derive(Debug, Clone)]
pub struct LoraCache {
    input: Tensor,
    /// Dropout-masked, rescaled input fed to the adapter path (None without adapter).
    dropped: Option<Tensor>,
    /// `dropped · downᵀ`
    hidden: Option<Tensor>,
    mask: Option<Vec<f64>>,
}

/// Base affine map plus optional adapter.
pub fn lora_apply(
    store: &ParamStore,
    base: &Linear,
    adapter: Option<&LoraAdapter>,
    input: &Tensor,
    mode: ForwardMode<'_>,
) -> Result<(Tensor, LoraCache)> {
    let mut y = base.forward(store, input)?;
    let Some(ad) = adapter else {
        return Ok((
            y,
            LoraCache {
                input: input.clone(),
                dropped: None,
                hidden: None,
                mask: None,
            },
        ));
    };
    if ad.in_dim != base.in_dim || ad.out_dim != base.out_dim {
        return Err(Error::Shape {
            op: "lora_apply",
            left: vec![ad.out_dim, ad.in_dim],
            right: vec![base.out_dim, base.in_dim],
        });
    }
    let (dropped, mask) = match mode {
        ForwardMode::Train(rng) if ad.config.dropout > 0.0 => {
            let keep = 1.0 - ad.config.dropout;
            let mask: Vec<f64> = (0..input.len())
                .map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
                .collect();
            let mut d = input.clone();
            for (v, m) in d.data_mut().iter_mut().zip(&mask) {
                *v *= m;
            }
            (d, Some(mask))
        }
        _ => (input.clone(), None),
    };
    let hidden = dropped.matmul_nt(store.value(ad.down))?;
    let delta = hidden.matmul_nt(store.value(ad.up))?;
    y.axpy(ad.scale(), &delta)?;
    Ok((
        y,
        LoraCache {
            input: input.clone(),
            dropped: Some(dropped),
            hidden: Some(hidden),
            mask,
        },
    ))
}

/// Accumulates gradients for the base map (when trainable) and the adapter,
/// returning `∂L/∂input`.
pub fn lora_backward(
    store: &mut ParamStore,
    base: &Linear,
    adapter: Option<&LoraAdapter>,
    cache: &LoraCache,
    dy: &Tensor,
) -> Result<Tensor> {
    let mut dx = base.backward(store, &cache.input, dy)?;
    let (Some(ad), Some(dropped), Some(hidden)) = (adapter, &cache.dropped, &cache.hidden) else {
        return Ok(dx);
    };
    let s = ad.scale();
    if store.param(ad.up).trainable {
        let dup = dy.matmul_tn(hidden)?.scale(s);
        store.grad_mut(ad.up).axpy(1.0, &dup)?;
    }
    let dhidden = dy.matmul(store.value(ad.up))?.scale(s);
    if store.param(ad.down).trainable {
        let ddown = dhidden.matmul_tn(dropped)?;
        store.grad_mut(ad.down).axpy(1.0, &ddown)?;
    }
    let mut ddropped = dhidden.matmul(store.value(ad.down))?;
    if let Some(mask) = &cache.mask {
        for (g, m) in ddropped.data_mut().iter_mut().zip(mask) {
            *g *= m;
        }
    }
    dx.axpy(1.0, &ddropped)?;
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{
        finite_difference_grad_scoped, max_relative_error, AdamW, AdamWConfig, FdScope,
    };
    use proptest::prelude::*;

    fn setup(rank: usize, dim: usize, seed: u64) -> (ParamStore, Linear, LoraAdapter) {
        let mut rng = SeededRng::new(seed);
        let mut store = ParamStore::new();
        let base = Linear::build(&mut store, "base", dim, dim, 1.0, false, &mut rng).unwrap();
        let cfg = LoraConfig {
            rank,
            alpha: 2.0 * rank as f64,
            dropout: 0.05,
        };
        let ad = LoraAdapter::build(&mut store, "lora", dim, dim, cfg, &mut rng).unwrap();
        (store, base, ad)
    }

    #[test]
    fn zero_init_is_exact_noop() {
        let (store, base, ad) = setup(4, 8, 1);
        let x = SeededRng::new(2).normal_tensor(&[5, 8]);
        let plain = base.forward(&store, &x).unwrap();
        let mut rng = SeededRng::new(3);
        let (with, _) =
            lora_apply(&store, &base, Some(&ad), &x, ForwardMode::Train(&mut rng)).unwrap();
        assert_eq!(plain, with);
    }

    #[test]
    fn table_default_scale_is_two() {
        assert_eq!(LoraConfig::default().scale(), 2.0);
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(0);
        let ad =
            LoraAdapter::build(&mut store, "l", 128, 128, LoraConfig::default(), &mut rng).unwrap();
        assert_eq!(ad.scale(), 2.0);
    }

    #[test]
    fn rank_above_min_dimension_rejected() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(0);
        let r = LoraAdapter::build(&mut store, "l", 16, 32, LoraConfig::default(), &mut rng);
        assert!(r.is_err());
    }

    #[test]
    fn only_adapter_moves_when_base_frozen() {
        let (mut store, base, ad) = setup(2, 4, 9);
        // Make `up` non-zero so both adapter factors receive gradient.
        for v in store.value_mut(ad.up).data_mut() {
            *v = 0.1;
        }
        let x = SeededRng::new(5).normal_tensor(&[3, 4]);
        let probe = SeededRng::new(6).normal_tensor(&[3, 4]);
        let f = |s: &ParamStore| {
            let (y, _) = lora_apply(s, &base, Some(&ad), &x, ForwardMode::Eval).unwrap();
            y.dot(&probe).unwrap()
        };
        store.zero_grad();
        let (_, cache) = lora_apply(&store, &base, Some(&ad), &x, ForwardMode::Eval).unwrap();
        lora_backward(&mut store, &base, Some(&ad), &cache, &probe).unwrap();
        let numeric =
            finite_difference_grad_scoped(f, &store, 1e-5, FdScope::TrainableOnly).unwrap();
        assert!(max_relative_error(&store.flat_grads(), &numeric.flat()) < 1e-6);
        // Base entries carry no gradient, so an optimizer step leaves them bit-identical.
        let before_w = store.value(base.weight).clone();
        let before_b = store.value(base.bias).clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.step(&mut store, 1e-2).unwrap();
        assert_eq!(&before_w, store.value(base.weight));
        assert_eq!(&before_b, store.value(base.bias));
        assert!(store.grad(base.weight).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn dropout_backward_matches_fixed_mask() {
        let (mut store, base, ad) = setup(2, 4, 11);
        for v in store.value_mut(ad.up).data_mut() {
            *v = -0.2;
        }
        let x = SeededRng::new(5).normal_tensor(&[6, 4]);
        let probe = SeededRng::new(6).normal_tensor(&[6, 4]);
        let f = |s: &ParamStore| {
            let mut rng = SeededRng::new(77);
            let (y, _) = lora_apply(s, &base, Some(&ad), &x, ForwardMode::Train(&mut rng)).unwrap();
            y.dot(&probe).unwrap()
        };
        store.zero_grad();
        let mut rng = SeededRng::new(77);
        let (_, cache) =
            lora_apply(&store, &base, Some(&ad), &x, ForwardMode::Train(&mut rng)).unwrap();
        lora_backward(&mut store, &base, Some(&ad), &cache, &probe).unwrap();
        let numeric =
            finite_difference_grad_scoped(f, &store, 1e-5, FdScope::TrainableOnly).unwrap();
        assert!(max_relative_error(&store.flat_grads(), &numeric.flat()) < 1e-6);
    }

    proptest! {
        #[test]
        fn fresh_adapter_is_a_no_op(rank in 1usize..4, dim in 4usize..9, seed in any::<u64>(), rows in 1usize..5) {
            let (store, base, ad) = setup(rank, dim, seed);
            let x = SeededRng::new(seed ^ 7).normal_tensor(&[rows, dim]);
            let plain = base.forward(&store, &x).unwrap();
            let (y, _) = lora_apply(&store, &base, Some(&ad), &x, ForwardMode::Eval).unwrap();
            prop_assert_eq!(y, plain);
        }
    }
}
