//! Toy layered sequence encoder standing in for a vision-language backbone.
//!
//! Layer ℓ maps `H ↦ H + tanh(H·Wᵀ + b + lora(H) + mean_rows(H)·Uᵀ)`. The
//! row-mean term is the only cross-position interaction, which is enough for
//! appended think tokens to summarise the prompt rows.

use super::lora::{lora_apply, lora_backward, ForwardMode, LoraAdapter, LoraCache, LoraConfig};
use crate::error::{Error, Result};
use crate::numeric::{Linear, ParamId, ParamStore, SeededRng, Tensor};

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub base: Linear,
    pub mix: ParamId,
    pub lora: Option<LoraAdapter>,
}

#[derive(Debug, Clone)]
pub struct LayeredEncoder {
    pub vocab: usize,
    pub width: usize,
    pub embed: ParamId,
    pub layers: Vec<EncoderLayer>,
}

impl LayeredEncoder {
    pub fn build(
        store: &mut ParamStore,
        vocab: usize,
        width: usize,
        depth: usize,
        lora: Option<LoraConfig>,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if depth == 0 || width == 0 || vocab == 0 {
            return Err(Error::Config(
                "encoder needs positive vocab, width and depth".into(),
            ));
        }
        let embed = store.add("encoder.embed", rng.normal_tensor(&[vocab, width]), false)?;
        let mut layers = Vec::with_capacity(depth);
        for l in 1..=depth {
            let base = Linear::build(
                store,
                &format!("encoder.layer{l}"),
                width,
                width,
                1.0,
                false,
                rng,
            )?;
            let mix = rng
                .normal_tensor(&[width, width])
                .scale(0.5 / (width as f64).sqrt());
            let mix = store.add(format!("encoder.layer{l}.mix"), mix, false)?;
            let lora = match lora {
                Some(cfg) => Some(LoraAdapter::build(
                    store,
                    &format!("lora.layer{l}"),
                    width,
                    width,
                    cfg,
                    rng,
                )?),
                None => None,
            };
            layers.push(EncoderLayer { base, mix, lora });
        }
        Ok(Self {
            vocab,
            width,
            embed,
            layers,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Token embedding lookup, `L × d`.
    pub fn embed(&self, store: &ParamStore, tokens: &[usize]) -> Result<Tensor> {
        let table = store.value(self.embed);
        let mut data = Vec::with_capacity(tokens.len() * self.width);
        for &tok in tokens {
            if tok >= self.vocab {
                return Err(Error::domain(
                    "LayeredEncoder::embed",
                    format!("token {tok} outside vocabulary of {}", self.vocab),
                ));
            }
            data.extend_from_slice(table.row(tok));
        }
        Tensor::matrix(tokens.len(), self.width, data)
    }

    /// Scatters row gradients back into the (usually frozen) embedding table.
    pub fn embed_backward(
        &self,
        store: &mut ParamStore,
        tokens: &[usize],
        d_rows: &Tensor,
    ) -> Result<()> {
        if !store.param(self.embed).trainable {
            return Ok(());
        }
        let grad = store.grad_mut(self.embed);
        for (i, &tok) in tokens.iter().enumerate() {
            for (g, d) in grad.row_mut(tok).iter_mut().zip(d_rows.row(i)) {
                *g += d;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    inputs: Vec<Tensor>,
    means: Vec<Vec<f64>>,
    lora: Vec<LoraCache>,
    pre: Vec<Tensor>,
    shape: Vec<usize>,
}

/// Runs every layer and returns all `D` hidden states; state ℓ−1 in the
/// returned list is the output of layer ℓ.
pub fn encode_all_layers(
    store: &ParamStore,
    enc: &LayeredEncoder,
    seq: &Tensor,
    mut mode: ForwardMode<'_>,
) -> Result<(Vec<Tensor>, EncoderCache)> {
    if seq.shape().len() != 2 || seq.cols() != enc.width {
        return Err(Error::Shape {
            op: "encode_all_layers",
            left: seq.shape().to_vec(),
            right: vec![seq.rows(), enc.width],
        });
    }
    let d = enc.depth();
    let mut states = Vec::with_capacity(d);
    let mut cache = EncoderCache {
        inputs: Vec::with_capacity(d),
        means: Vec::with_capacity(d),
        lora: Vec::with_capacity(d),
        pre: Vec::with_capacity(d),
        shape: seq.shape().to_vec(),
    };
    let mut h = seq.clone();
    for layer in &enc.layers {
        let (mut z, lc) = lora_apply(store, &layer.base, layer.lora.as_ref(), &h, mode.reborrow())?;
        let mean = h.mean_rows()?;
        let mixed =
            Tensor::matrix(1, enc.width, mean.clone())?.matmul_nt(store.value(layer.mix))?;
        z.add_row_broadcast(mixed.data())?;
        let mut out = h.clone();
        for (o, &zv) in out.data_mut().iter_mut().zip(z.data()) {
            *o += zv.tanh();
        }
        cache.inputs.push(h);
        cache.means.push(mean);
        cache.lora.push(lc);
        cache.pre.push(z);
        states.push(out.clone());
        h = out;
    }
    Ok((states, cache))
}

/// Backpropagates gradients arriving at any subset of hidden states
/// (`d_states[ℓ−1]` for layer ℓ) down to the encoder input.
pub fn encoder_backward(
    store: &mut ParamStore,
    enc: &LayeredEncoder,
    cache: &EncoderCache,
    d_states: &[Option<Tensor>],
) -> Result<Tensor> {
    if d_states.len() != enc.depth() || cache.inputs.len() != enc.depth() {
        return Err(Error::StaleCache(format!(
            "expected {} layer gradients, got {}",
            enc.depth(),
            d_states.len()
        )));
    }
    let mut g = Tensor::zeros(&cache.shape);
    for (l, layer) in enc.layers.iter().enumerate().rev() {
        if let Some(ds) = &d_states[l] {
            g.axpy(1.0, ds)?;
        }
        let z = &cache.pre[l];
        let mut dz = g.clone();
        for (dv, &zv) in dz.data_mut().iter_mut().zip(z.data()) {
            let t = zv.tanh();
            *dv *= 1.0 - t * t;
        }
        // Row-mean mixing: z_i += mean · Uᵀ.
        let dz_sum = dz.sum_rows()?;
        if store.param(layer.mix).trainable {
            let du = Tensor::matrix(enc.width, 1, dz_sum.clone())?.matmul(&Tensor::matrix(
                1,
                enc.width,
                cache.means[l].clone(),
            )?)?;
            store.grad_mut(layer.mix).axpy(1.0, &du)?;
        }
        let dmean = Tensor::matrix(1, enc.width, dz_sum)?.matmul(store.value(layer.mix))?;
        let rows = z.rows() as f64;
        let mut dh = lora_backward(store, &layer.base, layer.lora.as_ref(), &cache.lora[l], &dz)?;
        let share: Vec<f64> = dmean.data().iter().map(|v| v / rows).collect();
        dh.add_row_broadcast(&share)?;
        // Residual path.
        dh.axpy(1.0, &g)?;
        g = dh;
    }
    Ok(g)
}
