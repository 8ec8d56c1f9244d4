//! Stacked channel bridging at toy scale.
//!
//! A prompt's token rows get `m` learnable think tokens appended, pass
//! through a layered encoder, and `n` uniformly spaced hidden states are
//! stacked along channels, projected, and fused into the conditioning matrix
//! `c ∈ ℝ^{(L+m)×d_dit}`. The row mean of `c` is the condition vector handed
//! to the velocity trunk.

pub mod connector;
pub mod encoder;
pub mod lora;

use serde::{Deserialize, Serialize};

pub use connector::{scb_fuse, scb_fuse_backward, ConditioningMode, Connector, FuseCache};
pub use encoder::{encode_all_layers, encoder_backward, EncoderCache, LayeredEncoder};
pub use lora::{lora_apply, lora_backward, ForwardMode, LoraAdapter, LoraCache, LoraConfig};

use crate::error::{Error, Result};
use crate::numeric::{Activation, ParamId, ParamStore, SeededRng, Tensor};

/// Token rows, marked once think tokens have been appended.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub rows: Tensor,
    pub think_rows: usize,
}

impl TokenSequence {
    pub fn new(rows: Tensor) -> Self {
        Self {
            rows,
            think_rows: 0,
        }
    }

    pub fn has_think_tokens(&self) -> bool {
        self.think_rows > 0
    }
}

#[derive(Debug, Clone)]
pub struct ThinkTokens {
    pub param: ParamId,
    pub count: usize,
    pub width: usize,
}

impl ThinkTokens {
    pub fn build(
        store: &mut ParamStore,
        count: usize,
        width: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if count == 0 {
            return Err(Error::domain(
                "ThinkTokens::build",
                "at least one think token required",
            ));
        }
        let values = rng.normal_tensor(&[count, width]).scale(0.5);
        let param = store.add("think_tokens", values, true)?;
        Ok(Self {
            param,
            count,
            width,
        })
    }
}

/// Appends think-token rows after the sequence; the original rows are kept.
pub fn inject_think_tokens(seq: &TokenSequence, tokens: &Tensor) -> Result<TokenSequence> {
    if seq.has_think_tokens() {
        return Err(Error::domain(
            "inject_think_tokens",
            "sequence already carries think tokens",
        ));
    }
    if tokens.shape().len() != 2 || tokens.rows() == 0 {
        return Err(Error::domain(
            "inject_think_tokens",
            "need at least one think token row",
        ));
    }
    if tokens.cols() != seq.rows.cols() {
        return Err(Error::Shape {
            op: "inject_think_tokens",
            left: seq.rows.shape().to_vec(),
            right: tokens.shape().to_vec(),
        });
    }
    Ok(TokenSequence {
        rows: Tensor::concat_rows(&[&seq.rows, tokens])?,
        think_rows: tokens.rows(),
    })
}

/// Strictly increasing 1-based layer indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub indices: Vec<usize>,
}

/// `⌈i·D/n⌉` for `i = 1..=n`; always ends at the top layer.
pub fn select_layers(depth: usize, n: usize) -> Result<LayerSelection> {
    if n == 0 || n > depth {
        return Err(Error::domain(
            "select_layers",
            format!("need 1 ≤ n ≤ D, got n={n}, D={depth}"),
        ));
    }
    let indices = (1..=n).map(|i| (i * depth).div_ceil(n)).collect();
    Ok(LayerSelection { indices })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScbSpec {
    pub vocab: usize,
    pub width: usize,
    pub depth: usize,
    pub think_tokens: usize,
    pub selected_layers: usize,
    pub dit_width: usize,
    pub connector_depth: usize,
    pub mode: ConditioningMode,
    pub lora: Option<LoraConfig>,
}

#[derive(Debug, Clone)]
pub struct ScbConditioner {
    pub spec: ScbSpec,
    pub encoder: LayeredEncoder,
    pub think: ThinkTokens,
    pub selection: LayerSelection,
    pub connector: Connector,
}

#[derive(Debug, Clone)]
pub struct ScbCache {
    tokens: Vec<usize>,
    encoder: EncoderCache,
    fuse: FuseCache,
    rows: usize,
}

impl ScbConditioner {
    pub fn build(store: &mut ParamStore, spec: ScbSpec, rng: &mut SeededRng) -> Result<Self> {
        let encoder =
            LayeredEncoder::build(store, spec.vocab, spec.width, spec.depth, spec.lora, rng)?;
        let think = ThinkTokens::build(store, spec.think_tokens, spec.width, rng)?;
        let selection = select_layers(spec.depth, spec.selected_layers)?;
        let connector = Connector::build(
            store,
            spec.mode,
            spec.selected_layers,
            spec.width,
            spec.dit_width,
            spec.connector_depth,
            Activation::Tanh,
            rng,
        )?;
        Ok(Self {
            spec,
            encoder,
            think,
            selection,
            connector,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.spec.dit_width
    }

    /// Full conditioning matrix `(L+m) × d_dit` for a prompt's tokens.
    pub fn forward(
        &self,
        store: &ParamStore,
        tokens: &[usize],
        mut mode: ForwardMode<'_>,
    ) -> Result<(Tensor, ScbCache)> {
        let seq = TokenSequence::new(self.encoder.embed(store, tokens)?);
        let seq = inject_think_tokens(&seq, store.value(self.think.param))?;
        let (states, encoder) =
            encode_all_layers(store, &self.encoder, &seq.rows, mode.reborrow())?;
        let picked: Vec<Tensor> = self
            .selection
            .indices
            .iter()
            .map(|&l| states[l - 1].clone())
            .collect();
        let (c, fuse) = scb_fuse(store, &picked, &self.connector)?;
        Ok((
            c,
            ScbCache {
                tokens: tokens.to_vec(),
                encoder,
                fuse,
                rows: seq.rows.rows(),
            },
        ))
    }

    /// Backpropagates `∂L/∂c` through connector, encoder and think tokens.
    pub fn backward(&self, store: &mut ParamStore, cache: &ScbCache, dc: &Tensor) -> Result<()> {
        let d_picked = scb_fuse_backward(store, &self.connector, &cache.fuse, dc)?;
        let mut d_states: Vec<Option<Tensor>> = vec![None; self.encoder.depth()];
        for (&l, d) in self.selection.indices.iter().zip(d_picked) {
            match &mut d_states[l - 1] {
                Some(acc) => acc.axpy(1.0, &d)?,
                slot => *slot = Some(d),
            }
        }
        let dx = encoder_backward(store, &self.encoder, &cache.encoder, &d_states)?;
        let prompt_rows = cache.rows - self.think.count;
        if store.param(self.think.param).trainable {
            let d_think = dx.slice_rows(prompt_rows, cache.rows)?;
            store.grad_mut(self.think.param).axpy(1.0, &d_think)?;
        }
        let d_prompt = dx.slice_rows(0, prompt_rows)?;
        self.encoder.embed_backward(store, &cache.tokens, &d_prompt)
    }
}
