//! Run configuration: a TOML document with one section per concern.
//!
//! The `[run] preset` key picks a base document (`paper` or `desk`); keys
//! present in the user's file override it table by table.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::task::ToyTaskSpec;
use crate::data::Stage;
use crate::error::{Error, Result};
use crate::flow::{ConditioningSpec, ModelSpec};
use crate::grpo::{GrpoConfig, NormalizationMode};
use crate::numeric::{Activation, AdamWConfig, LrSchedule, LrScheduler};
use crate::scb::{ConditioningMode, LoraConfig, ScbSpec};

const DESK_PRESET: &str = include_str!("../../presets/desk.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Paper,
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    NoSftAux,
    NoVelocityKl,
    NoRewardwiseNorm,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoSftAux,
        Variant::NoVelocityKl,
        Variant::NoRewardwiseNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSftAux => "no_sft_aux",
            Variant::NoVelocityKl => "no_velocity_kl",
            Variant::NoRewardwiseNorm => "no_rewardwise_norm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }

    /// The RL settings with this variant's component removed.
    pub fn apply(self, cfg: &GrpoConfig) -> GrpoConfig {
        let mut c = cfg.clone();
        match self {
            Variant::Full => {}
            Variant::NoSftAux => c.sft_aux_coeff = 0.0,
            Variant::NoVelocityKl => c.kl_coeff = 0.0,
            Variant::NoRewardwiseNorm => c.normalization = NormalizationMode::Joint,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub preset: Preset,
    pub seed: u64,
    pub stage: Stage,
    pub out_dir: PathBuf,
    pub variant: Variant,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            preset: Preset::Paper,
            seed: 0,
            stage: Stage::Rl,
            out_dir: PathBuf::from("runs/default"),
            variant: Variant::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningKind {
    /// A learned embedding per prompt.
    Table,
    #[default]
    Stacked,
    FinalLayer,
    AveragePooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub conditioning: ConditioningKind,
    pub table_dim: usize,
    pub encoder_width: usize,
    pub encoder_depth: usize,
    pub selected_layers: usize,
    pub think_tokens: usize,
    pub dit_width: usize,
    pub connector_depth: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let lora = LoraConfig::default();
        Self {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            conditioning: ConditioningKind::Stacked,
            table_dim: 8,
            encoder_width: 128,
            encoder_depth: 24,
            selected_layers: 6,
            think_tokens: 128,
            dit_width: 128,
            connector_depth: 1,
            lora_rank: lora.rank,
            lora_alpha: lora.alpha,
            lora_dropout: lora.dropout,
        }
    }
}

/// Optimizer settings of the supervised stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftSection {
    pub learning_rate: f64,
    pub lr_scheduler: LrScheduler,
    pub weight_decay: f64,
    pub gradient_norm_clip: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub log_interval: usize,
}

impl Default for SftSection {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            lr_scheduler: LrScheduler::Cosine,
            weight_decay: 0.05,
            gradient_norm_clip: 1.0,
            warmup_ratio: 0.01,
            batch_size: 768,
            steps: 400_000,
            log_interval: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlSection {
    pub group_size: usize,
    pub denoise_steps: usize,
    pub sde_eta: f64,
    pub timestep_fraction: f64,
    pub learning_rate: f64,
    pub total_training_steps: usize,
    pub kl_coeff: f64,
    pub clip_range: f64,
    pub sft_aux_coeff: f64,
    /// Trajectories per step, across all prompts.
    pub global_batch_size: usize,
    pub sft_batch_size: usize,
    pub normalization: NormalizationMode,
    pub weight_decay: f64,
    pub gradient_norm_clip: f64,
}

impl Default for RlSection {
    fn default() -> Self {
        let g = GrpoConfig::default();
        Self {
            group_size: g.group_size,
            denoise_steps: g.denoise_steps,
            sde_eta: g.sde_eta,
            timestep_fraction: g.timestep_fraction,
            learning_rate: 2e-6,
            total_training_steps: 1500,
            kl_coeff: g.kl_coeff,
            clip_range: g.clip_range,
            sft_aux_coeff: g.sft_aux_coeff,
            global_batch_size: 256,
            sft_batch_size: 64,
            normalization: g.normalization,
            weight_decay: 0.0,
            gradient_norm_clip: 1.0,
        }
    }
}

impl RlSection {
    pub fn grpo(&self) -> GrpoConfig {
        GrpoConfig {
            group_size: self.group_size,
            denoise_steps: self.denoise_steps,
            sde_eta: self.sde_eta,
            timestep_fraction: self.timestep_fraction,
            clip_range: self.clip_range,
            kl_coeff: self.kl_coeff,
            sft_aux_coeff: self.sft_aux_coeff,
            normalization: self.normalization,
        }
    }

    pub fn prompts_per_step(&self) -> usize {
        (self.global_batch_size / self.group_size.max(1)).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// RL steps between evaluations; 0 evaluates only at start and end.
    pub interval: usize,
    pub samples_per_prompt: usize,
    pub fm_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            interval: 50,
            samples_per_prompt: 50,
            fm_samples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub task: ToyTaskSpec,
    pub model: ModelSection,
    pub sft: SftSection,
    pub rl: RlSection,
    pub eval: EvalSection,
}

/// Recursive table merge: scalars and arrays in `over` replace those in `base`.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn preset_of(doc: &toml::Value) -> Result<Preset> {
    match doc.get("run").and_then(|r| r.get("preset")) {
        None => Ok(Preset::Paper),
        Some(v) => v
            .clone()
            .try_into()
            .map_err(|e| Error::Config(format!("run.preset: {e}"))),
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        Self::from_toml_str(&format!("[run]\npreset = \"{}\"\n", preset_name(preset)))
            .expect("built-in preset parses")
    }

    pub fn desk() -> Self {
        Self::preset(Preset::Desk)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut doc = match preset_of(&user)? {
            Preset::Paper => toml::Value::Table(Default::default()),
            Preset::Desk => toml::from_str(DESK_PRESET)
                .map_err(|e| Error::Config(format!("desk preset: {e}")))?,
        };
        merge(&mut doc, user);
        let cfg: RunConfig = doc.try_into().map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// The fully resolved document; loading it yields `self` again.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.task.validate()?;
        self.rl.grpo().validate()?;
        self.model_spec()?;
        if !(self.sft.learning_rate >= 0.0 && self.rl.learning_rate >= 0.0) {
            return bad("learning rates must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.sft.warmup_ratio) {
            return bad(format!(
                "warmup_ratio {} outside [0, 1)",
                self.sft.warmup_ratio
            ));
        }
        if self.sft.batch_size == 0 || self.rl.sft_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.rl.global_batch_size < self.rl.group_size {
            return bad(format!(
                "global_batch_size {} smaller than one group of {}",
                self.rl.global_batch_size, self.rl.group_size
            ));
        }
        if self.rl.global_batch_size % self.rl.group_size != 0 {
            return bad("global_batch_size must be a multiple of group_size".into());
        }
        if !(self.sft.gradient_norm_clip > 0.0 && self.rl.gradient_norm_clip > 0.0) {
            return bad("gradient_norm_clip must be positive".into());
        }
        if self.eval.samples_per_prompt < 1 || self.eval.fm_samples < 1 {
            return bad("evaluation sizes must be positive".into());
        }
        Ok(())
    }

    /// RL settings after the ablation variant has been applied.
    pub fn grpo(&self) -> GrpoConfig {
        self.run.variant.apply(&self.rl.grpo())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let task = super::task::ToyTask::build(&self.task)?;
        let m = &self.model;
        let mode = match m.conditioning {
            ConditioningKind::Table => {
                return Ok(ModelSpec {
                    state_dim: task.state_dim(),
                    hidden: m.hidden.clone(),
                    activation: m.activation,
                    conditioning: ConditioningSpec::Table {
                        conditions: task.num_conditions(),
                        dim: m.table_dim,
                    },
                })
            }
            ConditioningKind::Stacked => ConditioningMode::Stacked,
            ConditioningKind::FinalLayer => ConditioningMode::FinalLayer,
            ConditioningKind::AveragePooled => ConditioningMode::AveragePooled,
        };
        if m.selected_layers == 0 || m.selected_layers > m.encoder_depth {
            return Err(Error::Config(format!(
                "selected_layers {} must be in 1..={}",
                m.selected_layers, m.encoder_depth
            )));
        }
        Ok(ModelSpec {
            state_dim: task.state_dim(),
            hidden: m.hidden.clone(),
            activation: m.activation,
            conditioning: ConditioningSpec::Scb(ScbSpec {
                vocab: task.vocab(),
                width: m.encoder_width,
                depth: m.encoder_depth,
                think_tokens: m.think_tokens,
                selected_layers: m.selected_layers,
                dit_width: m.dit_width,
                connector_depth: m.connector_depth,
                mode,
                lora: (m.lora_rank > 0).then_some(LoraConfig {
                    rank: m.lora_rank,
                    alpha: m.lora_alpha,
                    dropout: m.lora_dropout,
                }),
            }),
        })
    }

    pub fn sft_optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.sft.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn rl_optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.rl.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn sft_schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.sft.learning_rate,
            kind: self.sft.lr_scheduler,
            warmup_ratio: self.sft.warmup_ratio,
            total_steps: self.sft.steps as u64,
        }
    }
}

fn preset_name(p: Preset) -> &'static str {
    match p {
        Preset::Paper => "paper",
        Preset::Desk => "desk",
    }
}
