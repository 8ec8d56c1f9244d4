//! Weighted sampling over data sources and per-stage trainable sets.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{ParamStore, SeededRng};
use crate::reward::PromptCategory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// RL prompts of a category.
    Prompts,
    /// Clean samples for the flow-matching loss.
    SftPairs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub name: String,
    pub kind: SourceKind,
    pub category: PromptCategory,
    pub weight: f64,
}

impl DataSource {
    pub fn new(
        name: &str,
        kind: SourceKind,
        category: PromptCategory,
        weight: f64,
    ) -> Result<Self> {
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::Config(format!(
                "source {name} weight {weight} must be positive"
            )));
        }
        Ok(Self {
            name: name.to_string(),
            kind,
            category,
            weight,
        })
    }
}

/// Index `i` with probability `w_i / Σ w`.
pub fn weighted_index(weights: &[f64], rng: &mut SeededRng) -> Result<usize> {
    if weights.is_empty() {
        return Err(Error::domain("weighted_sample", "no sources"));
    }
    if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(Error::domain("weighted_sample", "weights must be positive"));
    }
    let total: f64 = weights.iter().sum();
    let mut u = rng.uniform() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return Ok(i);
        }
        u -= w;
    }
    Ok(weights.len() - 1)
}

pub fn weighted_sample<'a>(
    sources: &'a [DataSource],
    rng: &mut SeededRng,
) -> Result<&'a DataSource> {
    let weights: Vec<f64> = sources.iter().map(|s| s.weight).collect();
    Ok(&sources[weighted_index(&weights, rng)?])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PreTrain,
    Sft,
    Rl,
}

/// Parameter groups, recognised by name prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamTag {
    Connector,
    ThinkTokens,
    Velocity,
    Lora,
    Encoder,
}

pub fn tag_of(name: &str) -> Result<ParamTag> {
    let head = name.split('.').next().unwrap_or("");
    match head {
        "connector" => Ok(ParamTag::Connector),
        "think_tokens" => Ok(ParamTag::ThinkTokens),
        "velocity" => Ok(ParamTag::Velocity),
        "lora" => Ok(ParamTag::Lora),
        "encoder" => Ok(ParamTag::Encoder),
        _ => Err(Error::UnknownParam(name.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageConfig {
    pub stage: Stage,
    pub trainable: BTreeSet<ParamTag>,
}

impl StageConfig {
    pub fn for_stage(stage: Stage) -> Self {
        use ParamTag::*;
        let trainable = match stage {
            Stage::PreTrain => [Connector, ThinkTokens].into_iter().collect(),
            Stage::Sft | Stage::Rl => [Connector, ThinkTokens, Velocity, Lora]
                .into_iter()
                .collect(),
        };
        Self { stage, trainable }
    }
}

/// One flag per name; any unrecognised name is an error.
pub fn stage_gating<'a>(
    stage: Stage,
    names: impl IntoIterator<Item = &'a str>,
) -> Result<Vec<(String, bool)>> {
    let cfg = StageConfig::for_stage(stage);
    names
        .into_iter()
        .map(|n| Ok((n.to_string(), cfg.trainable.contains(&tag_of(n)?))))
        .collect()
}

pub fn apply_stage(store: &mut ParamStore, stage: Stage) -> Result<()> {
    let flags = stage_gating(stage, store.names())?;
    for (name, flag) in flags {
        store.set_trainable(&name, flag)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{ConditioningSpec, ModelSpec, VelocityModel};
    use crate::numeric::{Activation, AdamW, AdamWConfig};
    use crate::scb::{ConditioningMode, LoraConfig, ScbSpec};

    fn frequencies(weights: &[f64], draws: usize, seed: u64) -> Vec<f64> {
        let mut rng = SeededRng::new(seed);
        let mut counts = vec![0usize; weights.len()];
        for _ in 0..draws {
            counts[weighted_index(weights, &mut rng).unwrap()] += 1;
        }
        counts.iter().map(|&c| c as f64 / draws as f64).collect()
    }

    #[test]
    fn three_to_one_mixture() {
        let f = frequencies(&[3.0, 1.0], 100_000, 1);
        assert!(
            (f[0] - 0.75).abs() < 0.01 && (f[1] - 0.25).abs() < 0.01,
            "{f:?}"
        );
    }

    #[test]
    fn single_and_uniform() {
        assert_eq!(frequencies(&[2.5], 1000, 2), vec![1.0]);
        let f = frequencies(&[1.0; 4], 100_000, 3);
        assert!(f.iter().all(|p| (p - 0.25).abs() < 0.01), "{f:?}");
        assert!(weighted_index(&[], &mut SeededRng::new(0)).is_err());
        assert!(
            DataSource::new("x", SourceKind::Prompts, PromptCategory::GeneralT2I, 0.0).is_err()
        );
    }

    #[test]
    fn sample_returns_source() {
        let sources = vec![
            DataSource::new(
                "text",
                SourceKind::Prompts,
                PromptCategory::TextRendering,
                3.0,
            )
            .unwrap(),
            DataSource::new(
                "general",
                SourceKind::Prompts,
                PromptCategory::GeneralT2I,
                1.0,
            )
            .unwrap(),
        ];
        let mut rng = SeededRng::new(4);
        let picked = weighted_sample(&sources, &mut rng).unwrap();
        assert!(sources.contains(picked));
    }

    fn scb_store() -> ParamStore {
        let spec = ModelSpec {
            state_dim: 2,
            hidden: vec![4],
            activation: Activation::Tanh,
            conditioning: ConditioningSpec::Scb(ScbSpec {
                vocab: 4,
                width: 3,
                depth: 2,
                think_tokens: 2,
                selected_layers: 2,
                dit_width: 3,
                connector_depth: 1,
                mode: ConditioningMode::Stacked,
                lora: Some(LoraConfig {
                    rank: 1,
                    alpha: 2.0,
                    dropout: 0.0,
                }),
            }),
        };
        VelocityModel::build(spec, &mut SeededRng::new(1))
            .unwrap()
            .1
    }

    #[test]
    fn gating_per_stage() {
        let mut store = scb_store();
        apply_stage(&mut store, Stage::PreTrain).unwrap();
        for (_, name, p) in store.iter() {
            let want = name.starts_with("connector.") || name == "think_tokens";
            assert_eq!(p.trainable, want, "{name}");
        }
        apply_stage(&mut store, Stage::Sft).unwrap();
        for (_, name, p) in store.iter() {
            assert_eq!(p.trainable, !name.starts_with("encoder."), "{name}");
        }
        assert!(store
            .iter()
            .any(|(_, n, p)| n.starts_with("lora.") && p.trainable));
        let flags = stage_gating(Stage::Rl, store.names()).unwrap();
        assert_eq!(flags.len(), store.len());
        let mut reference = store.clone();
        reference.freeze_all();
        assert_eq!(reference.num_trainable_scalars(), 0);
        assert!(stage_gating(Stage::Sft, ["mystery.weight"]).is_err());
    }

    #[test]
    fn frozen_values_survive_optimizer_steps() {
        let mut store = scb_store();
        apply_stage(&mut store, Stage::PreTrain).unwrap();
        let frozen_before: Vec<Vec<f64>> = store
            .iter()
            .filter(|(_, _, p)| !p.trainable)
            .map(|(_, _, p)| p.value.data().to_vec())
            .collect();
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let mut rng = SeededRng::new(9);
        for _ in 0..20 {
            for (_, p) in store.iter_mut() {
                for g in p.grad.data_mut() {
                    *g = rng.normal();
                }
            }
            opt.step(&mut store, 1e-2).unwrap();
        }
        let frozen_after: Vec<Vec<f64>> = store
            .iter()
            .filter(|(_, _, p)| !p.trainable)
            .map(|(_, _, p)| p.value.data().to_vec())
            .collect();
        assert_eq!(frozen_before, frozen_after);
    }
}
