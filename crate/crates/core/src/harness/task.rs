//! Toy generation tasks: labelled 2-D Gaussians and 8×8 grids with a
//! four-bit code rendered into the top-left cells.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::data::{weighted_index, DataSource, SourceKind};
use crate::error::{Error, Result};
use crate::flow::{Condition, FmExample};
use crate::numeric::{SeededRng, Tensor};
use crate::reward::{
    PromptCategory, PromptTarget, RewardProfile, RewardSuite, CODE_BITS, GRID_CELLS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[serde(rename = "gaussian2d")]
    Gaussian2D,
    #[serde(rename = "text_grid8x8")]
    TextGrid8x8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTaskSpec {
    pub kind: TaskKind,
    /// General (non-text) classes.
    pub classes: usize,
    /// Text-rendering codes, at most 16 (text grid only).
    pub codes: usize,
    /// Radius of the class circle (Gaussian task).
    pub radius: f64,
    pub data_noise: f64,
    /// Probability that a data sample shows a corrupted target: one code
    /// bit flipped, or a neighbouring class's pattern.
    pub corruption: f64,
    pub similarity_tau: f64,
    pub reward_profile: RewardProfile,
    /// Sample weights of the text-rendering and general sources.
    pub text_weight: f64,
    pub general_weight: f64,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::TextGrid8x8,
            classes: 4,
            codes: 16,
            radius: 2.0,
            data_noise: 0.1,
            corruption: 0.3,
            similarity_tau: 1.0,
            reward_profile: RewardProfile::Standard,
            text_weight: 3.0,
            general_weight: 1.0,
        }
    }
}

/// Token layout: 0 marks text prompts, 1 general prompts, `2 + 2p + b`
/// encodes bit `b` at code position `p`, and `2 + 2·CODE_BITS + k` is
/// general class `k`.
const TEXT_MARK: usize = 0;
const GENERAL_MARK: usize = 1;
const BIT_BASE: usize = 2;
const CLASS_BASE: usize = BIT_BASE + 2 * CODE_BITS;

#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub cond: Condition,
    pub target: PromptTarget,
}

#[derive(Debug, Clone)]
pub struct ToyTask {
    pub spec: ToyTaskSpec,
    pub prompts: Vec<Prompt>,
}

fn code_bits(code: usize) -> Vec<u8> {
    (0..CODE_BITS).map(|p| ((code >> p) & 1) as u8).collect()
}

fn background(cell: usize) -> f64 {
    0.5 * (0.7 * cell as f64).sin()
}

fn class_pattern(k: usize, cell: usize) -> f64 {
    0.8 * (0.45 * (k + 1) as f64 * cell as f64 + k as f64).sin()
}

impl ToyTask {
    pub fn build(spec: &ToyTaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut prompts = Vec::new();
        match spec.kind {
            TaskKind::Gaussian2D => {
                for k in 0..spec.classes {
                    let a = TAU * k as f64 / spec.classes as f64;
                    prompts.push(Prompt {
                        cond: Condition {
                            id: k,
                            tokens: vec![GENERAL_MARK, CLASS_BASE + k],
                        },
                        target: PromptTarget {
                            id: k,
                            category: PromptCategory::GeneralT2I,
                            centroid: Tensor::vector(vec![
                                spec.radius * a.cos(),
                                spec.radius * a.sin(),
                            ]),
                            code: None,
                        },
                    });
                }
            }
            TaskKind::TextGrid8x8 => {
                for c in 0..spec.codes {
                    let bits = code_bits(c);
                    let mut centroid: Vec<f64> = (0..GRID_CELLS).map(background).collect();
                    for (cell, &b) in centroid.iter_mut().zip(&bits) {
                        *cell = if b == 1 { 1.0 } else { -1.0 };
                    }
                    let mut tokens = vec![TEXT_MARK];
                    tokens.extend(
                        bits.iter()
                            .enumerate()
                            .map(|(p, &b)| BIT_BASE + 2 * p + b as usize),
                    );
                    prompts.push(Prompt {
                        cond: Condition { id: c, tokens },
                        target: PromptTarget {
                            id: c,
                            category: PromptCategory::TextRendering,
                            centroid: Tensor::vector(centroid),
                            code: Some(bits),
                        },
                    });
                }
                for k in 0..spec.classes {
                    let id = spec.codes + k;
                    prompts.push(Prompt {
                        cond: Condition {
                            id,
                            tokens: vec![GENERAL_MARK, CLASS_BASE + k],
                        },
                        target: PromptTarget {
                            id,
                            category: PromptCategory::GeneralT2I,
                            centroid: Tensor::vector(
                                (0..GRID_CELLS).map(|c| class_pattern(k, c)).collect(),
                            ),
                            code: None,
                        },
                    });
                }
            }
        }
        Ok(Self {
            spec: spec.clone(),
            prompts,
        })
    }

    pub fn state_dim(&self) -> usize {
        match self.spec.kind {
            TaskKind::Gaussian2D => 2,
            TaskKind::TextGrid8x8 => GRID_CELLS,
        }
    }

    pub fn vocab(&self) -> usize {
        CLASS_BASE + self.spec.classes
    }

    pub fn num_conditions(&self) -> usize {
        self.prompts.len()
    }

    pub fn reward_suite(&self) -> Result<RewardSuite> {
        RewardSuite::new(
            self.spec.reward_profile.specs(),
            self.spec.similarity_tau,
            self.prompts.iter().map(|p| p.target.clone()).collect(),
        )
    }

    /// The RL prompt sources (or the SFT sources; they share weights).
    pub fn sources(&self, kind: SourceKind) -> Vec<DataSource> {
        let mut out = Vec::new();
        let has = |cat| self.prompts.iter().any(|p| p.target.category == cat);
        if has(PromptCategory::TextRendering) {
            out.push(DataSource {
                name: "text_rendering".into(),
                kind,
                category: PromptCategory::TextRendering,
                weight: self.spec.text_weight,
            });
        }
        if has(PromptCategory::GeneralT2I) {
            out.push(DataSource {
                name: "general".into(),
                kind,
                category: PromptCategory::GeneralT2I,
                weight: self.spec.general_weight,
            });
        }
        out
    }

    /// Picks a source by weight, then a prompt of that category uniformly.
    pub fn sample_prompt(&self, rng: &mut SeededRng) -> Result<&Prompt> {
        let sources = self.sources(SourceKind::Prompts);
        let weights: Vec<f64> = sources.iter().map(|s| s.weight).collect();
        let cat = sources[weighted_index(&weights, rng)?].category;
        let pool: Vec<&Prompt> = self
            .prompts
            .iter()
            .filter(|p| p.target.category == cat)
            .collect();
        Ok(pool[rng.below(pool.len())])
    }

    /// The mean a corrupted sample of `prompt` is drawn around.
    fn corrupted_mean(&self, prompt: &Prompt, pick: usize) -> Tensor {
        match &prompt.target.code {
            Some(_) => {
                let mut c = prompt.target.centroid.clone();
                c.data_mut()[pick % CODE_BITS] *= -1.0;
                c
            }
            None => {
                let general: Vec<&Prompt> = self
                    .prompts
                    .iter()
                    .filter(|p| p.target.category == PromptCategory::GeneralT2I)
                    .collect();
                let at = general
                    .iter()
                    .position(|p| p.target.id == prompt.target.id)
                    .unwrap_or(0);
                let step = if pick % 2 == 0 { 1 } else { general.len() - 1 };
                general[(at + step) % general.len()].target.centroid.clone()
            }
        }
    }

    /// A data sample: the prompt's centroid (or, with probability
    /// `corruption`, a corrupted variant) plus isotropic noise.
    pub fn sample_clean(&self, prompt: &Prompt, rng: &mut SeededRng) -> Tensor {
        let corrupt = rng.uniform() < self.spec.corruption;
        let pick = rng.below(2 * CODE_BITS);
        let noise = rng
            .normal_tensor(&[self.state_dim()])
            .scale(self.spec.data_noise);
        let mean = if corrupt {
            self.corrupted_mean(prompt, pick)
        } else {
            prompt.target.centroid.clone()
        };
        mean.add(&noise).expect("state width")
    }

    pub fn sample_batch(&self, n: usize, rng: &mut SeededRng) -> Result<Vec<FmExample>> {
        (0..n)
            .map(|_| {
                let p = self.sample_prompt(rng)?;
                Ok(FmExample {
                    x0: self.sample_clean(p, rng),
                    cond: p.cond.clone(),
                })
            })
            .collect()
    }
}

impl ToyTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self.kind {
            TaskKind::Gaussian2D => {
                if self.classes < 1 {
                    return bad("gaussian task needs at least one class".into());
                }
                if !(self.radius > 0.0) {
                    return bad(format!("radius {} must be positive", self.radius));
                }
            }
            TaskKind::TextGrid8x8 => {
                if self.codes > 1 << CODE_BITS {
                    return bad(format!(
                        "at most {} codes fit in the code region",
                        1 << CODE_BITS
                    ));
                }
                if self.codes + self.classes == 0 {
                    return bad("text grid task needs at least one prompt".into());
                }
            }
        }
        if !(0.0..=1.0).contains(&self.corruption) {
            return bad(format!("corruption {} outside [0, 1]", self.corruption));
        }
        if !(self.data_noise >= 0.0) {
            return bad(format!(
                "data_noise {} must be nonnegative",
                self.data_noise
            ));
        }
        if !(self.text_weight > 0.0 && self.general_weight > 0.0) {
            return bad("source weights must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_centroids_are_distinct_on_circle() {
        let t = ToyTask::build(&ToyTaskSpec {
            kind: TaskKind::Gaussian2D,
            ..ToyTaskSpec::default()
        })
        .unwrap();
        assert_eq!(t.prompts.len(), 4);
        for p in &t.prompts {
            let c = p.target.centroid.data();
            assert!(((c[0] * c[0] + c[1] * c[1]).sqrt() - 2.0).abs() < 1e-12);
        }
        assert_eq!(t.sources(SourceKind::Prompts).len(), 1);
    }

    #[test]
    fn text_grid_layout() {
        let t = ToyTask::build(&ToyTaskSpec {
            corruption: 0.0,
            ..ToyTaskSpec::default()
        })
        .unwrap();
        assert_eq!(t.prompts.len(), 20);
        assert_eq!(t.state_dim(), 64);
        let p5 = &t.prompts[5];
        assert_eq!(p5.target.code.as_deref(), Some(&[1u8, 0, 1, 0][..]));
        assert_eq!(&p5.target.centroid.data()[..4], &[1.0, -1.0, 1.0, -1.0]);
        assert!(p5.cond.tokens.iter().all(|&tok| tok < t.vocab()));
        for (i, a) in t.prompts.iter().enumerate() {
            for b in &t.prompts[i + 1..] {
                assert_ne!(a.target.centroid, b.target.centroid);
            }
        }
        let suite = t.reward_suite().unwrap();
        let mut rng = SeededRng::new(1);
        let x = t.sample_clean(p5, &mut rng);
        let g = suite.evaluate_samples(5, &[&x, &x]).unwrap();
        assert_eq!(g.column_by_name("ocr").unwrap(), vec![1.0, 1.0]);
        assert!(ToyTask::build(&ToyTaskSpec {
            codes: 17,
            ..ToyTaskSpec::default()
        })
        .is_err());
    }

    #[test]
    fn corrupted_samples_flip_one_code_bit() {
        let t = ToyTask::build(&ToyTaskSpec {
            corruption: 1.0,
            data_noise: 0.0,
            ..ToyTaskSpec::default()
        })
        .unwrap();
        let mut rng = SeededRng::new(3);
        for p in t.prompts.iter().filter(|p| p.target.code.is_some()) {
            let x = t.sample_clean(p, &mut rng);
            let flipped = (0..CODE_BITS)
                .filter(|&c| x.data()[c] != p.target.centroid.data()[c])
                .count();
            assert_eq!(flipped, 1);
            assert_eq!(
                &x.data()[CODE_BITS..],
                &p.target.centroid.data()[CODE_BITS..]
            );
        }
        let g = &t.prompts[t.spec.codes];
        let x = t.sample_clean(g, &mut rng);
        assert!(t
            .prompts
            .iter()
            .any(|q| q.target.id != g.target.id && q.target.centroid == x));
    }

    #[test]
    fn prompt_mixture_favours_text() {
        let t = ToyTask::build(&ToyTaskSpec::default()).unwrap();
        let mut rng = SeededRng::new(2);
        let n = 20_000;
        let text = (0..n)
            .filter(|_| {
                t.sample_prompt(&mut rng).unwrap().target.category == PromptCategory::TextRendering
            })
            .count();
        assert!((text as f64 / n as f64 - 0.75).abs() < 0.015);
    }
}
