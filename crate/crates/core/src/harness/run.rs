//! End-to-end runs: supervised training, RL, ablations and evaluation.
//!
//! Every random draw of step `s` comes from `SeededRng::derive(seed,
//! [purpose, s])`, so a resumed run needs no saved generator state.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use super::config::{RunConfig, Variant};
use super::plot::plot_csv;
use super::task::ToyTask;
use crate::data::{apply_stage, Stage};
use crate::error::{Error, Result};
use crate::flow::{
    fm_loss, fm_loss_value, sample_trajectories, Condition, FmDraws, FmExample, Policy,
    VelocityModel,
};
use crate::grpo::{rl_train_step, summarize_rewards, PolicyBundle, StepMetrics};
use crate::numeric::{AdamW, ParamStore, SeededRng};
use crate::reward::{GroupRewards, RewardSuite};
use crate::scb::ForwardMode;

const PURPOSE_INIT: u64 = 0;
const PURPOSE_SFT: u64 = 1;
const PURPOSE_RL: u64 = 2;
const PURPOSE_EVAL: u64 = 3;

/// Bumped whenever a CSV column is added, removed or renamed.
pub const CSV_SCHEMA_VERSION: u32 = 1;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Tolerances of the live per-step checks.
const ADV_TOL: f64 = 1e-9;
const RATIO_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Supervised runs: continue from this checkpoint's step and optimizer state.
    pub resume_from: Option<PathBuf>,
    /// Supervised runs: stop after this many total steps.
    pub stop_after: Option<usize>,
    /// RL runs: the supervised checkpoint used as policy init and reference.
    pub init_checkpoint: Option<PathBuf>,
}

/// Invariant violations found while a run executed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SelfChecks {
    pub checked: usize,
    pub violations: Vec<String>,
}

impl SelfChecks {
    pub fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checked += 1;
        if !ok {
            let msg = what();
            log::error!("self-check failed: {msg}");
            self.violations.push(msg);
        }
    }

    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn merge(&mut self, other: SelfChecks) {
        self.checked += other.checked;
        self.violations.extend(other.violations);
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    stage: Stage,
    variant: &'a str,
    seed: u64,
    code_version: &'a str,
    csv_schema_version: u32,
    init_checkpoint: Option<&'a Path>,
    resume_from: Option<&'a Path>,
    config: &'a RunConfig,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `config.toml` and `manifest.json` into the run directory.
pub fn write_manifest(
    cfg: &RunConfig,
    command: &str,
    stage: Stage,
    opts: &RunOptions,
) -> Result<()> {
    let dir = &cfg.run.out_dir;
    create_dir(dir)?;
    let cfg_path = dir.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml_string()).map_err(|e| Error::io(&cfg_path, e))?;
    let manifest = Manifest {
        command,
        stage,
        variant: cfg.run.variant.name(),
        seed: cfg.run.seed,
        code_version: env!("CARGO_PKG_VERSION"),
        csv_schema_version: CSV_SCHEMA_VERSION,
        init_checkpoint: opts.init_checkpoint.as_deref(),
        resume_from: opts.resume_from.as_deref(),
        config: cfg,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

struct CsvOut {
    path: PathBuf,
    w: BufWriter<File>,
}

impl CsvOut {
    fn create(path: PathBuf, header: &str) -> Result<Self> {
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = Self {
            w: BufWriter::new(f),
            path,
        };
        out.line(header)?;
        Ok(out)
    }

    fn append(path: PathBuf) -> Result<Self> {
        let f = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            w: BufWriter::new(f),
            path,
        })
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.w, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

/// Held-out scores of one set of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub heldout_fm_loss: f64,
    pub mean_reward_aggregate: f64,
    /// Mean raw reward per name, over prompts where the reward is active.
    pub mean_rewards: Vec<(String, f64)>,
}

impl EvalRecord {
    pub fn reward(&self, name: &str) -> Option<f64> {
        self.mean_rewards
            .iter()
            .find(|(n, _)| n == name)
            .map(|p| p.1)
    }

    pub fn csv_header(names: &[String]) -> String {
        let mut cols = vec![
            "step".to_string(),
            "heldout_fm_loss".into(),
            "mean_reward_aggregate".into(),
        ];
        cols.extend(names.iter().map(|n| format!("reward_{n}")));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.step.to_string(),
            fmt(self.heldout_fm_loss),
            fmt(self.mean_reward_aggregate),
        ];
        cols.extend(self.mean_rewards.iter().map(|(_, v)| fmt(*v)));
        cols.join(",")
    }
}

/// A fixed evaluation set (clean samples plus path draws) and sampling
/// streams, all derived from the run seed.
pub struct Evaluator {
    task: ToyTask,
    suite: RewardSuite,
    fm_batch: Vec<FmExample>,
    fm_draws: FmDraws,
    samples_per_prompt: usize,
    denoise_steps: usize,
    eta: f64,
    seed: u64,
}

impl Evaluator {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let task = ToyTask::build(&cfg.task)?;
        let suite = task.reward_suite()?;
        let mut rng = SeededRng::derive(cfg.run.seed, &[PURPOSE_EVAL, 0]);
        let fm_batch = task.sample_batch(cfg.eval.fm_samples, &mut rng)?;
        let fm_draws = FmDraws::sample(&mut rng, fm_batch.len(), task.state_dim());
        if cfg.eval.samples_per_prompt < 2 {
            return Err(Error::Config(
                "eval.samples_per_prompt must be at least 2".into(),
            ));
        }
        Ok(Self {
            task,
            suite,
            fm_batch,
            fm_draws,
            samples_per_prompt: cfg.eval.samples_per_prompt,
            denoise_steps: cfg.rl.denoise_steps,
            eta: cfg.rl.sde_eta,
            seed: cfg.run.seed,
        })
    }

    pub fn heldout_fm_loss(&self, model: &VelocityModel, store: &ParamStore) -> Result<f64> {
        fm_loss_value(model, store, &self.fm_batch, &self.fm_draws)
    }

    pub fn reward_groups(
        &self,
        model: &VelocityModel,
        store: &ParamStore,
    ) -> Result<Vec<GroupRewards>> {
        let policy = Policy::new(model, store);
        let base = SeededRng::derive(self.seed, &[PURPOSE_EVAL, 1]);
        self.task
            .prompts
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let trajs = sample_trajectories(
                    policy,
                    &p.cond,
                    self.samples_per_prompt,
                    self.denoise_steps,
                    self.eta,
                    &base.split(i as u64),
                )?;
                self.suite.evaluate_group(&trajs)
            })
            .collect()
    }

    pub fn evaluate(
        &self,
        model: &VelocityModel,
        store: &ParamStore,
        step: usize,
    ) -> Result<EvalRecord> {
        let heldout_fm_loss = self.heldout_fm_loss(model, store)?;
        let groups = self.reward_groups(model, store)?;
        let (mean_rewards, mean_reward_aggregate) = summarize_rewards(&self.suite, &groups);
        Ok(EvalRecord {
            step,
            heldout_fm_loss,
            mean_reward_aggregate,
            mean_rewards,
        })
    }

    pub fn reward_names(&self) -> Vec<String> {
        self.suite.names()
    }
}

#[derive(Debug, Clone)]
pub struct SftReport {
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub steps_done: usize,
    pub losses: Vec<f64>,
    pub initial: EvalRecord,
    pub last: EvalRecord,
}

fn sft_stage(cfg: &RunConfig) -> Stage {
    match cfg.run.stage {
        Stage::PreTrain => Stage::PreTrain,
        _ => Stage::Sft,
    }
}

/// Flow-matching training on the toy task with the stage's parameter gating.
pub fn run_sft(cfg: &RunConfig, opts: &RunOptions) -> Result<SftReport> {
    cfg.validate()?;
    let stage = sft_stage(cfg);
    let task = ToyTask::build(&cfg.task)?;
    let spec = cfg.model_spec()?;
    let seed = cfg.run.seed;
    let out = cfg.run.out_dir.clone();

    let (model, mut store, mut opt, start) = match &opts.resume_from {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.meta.task != cfg.task || ck.meta.model != spec {
                return Err(Error::Checkpoint(format!(
                    "{} does not match the configured task/model",
                    path.display()
                )));
            }
            if ck.meta.stage != stage {
                return Err(Error::Checkpoint(format!(
                    "cannot resume a {:?} checkpoint as {stage:?}",
                    ck.meta.stage
                )));
            }
            let (model, store) = ck.instantiate()?;
            let mut opt = AdamW::new(cfg.sft_optimizer(), &store);
            ck.restore_optimizer(&mut opt)?;
            (model, store, opt, ck.meta.step)
        }
        None => {
            let (model, mut store) =
                VelocityModel::build(spec.clone(), &mut SeededRng::derive(seed, &[PURPOSE_INIT]))?;
            apply_stage(&mut store, stage)?;
            let opt = AdamW::new(cfg.sft_optimizer(), &store);
            (model, store, opt, 0)
        }
    };
    let end = opts
        .stop_after
        .map_or(cfg.sft.steps, |s| s.min(cfg.sft.steps));
    write_manifest(cfg, "sft", stage, opts)?;

    let evaluator = Evaluator::new(cfg)?;
    let initial = evaluator.evaluate(&model, &store, start)?;
    let csv_path = out.join("sft_metrics.csv");
    let mut csv = if opts.resume_from.is_some() && csv_path.exists() {
        CsvOut::append(csv_path.clone())?
    } else {
        CsvOut::create(csv_path.clone(), "step,loss,lr,grad_norm")?
    };
    let schedule = cfg.sft_schedule();
    let mut losses = Vec::with_capacity(end.saturating_sub(start));
    for step in start..end {
        let rng = SeededRng::derive(seed, &[PURPOSE_SFT, step as u64]);
        let batch = task.sample_batch(cfg.sft.batch_size, &mut rng.split(0))?;
        let mut dropout = rng.split(2);
        store.zero_grad();
        let loss = fm_loss(
            &model,
            &mut store,
            &batch,
            &mut rng.split(1),
            ForwardMode::Train(&mut dropout),
            1.0,
        )?;
        let grad_norm = store.clip_grad_norm(cfg.sft.gradient_norm_clip);
        let lr = schedule.lr_at(step as u64);
        opt.step(&mut store, lr)?;
        losses.push(loss);
        if cfg.sft.log_interval > 0 && (step + 1) % cfg.sft.log_interval == 0 {
            csv.line(&format!(
                "{},{},{},{}",
                step + 1,
                fmt(loss),
                fmt(lr),
                fmt(grad_norm)
            ))?;
        }
        if (step + 1) % 100 == 0 {
            log::info!("sft step {}: loss {loss:.5}", step + 1);
        }
    }
    csv.finish()?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    let meta = CheckpointMeta {
        task: cfg.task.clone(),
        model: spec,
        stage,
        step: end.max(start),
        seed,
    };
    save_checkpoint(&checkpoint, &meta, &store, Some(&opt))?;
    let last = evaluator.evaluate(&model, &store, end.max(start))?;
    let eval_path = out.join("sft_eval.csv");
    let mut ev = CsvOut::create(
        eval_path,
        &EvalRecord::csv_header(&evaluator.reward_names()),
    )?;
    ev.line(&initial.csv_row())?;
    ev.line(&last.csv_row())?;
    ev.finish()?;
    if let Err(e) = plot_csv(
        &csv_path,
        "step",
        &["loss"],
        "supervised loss",
        &out.join("sft_loss.svg"),
    ) {
        log::warn!("could not draw sft_loss.svg: {e}");
    }
    Ok(SftReport {
        out_dir: out,
        checkpoint,
        steps_done: end.saturating_sub(start),
        losses,
        initial,
        last,
    })
}

#[derive(Debug, Clone)]
pub struct RlReport {
    pub out_dir: PathBuf,
    pub variant: Variant,
    pub checkpoint: PathBuf,
    pub metrics: Vec<StepMetrics>,
    pub evals: Vec<EvalRecord>,
    pub checks: SelfChecks,
}

impl RlReport {
    pub fn first_eval(&self) -> &EvalRecord {
        &self.evals[0]
    }

    pub fn last_eval(&self) -> &EvalRecord {
        self.evals.last().expect("at least one evaluation")
    }
}

fn check_step(checks: &mut SelfChecks, m: &StepMetrics) {
    checks.check(m.kl.is_finite() && m.kl >= 0.0, || {
        format!("step {}: kl {} not finite and nonnegative", m.step, m.kl)
    });
    if m.skipped {
        return;
    }
    checks.check(m.adv_mean.abs() <= ADV_TOL, || {
        format!("step {}: batch advantage mean {:e}", m.step, m.adv_mean)
    });
    checks.check((m.adv_std - 1.0).abs() <= ADV_TOL, || {
        format!("step {}: batch advantage std {}", m.step, m.adv_std)
    });
    checks.check(m.max_ratio_deviation <= RATIO_TOL, || {
        format!(
            "step {}: ratio deviation {:e} at the snapshot",
            m.step, m.max_ratio_deviation
        )
    });
    checks.check(m.clip_fraction == 0.0, || {
        format!(
            "step {}: clip fraction {} at the snapshot",
            m.step, m.clip_fraction
        )
    });
}

fn load_init(cfg: &RunConfig, opts: &RunOptions) -> Result<(VelocityModel, ParamStore)> {
    let path = opts
        .init_checkpoint
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("rl needs an initial checkpoint".into()))?;
    let ck = load_checkpoint(path)?;
    if ck.meta.task != cfg.task {
        return Err(Error::Checkpoint(format!(
            "{} was trained on a different task",
            path.display()
        )));
    }
    if ck.meta.model != cfg.model_spec()? {
        return Err(Error::Checkpoint(format!(
            "{} has a different model layout",
            path.display()
        )));
    }
    ck.instantiate()
}

/// The RL loop from a supervised checkpoint, with live invariant checks.
pub fn run_rl(cfg: &RunConfig, opts: &RunOptions) -> Result<RlReport> {
    cfg.validate()?;
    let (model, mut init) = load_init(cfg, opts)?;
    apply_stage(&mut init, Stage::Rl)?;
    let task = ToyTask::build(&cfg.task)?;
    let suite = task.reward_suite()?;
    let grpo = cfg.grpo();
    let seed = cfg.run.seed;
    let out = cfg.run.out_dir.clone();
    write_manifest(cfg, "rl", Stage::Rl, opts)?;

    let mut bundle = PolicyBundle::new(
        model,
        init,
        cfg.rl_optimizer(),
        Some(cfg.rl.gradient_norm_clip),
    );
    let evaluator = Evaluator::new(cfg)?;
    let names = suite.names();
    let metrics_path = out.join("metrics.csv");
    let eval_path = out.join("eval.csv");
    let mut mcsv = CsvOut::create(metrics_path.clone(), &StepMetrics::csv_header(&names))?;
    let mut ecsv = CsvOut::create(eval_path.clone(), &EvalRecord::csv_header(&names))?;
    let mut evals = vec![evaluator.evaluate(&bundle.model, &bundle.policy, 0)?];
    ecsv.line(&evals[0].csv_row())?;

    let steps = cfg.rl.total_training_steps;
    let per_step = cfg.rl.prompts_per_step();
    let mut metrics = Vec::with_capacity(steps);
    let mut checks = SelfChecks::default();
    for step in 0..steps {
        let rng = SeededRng::derive(seed, &[PURPOSE_RL, step as u64]);
        let mut prompt_rng = rng.split(0);
        let prompts: Vec<Condition> = (0..per_step)
            .map(|_| task.sample_prompt(&mut prompt_rng).map(|p| p.cond.clone()))
            .collect::<Result<_>>()?;
        let sft = if grpo.sft_aux_coeff > 0.0 {
            Some(task.sample_batch(cfg.rl.sft_batch_size, &mut rng.split(1))?)
        } else {
            None
        };
        let m = rl_train_step(
            &mut bundle,
            &prompts,
            &suite,
            &grpo,
            sft.as_deref(),
            &rng.split(2),
            cfg.rl.learning_rate,
            step,
        )?;
        check_step(&mut checks, &m);
        mcsv.line(&m.csv_row())?;
        if (step + 1) % 25 == 0 {
            log::info!(
                "{} step {}: reward {:.4}, kl {:.3e}",
                cfg.run.variant.name(),
                step + 1,
                m.mean_reward_aggregate,
                m.kl
            );
        }
        metrics.push(m);
        let done = step + 1;
        if (cfg.eval.interval > 0 && done % cfg.eval.interval == 0) || done == steps {
            let rec = evaluator.evaluate(&bundle.model, &bundle.policy, done)?;
            ecsv.line(&rec.csv_row())?;
            evals.push(rec);
        }
    }
    mcsv.finish()?;
    ecsv.finish()?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    let meta = CheckpointMeta {
        task: cfg.task.clone(),
        model: bundle.model.spec.clone(),
        stage: Stage::Rl,
        step: steps,
        seed,
    };
    save_checkpoint(&checkpoint, &meta, &bundle.policy, Some(&bundle.optimizer))?;
    draw_rl_plots(&out, &names);
    Ok(RlReport {
        out_dir: out,
        variant: cfg.run.variant,
        checkpoint,
        metrics,
        evals,
        checks,
    })
}

fn draw_rl_plots(out: &Path, names: &[String]) {
    let reward_cols: Vec<String> = names.iter().map(|n| format!("reward_{n}")).collect();
    let mut ys: Vec<&str> = vec!["mean_reward_aggregate"];
    ys.extend(reward_cols.iter().map(String::as_str));
    let plots = [
        (
            out.join("metrics.csv"),
            ys.clone(),
            "training reward",
            "rewards.svg",
        ),
        (out.join("metrics.csv"), vec!["kl"], "velocity KL", "kl.svg"),
        (
            out.join("eval.csv"),
            ys,
            "held-out reward",
            "eval_rewards.svg",
        ),
        (
            out.join("eval.csv"),
            vec!["heldout_fm_loss"],
            "held-out flow-matching loss",
            "eval_fm_loss.svg",
        ),
    ];
    for (csv, cols, title, file) in plots {
        if let Err(e) = plot_csv(&csv, "step", &cols, title, &out.join(file)) {
            log::warn!("could not draw {file}: {e}");
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub out_dir: PathBuf,
    pub runs: Vec<RlReport>,
}

impl AblationReport {
    pub fn run(&self, v: Variant) -> Option<&RlReport> {
        self.runs.iter().find(|r| r.variant == v)
    }

    pub fn checks(&self) -> SelfChecks {
        let mut all = SelfChecks::default();
        for r in &self.runs {
            all.merge(r.checks.clone());
        }
        all
    }
}

/// Runs every variant from the same checkpoint and seed, one thread per
/// variant, each under `<out>/<variant>/`.
pub fn run_ablation(cfg: &RunConfig, opts: &RunOptions) -> Result<AblationReport> {
    cfg.validate()?;
    load_init(cfg, opts)?;
    let out = cfg.run.out_dir.clone();
    create_dir(&out)?;
    let runs: Vec<RlReport> = std::thread::scope(|s| {
        let handles: Vec<_> = Variant::ALL
            .into_iter()
            .map(|v| {
                let mut c = cfg.clone();
                c.run.variant = v;
                c.run.out_dir = out.join(v.name());
                s.spawn(move || run_rl(&c, opts))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Config("ablation worker panicked".into())))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let names = ToyTask::build(&cfg.task)?.reward_suite()?.names();
    let path = out.join("ablation.csv");
    let mut csv = CsvOut::create(
        path.clone(),
        &format!("variant,{}", EvalRecord::csv_header(&names)),
    )?;
    for r in &runs {
        for e in &r.evals {
            csv.line(&format!("{},{}", r.variant.name(), e.csv_row()))?;
        }
    }
    csv.finish()?;
    draw_ablation_plots(&out, &runs);
    Ok(AblationReport { out_dir: out, runs })
}

fn draw_ablation_plots(out: &Path, runs: &[RlReport]) {
    use super::plot::{line_chart, Series};
    let curves = |f: &dyn Fn(&EvalRecord) -> f64| -> Vec<Series> {
        runs.iter()
            .map(|r| Series {
                label: r.variant.name().to_string(),
                points: r
                    .evals
                    .iter()
                    .map(|e| (e.step as f64, f(e)))
                    .filter(|p| p.1.is_finite())
                    .collect(),
            })
            .collect()
    };
    let charts = [
        (
            "ablation_fm_loss.svg",
            "held-out flow-matching loss",
            curves(&|e| e.heldout_fm_loss),
        ),
        (
            "ablation_reward.svg",
            "held-out aggregated reward",
            curves(&|e| e.mean_reward_aggregate),
        ),
        (
            "ablation_ocr.svg",
            "held-out ocr reward",
            curves(&|e| e.reward("ocr").unwrap_or(f64::NAN)),
        ),
    ];
    for (file, title, series) in charts {
        let path = out.join(file);
        if let Err(e) = std::fs::write(&path, line_chart(title, "step", &series)) {
            log::warn!("could not draw {file}: {e}");
        }
    }
}

/// Scores a checkpoint on the configured task.
pub fn eval_checkpoint(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalRecord> {
    cfg.validate()?;
    let ck = load_checkpoint(checkpoint)?;
    if ck.meta.task != cfg.task {
        return Err(Error::Checkpoint(format!(
            "{} was trained on {:?}, not the configured {:?} task",
            checkpoint.display(),
            ck.meta.task.kind,
            cfg.task.kind
        )));
    }
    let (model, store) = ck.instantiate()?;
    Evaluator::new(cfg)?.evaluate(&model, &store, ck.meta.step)
}

/// Untrained parameters for the configured model, as a supervised run would
/// start from.
pub fn initial_model(cfg: &RunConfig) -> Result<(VelocityModel, ParamStore)> {
    VelocityModel::build(
        cfg.model_spec()?,
        &mut SeededRng::derive(cfg.run.seed, &[PURPOSE_INIT]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ConditioningKind;
    use crate::harness::task::TaskKind;

    fn tiny(dir: &Path) -> RunConfig {
        let mut c = RunConfig::desk();
        c.run.out_dir = dir.to_path_buf();
        c.task.kind = TaskKind::Gaussian2D;
        c.model.conditioning = ConditioningKind::Table;
        c.model.hidden = vec![16];
        c.sft.steps = 30;
        c.sft.batch_size = 16;
        c.rl.total_training_steps = 4;
        c.rl.global_batch_size = 16;
        c.rl.sft_batch_size = 8;
        c.rl.denoise_steps = 4;
        c.eval.interval = 2;
        c.eval.samples_per_prompt = 4;
        c.eval.fm_samples = 32;
        c
    }

    #[test]
    fn sft_then_rl_writes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny(&dir.path().join("sft"));
        let sft = run_sft(&c, &RunOptions::default()).unwrap();
        assert_eq!(sft.losses.len(), 30);
        for f in [
            "config.toml",
            "manifest.json",
            "sft_metrics.csv",
            "checkpoint.bin",
            "sft_loss.svg",
        ] {
            assert!(sft.out_dir.join(f).exists(), "{f}");
        }
        c.run.out_dir = dir.path().join("rl");
        assert!(run_rl(&c, &RunOptions::default()).is_err());
        let opts = RunOptions {
            init_checkpoint: Some(sft.checkpoint.clone()),
            ..Default::default()
        };
        let rl = run_rl(&c, &opts).unwrap();
        assert_eq!(rl.metrics.len(), 4);
        assert_eq!(
            rl.evals.iter().map(|e| e.step).collect::<Vec<_>>(),
            vec![0, 2, 4]
        );
        assert!(rl.checks.passed(), "{:?}", rl.checks.violations);
        let manifest = std::fs::read_to_string(rl.out_dir.join("manifest.json")).unwrap();
        assert!(manifest.contains("\"kl_coeff\": 5e-7"), "{manifest}");
        let reloaded = RunConfig::load(&rl.out_dir.join("config.toml")).unwrap();
        assert_eq!(reloaded, c);
        let csv = std::fs::read_to_string(rl.out_dir.join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny(dir.path());
        c.sft.learning_rate = 0.0;
        c.sft.weight_decay = 0.0;
        let sft = run_sft(&c, &RunOptions::default()).unwrap();
        let (_, before) = initial_model(&c).unwrap();
        let ck = load_checkpoint(&sft.checkpoint).unwrap();
        assert_eq!(ck.params.flat_values(), before.flat_values());
    }

    #[test]
    fn task_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny(dir.path());
        let sft = run_sft(&c, &RunOptions::default()).unwrap();
        let mut other = c.clone();
        other.task.kind = TaskKind::TextGrid8x8;
        assert!(eval_checkpoint(&other, &sft.checkpoint).is_err());
        let a = eval_checkpoint(&c, &sft.checkpoint).unwrap();
        let b = eval_checkpoint(&c, &sft.checkpoint).unwrap();
        assert_eq!(a.csv_row(), b.csv_row());
    }
}
