use mrgrpo::grpo::{
    aggregate_and_batch_normalize, collect_batch, group_advantages, NormalizationMode,
};
use mrgrpo::harness::{load_checkpoint, run_rl, run_sft, RunConfig, RunOptions, ToyTask, Variant};
use mrgrpo::numeric::{mean_std, SeededRng};
use mrgrpo::reward::{GroupRewards, RewardProfile};

/// Similarity (wide at this temperature) paired with a tenfold-damped OCR
/// reward on the text grid.
fn mismatch_config(dir: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.run.seed = 5;
    cfg.task.reward_profile = RewardProfile::VarianceMismatch;
    cfg.task.similarity_tau = 8.0;
    cfg.run.out_dir = dir.to_path_buf();
    cfg
}

fn column(g: &GroupRewards, k: usize) -> Vec<f64> {
    (0..g.group_size()).map(|i| g.values.row(i)[k]).collect()
}

/// Mean over samples of `Â · z`, where `z` is the named reward standardized
/// within its group: the first-order gain in that reward from one policy
/// gradient step driven by advantages `Â`.
fn first_order_gain(rewards: &[GroupRewards], mode: NormalizationMode, name: &str) -> f64 {
    let mut tables: Vec<_> = rewards
        .iter()
        .map(|g| group_advantages(g, mode).unwrap())
        .collect();
    aggregate_and_batch_normalize(&mut tables).unwrap();
    let (mut total, mut n) = (0.0, 0usize);
    for (g, t) in rewards.iter().zip(&tables) {
        let Some(k) = g.names.iter().position(|x| x == name) else {
            continue;
        };
        let col = column(g, k);
        let (m, s) = mean_std(&col);
        if s == 0.0 {
            continue;
        }
        for (a, r) in t.final_adv.iter().zip(&col) {
            total += a * (r - m) / s;
            n += 1;
        }
    }
    total / n as f64
}

#[test]
fn joint_normalization_starves_the_narrow_reward() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = mismatch_config(dir.path());
    cfg.sft.steps = 300;
    let sft = run_sft(&cfg, &RunOptions::default()).unwrap();
    let (model, store) = load_checkpoint(&sft.checkpoint)
        .unwrap()
        .instantiate()
        .unwrap();
    let task = ToyTask::build(&cfg.task).unwrap();
    let suite = task.reward_suite().unwrap();
    let mut rng = SeededRng::new(6);
    let prompts: Vec<_> = (0..64)
        .map(|_| task.sample_prompt(&mut rng).unwrap().cond.clone())
        .collect();
    let batch =
        collect_batch(&model, &store, &prompts, &suite, &cfg.grpo(), &rng.split(1)).unwrap();

    // The pair really is mismatched on text prompts.
    let (mut wide, mut narrow) = (0.0, 0.0);
    for g in batch
        .rewards
        .iter()
        .filter(|g| g.names.iter().any(|n| n == "ocr_damped"))
    {
        wide += mean_std(&column(g, 0)).1;
        narrow += mean_std(&column(g, 1)).1;
    }
    assert!(
        wide > 2.0 * narrow,
        "similarity spread {wide}, ocr_damped spread {narrow}"
    );

    let per = first_order_gain(&batch.rewards, NormalizationMode::RewardWise, "ocr_damped");
    let joint = first_order_gain(&batch.rewards, NormalizationMode::Joint, "ocr_damped");
    assert!(
        per > 0.0 && joint < per - 0.05,
        "reward-wise {per}, joint {joint}"
    );
    let per_sim = first_order_gain(&batch.rewards, NormalizationMode::RewardWise, "similarity");
    let joint_sim = first_order_gain(&batch.rewards, NormalizationMode::Joint, "similarity");
    assert!(
        joint_sim > per_sim,
        "joint should favour the wide reward: {joint_sim} vs {per_sim}"
    );
}

#[test]
fn narrow_reward_improves_less_without_rewardwise_norm() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = mismatch_config(&dir.path().join("sft"));
    cfg.rl.total_training_steps = 150;
    cfg.eval.interval = 150;
    let sft = run_sft(&cfg, &RunOptions::default()).unwrap();
    let opts = RunOptions {
        init_checkpoint: Some(sft.checkpoint),
        ..Default::default()
    };
    let mut gains = Vec::new();
    for v in [Variant::Full, Variant::NoRewardwiseNorm] {
        cfg.run.variant = v;
        cfg.run.out_dir = dir.path().join(v.name());
        let r = run_rl(&cfg, &opts).unwrap();
        assert!(r.checks.passed(), "{:?}", r.checks.violations);
        gains.push(
            r.last_eval().reward("ocr_damped").unwrap()
                - r.first_eval().reward("ocr_damped").unwrap(),
        );
    }
    assert!(
        gains[0] > 0.0 && gains[0] > gains[1],
        "ocr_damped gains {gains:?}"
    );
}
