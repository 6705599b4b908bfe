//! Stage functions shared by the command-line tool and the test suites.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{EvalPathway, RunConfig, Stage};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, Pathway};
use crate::grammar::{generate_dataset, Dataset, TaskCategory, UserPrompt};
use crate::grpo::{train, TrainLogRecord, TrainObserver};
use crate::policy::PolicyParams;
use crate::rewards::RewardContext;
use crate::sft::{oracle_trace, sft_fit, OracleTrace, SftEpochLog};
use crate::variance::{reasoning_vs_direct, ReasoningComparison};

pub fn generate(cfg: &RunConfig) -> Result<Dataset> {
    generate_dataset(
        cfg.seed,
        &cfg.data.per_category,
        cfg.data.split_ratio,
        cfg.data.allow_replacement,
    )
}

/// Splits training prompts into an SFT part and an RL part, per category
/// and in order, so both parts cover every category.
pub fn split_for_sft(train: &[UserPrompt], fraction: f64) -> (Vec<UserPrompt>, Vec<UserPrompt>) {
    let mut by_cat: BTreeMap<TaskCategory, Vec<&UserPrompt>> = BTreeMap::new();
    for p in train {
        by_cat.entry(p.spec.category).or_default().push(p);
    }
    let (mut sft, mut rl) = (Vec::new(), Vec::new());
    for prompts in by_cat.values() {
        let k = ((prompts.len() as f64) * fraction).round() as usize;
        sft.extend(prompts[..k].iter().map(|&p| p.clone()));
        rl.extend(prompts[k..].iter().map(|&p| p.clone()));
    }
    (sft, rl)
}

pub fn traces(cfg: &RunConfig, prompts: &[UserPrompt]) -> Vec<(UserPrompt, OracleTrace)> {
    prompts
        .iter()
        .map(|p| (p.clone(), oracle_trace(&p.spec, &cfg.rewards)))
        .collect()
}

pub fn fit_sft(cfg: &RunConfig, data: &[(UserPrompt, OracleTrace)]) -> (PolicyParams, Vec<SftEpochLog>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed(Stage::Sft));
    sft_fit(&PolicyParams::zeros(), data, &cfg.sft, &mut rng)
}

/// GRPO from the SFT policy, which also serves as the KL reference.
pub fn train_rl(
    cfg: &RunConfig,
    prompts: &[UserPrompt],
    sft: &PolicyParams,
    observer: &mut dyn TrainObserver,
) -> Result<(PolicyParams, Vec<TrainLogRecord>, RewardContext)> {
    let mut ctx = RewardContext::new(cfg.rewards.clone());
    let mut grpo = cfg.grpo.clone();
    grpo.seed = cfg.stage_seed(Stage::Grpo);
    let (params, log) = train(&grpo, prompts, sft, sft, &mut ctx, cfg.policy.max_len, observer)?;
    Ok((params, log, ctx))
}

/// Reports in the configured pathway order.
pub fn evaluate_pathways(
    cfg: &RunConfig,
    prompts: &[UserPrompt],
    sft: Option<&PolicyParams>,
    rl: Option<&PolicyParams>,
) -> Result<Vec<EvalReport>> {
    let missing = |what: &str| Error::Precondition(format!("{what} checkpoint required for evaluation"));
    cfg.eval
        .pathways
        .iter()
        .map(|pw| {
            let pathway = match pw {
                EvalPathway::PassThrough => Pathway::PassThrough,
                EvalPathway::Oracle => Pathway::Oracle {
                    rewards: &cfg.rewards,
                },
                EvalPathway::Sft => Pathway::Policy {
                    label: "sft".into(),
                    params: sft.ok_or_else(|| missing("sft"))?,
                    max_len: cfg.policy.max_len,
                },
                EvalPathway::Rl => Pathway::Policy {
                    label: "sft_rl".into(),
                    params: rl.ok_or_else(|| missing("rl"))?,
                    max_len: cfg.policy.max_len,
                },
            };
            evaluate(&pathway, prompts, cfg.seed)
        })
        .collect()
}

/// `n` prompts spread evenly over the list.
pub fn spread(prompts: &[UserPrompt], n: usize) -> Vec<UserPrompt> {
    let n = n.min(prompts.len());
    (0..n).map(|i| prompts[i * prompts.len() / n].clone()).collect()
}

pub fn variance(
    cfg: &RunConfig,
    params: &PolicyParams,
    rewards: &RewardContext,
    eval: &[UserPrompt],
) -> Result<ReasoningComparison> {
    let prompts = spread(eval, cfg.variance.prompts);
    reasoning_vs_direct(
        params,
        &prompts,
        rewards,
        &cfg.variance,
        cfg.policy.max_len,
        cfg.stage_seed(Stage::Variance),
    )
}

/// Everything an in-memory end-to-end run produces.
pub struct FullRun {
    pub dataset: Dataset,
    pub sft_params: PolicyParams,
    pub sft_log: Vec<SftEpochLog>,
    pub rl_params: PolicyParams,
    pub train_log: Vec<TrainLogRecord>,
    pub rewards: RewardContext,
    pub reports: Vec<EvalReport>,
}

pub fn run_all(cfg: &RunConfig) -> Result<FullRun> {
    let dataset = generate(cfg)?;
    let (sft_prompts, rl_prompts) = split_for_sft(&dataset.train, cfg.sft.fraction);
    let (sft_params, sft_log) = fit_sft(cfg, &traces(cfg, &sft_prompts));
    let (rl_params, train_log, rewards) = train_rl(cfg, &rl_prompts, &sft_params, &mut ())?;
    let reports = evaluate_pathways(cfg, &dataset.eval, Some(&sft_params), Some(&rl_params))?;
    Ok(FullRun {
        dataset,
        sft_params,
        sft_log,
        rl_params,
        train_log,
        rewards,
        reports,
    })
}
