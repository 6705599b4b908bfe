use std::path::Path;

use reprompt_core::config::{EvalPathway, Stage};
use reprompt_core::eval::{compare, format_table, strict_correct};
use reprompt_core::grammar::{parse_user_prompt, Dataset, DatasetRecord, Split};
use reprompt_core::grpo::TrainObserver;
use reprompt_core::io::{
    load_checkpoint, read_json, read_jsonl, save_checkpoint, write_json, write_jsonl, CheckpointMeta,
    JsonlWriter,
};
use reprompt_core::pipeline;
use reprompt_core::policy::greedy;
use reprompt_core::rewards::parse_structured_output;
use reprompt_core::synthesizer::synthesize;
use reprompt_core::{
    Error, PolicyParams, Result, RewardContext, RewardNormalizer, RunConfig, TrainLogRecord, UserPrompt,
    Vocabulary,
};

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Precondition(format!("{what} {} not found", path.display())))
    }
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.dataset_path();
    require(&path, "dataset")?;
    Dataset::from_records(&read_jsonl::<DatasetRecord>(&path)?)
}

fn load_params(path: &Path, what: &str) -> Result<PolicyParams> {
    require(path, what)?;
    Ok(load_checkpoint(path)?.0)
}

fn load_rewards(cfg: &RunConfig) -> Result<RewardContext> {
    let mut ctx = RewardContext::new(cfg.rewards.clone());
    let path = cfg.normalizer_path();
    if path.is_file() {
        ctx.normalizer = read_json::<RewardNormalizer>(&path)?;
    }
    Ok(ctx)
}

fn text(tokens: &[reprompt_core::TokenId]) -> String {
    vocab().detokenize(tokens).unwrap_or_else(|_| "<invalid>".into())
}

fn vocab() -> &'static Vocabulary {
    reprompt_core::grammar::vocabulary()
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let ds = pipeline::generate(cfg)?;
    let path = cfg.out_dir.join("dataset.jsonl");
    write_jsonl(&path, &ds.records())?;
    println!("wrote {} train and {} eval prompts to {}", ds.train.len(), ds.eval.len(), path.display());
    Ok(())
}

pub fn sft(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let (sft_prompts, _) = pipeline::split_for_sft(&ds.train, cfg.sft.fraction);
    let data = pipeline::traces(cfg, &sft_prompts);
    let records: Vec<DatasetRecord> = data
        .iter()
        .map(|(p, t)| DatasetRecord {
            target_tokens: Some(t.target_tokens.clone()),
            ..DatasetRecord::new(p, Split::Train)
        })
        .collect();
    write_jsonl(&cfg.out_dir.join("sft_traces.jsonl"), &records)?;

    let (params, log) = pipeline::fit_sft(cfg, &data);
    write_jsonl(&cfg.out_dir.join("sft_log.jsonl"), &log)?;
    let meta = CheckpointMeta {
        stage: "sft".into(),
        step: cfg.sft.epochs,
        seed: cfg.stage_seed(Stage::Sft),
    };
    save_checkpoint(&cfg.out_dir.join("sft.ckpt.json"), &params, meta)?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!(
            "sft on {} traces: mean nll {:.4} -> {:.4}",
            data.len(),
            first.mean_nll,
            last.mean_nll
        );
    }
    Ok(())
}

/// Streams each log record and checkpoints periodically.
struct Recorder<'a> {
    log: JsonlWriter,
    cfg: &'a RunConfig,
    seed: u64,
}

impl Recorder<'_> {
    fn checkpoint(&self, params: &PolicyParams, ctx: &RewardContext, step: usize) -> Result<()> {
        let meta = CheckpointMeta {
            stage: "rl".into(),
            step,
            seed: self.seed,
        };
        save_checkpoint(&self.cfg.out_dir.join("rl.ckpt.json"), params, meta)?;
        write_json(&self.cfg.out_dir.join("normalizer.json"), &ctx.normalizer)
    }
}

impl TrainObserver for Recorder<'_> {
    fn on_step(&mut self, record: &TrainLogRecord, params: &PolicyParams, ctx: &RewardContext) -> Result<()> {
        self.log.append(record)?;
        let done = record.step + 1;
        let every = self.cfg.grpo.checkpoint_every;
        if every > 0 && done % every == 0 {
            self.checkpoint(params, ctx, done)?;
        }
        Ok(())
    }
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let sft = load_params(&cfg.sft_checkpoint_path(), "sft checkpoint")?;
    let (_, rl_prompts) = pipeline::split_for_sft(&ds.train, cfg.sft.fraction);
    let mut recorder = Recorder {
        log: JsonlWriter::create(&cfg.out_dir.join("train_log.jsonl"))?,
        cfg,
        seed: cfg.stage_seed(Stage::Grpo),
    };
    let (params, log, ctx) = pipeline::train_rl(cfg, &rl_prompts, &sft, &mut recorder)?;
    recorder.checkpoint(&params, &ctx, log.len())?;
    let k = (log.len() / 10).max(1);
    if log.len() >= k {
        let mean = |s: &[TrainLogRecord]| s.iter().map(|r| r.mean_r_total).sum::<f64>() / s.len() as f64;
        println!(
            "{} steps on {} prompts: mean r_total {:.3} (first {k}) -> {:.3} (last {k})",
            log.len(),
            rl_prompts.len(),
            mean(&log[..k]),
            mean(&log[log.len() - k..])
        );
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let wants = |p: EvalPathway| cfg.eval.pathways.contains(&p);
    let sft = match wants(EvalPathway::Sft) {
        true => Some(load_params(&cfg.sft_checkpoint_path(), "sft checkpoint")?),
        false => None,
    };
    let rl = match wants(EvalPathway::Rl) {
        true => Some(load_params(&cfg.rl_checkpoint_path(), "rl checkpoint")?),
        false => None,
    };
    let reports = pipeline::evaluate_pathways(cfg, &ds.eval, sft.as_ref(), rl.as_ref())?;
    write_jsonl(&cfg.out_dir.join("eval_reports.jsonl"), &reports)?;
    if reports.len() >= 2 {
        write_json(&cfg.out_dir.join("eval_compare.json"), &compare(&reports)?)?;
    }
    print!("{}", format_table(&reports));
    Ok(())
}

pub fn variance(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let params = load_params(&cfg.rl_checkpoint_path(), "rl checkpoint")?;
    let rewards = load_rewards(cfg)?;
    let report = pipeline::variance(cfg, &params, &rewards, &ds.eval)?;
    write_json(&cfg.out_dir.join("variance.json"), &report)?;

    println!(
        "{:<44} {:>9} {:>9} {:>9} {:>9} {:>7} {:>7}",
        "prompt", "total", "within", "between", "direct", "N_bare", "N_reas"
    );
    for row in &report.rows {
        let r = &row.reasoning;
        println!(
            "{:<44} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>7} {:>7}",
            row.prompt, r.total_var, r.within, r.between, row.direct.total_var, r.implied_n_bare, r.implied_n_reasoning
        );
    }
    let s = &report.synthetic;
    println!(
        "synthetic: total {:.4} ± {:.4}, within {:.4} ± {:.4}, between {:.4} ± {:.4}",
        s.total_var, s.stderr_total, s.within, s.stderr_within, s.between, s.stderr_between
    );
    let n = report.rows.len();
    println!(
        "identity within 3 stderr: {}/{n}; within <= total: {}/{n}; reasoning within <= direct total: {}/{n}",
        report.identity_holds, report.within_le_total, report.reasoning_le_direct
    );
    Ok(())
}

pub fn demo(cfg: &RunConfig, prompt: &str) -> Result<()> {
    let spec = parse_user_prompt(&vocab().tokenize(prompt)?)?;
    let user = UserPrompt::new(spec);
    let params = load_params(&cfg.rl_checkpoint_path(), "rl checkpoint")?;
    let rewards = load_rewards(cfg)?;

    let traj = greedy(&params, &user, cfg.policy.max_len);
    let parsed = parse_structured_output(&traj.tokens);
    let breakdown = rewards.score_frozen(&traj.tokens, &user.spec);
    println!("user prompt:     {}", user.text());
    println!("category:        {}", user.spec.category);
    println!("output:          {}", text(&traj.tokens));
    println!("reasoning:       {}", text(&parsed.reason_tokens));
    println!("enhanced prompt: {}", text(&parsed.prompt_tokens));
    match synthesize(&parsed.prompt_tokens) {
        Ok(scene) if parsed.well_formed => {
            println!("scene:\n{scene}");
            println!("strict correct:  {}", strict_correct(&scene, &user.spec));
        }
        _ => println!("scene:           none (malformed output)"),
    }
    println!("rewards:\n{}", serde_json::to_string_pretty(&breakdown)?);
    Ok(())
}
