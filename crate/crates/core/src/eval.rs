//! Strict per-category accuracy of a prompt pathway on held-out prompts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grammar::{PromptSpec, TaskCategory, TokenId, UserPrompt};
use crate::policy::{greedy, PolicyParams};
use crate::rewards::{parse_structured_output, position_satisfied, semantic_reward, RewardConfig};
use crate::sft::oracle_trace;
use crate::synthesizer::{synthesize, Scene};

/// How the enhanced prompt is produced.
#[derive(Clone, Debug)]
pub enum Pathway<'a> {
    /// The user prompt goes to the synthesizer unchanged.
    PassThrough,
    /// Greedy decoding of a policy.
    Policy {
        label: String,
        params: &'a PolicyParams,
        max_len: usize,
    },
    /// The supervised target output.
    Oracle { rewards: &'a RewardConfig },
}

impl Pathway<'_> {
    pub fn label(&self) -> String {
        match self {
            Pathway::PassThrough => "pass_through".into(),
            Pathway::Policy { label, .. } => label.clone(),
            Pathway::Oracle { .. } => "oracle".into(),
        }
    }

    /// Full output tokens (if the pathway has a structured output) and the
    /// enhanced prompt, or `None` for a malformed output.
    pub fn enhance(&self, prompt: &UserPrompt) -> (Option<Vec<TokenId>>, Option<Vec<TokenId>>) {
        let output = match self {
            Pathway::PassThrough => return (None, Some(prompt.tokens.clone())),
            Pathway::Policy {
                params, max_len, ..
            } => greedy(params, prompt, *max_len).tokens,
            Pathway::Oracle { rewards } => oracle_trace(&prompt.spec, rewards).target_tokens,
        };
        let parsed = parse_structured_output(&output);
        let enhanced = parsed.well_formed.then_some(parsed.prompt_tokens);
        (Some(output), enhanced)
    }
}

/// All constraints of the spec hold in the scene.
pub fn strict_correct(scene: &Scene, spec: &PromptSpec) -> bool {
    let slot = |i: usize| &spec.objects[i];
    let present = |i: usize| scene.count(slot(i).class) > 0;
    let bound = |i: usize| slot(i).color.is_some_and(|c| scene.has_colored(slot(i).class, c));
    match spec.category {
        TaskCategory::SingleObject => present(0),
        TaskCategory::TwoObject => present(0) && present(1),
        TaskCategory::Counting => spec.count.is_some_and(|n| scene.count(slot(0).class) == n as usize),
        TaskCategory::Colors => bound(0),
        TaskCategory::Position => position_satisfied(scene, spec),
        TaskCategory::AttributeBinding => bound(0) && bound(1),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pathway: String,
    pub seed: u64,
    pub eval_set_hash: String,
    pub accuracy: BTreeMap<TaskCategory, f64>,
    /// Mean graded semantic reward, for comparison with the strict score.
    pub semantic: BTreeMap<TaskCategory, f64>,
    pub n: BTreeMap<TaskCategory, usize>,
    /// Unweighted mean over the categories present.
    pub overall: f64,
    pub well_formed_rate: f64,
}

/// Content hash of an evaluation set (ids and tokens, in order).
pub fn eval_set_hash(prompts: &[UserPrompt]) -> String {
    let mut h = Sha256::new();
    for p in prompts {
        h.update(p.spec.id.to_le_bytes());
        for t in &p.tokens {
            h.update(t.0.to_le_bytes());
        }
        h.update([0xff]);
    }
    hex::encode(h.finalize())
}

pub fn evaluate(pathway: &Pathway<'_>, prompts: &[UserPrompt], seed: u64) -> Result<EvalReport> {
    if prompts.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let mut hits: BTreeMap<TaskCategory, (usize, f64, usize)> = BTreeMap::new();
    let mut well_formed = 0usize;
    for p in prompts {
        let (_, enhanced) = pathway.enhance(p);
        let (ok, sem) = match enhanced {
            Some(tokens) => {
                well_formed += 1;
                let scene = synthesize(&tokens)?;
                (strict_correct(&scene, &p.spec), semantic_reward(&scene, &p.spec))
            }
            None => (false, 0.0),
        };
        let e = hits.entry(p.spec.category).or_default();
        e.0 += usize::from(ok);
        e.1 += sem;
        e.2 += 1;
    }
    let accuracy: BTreeMap<_, _> = hits
        .iter()
        .map(|(&c, &(k, _, n))| (c, k as f64 / n as f64))
        .collect();
    let semantic = hits.iter().map(|(&c, &(_, s, n))| (c, s / n as f64)).collect();
    let n = hits.iter().map(|(&c, &(_, _, n))| (c, n)).collect();
    let overall = accuracy.values().sum::<f64>() / accuracy.len() as f64;
    Ok(EvalReport {
        pathway: pathway.label(),
        seed,
        eval_set_hash: eval_set_hash(prompts),
        accuracy,
        semantic,
        n,
        overall,
        well_formed_rate: well_formed as f64 / prompts.len() as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub pathway: String,
    /// Category name, or `overall`.
    pub category: String,
    pub baseline: f64,
    pub value: f64,
    pub delta: f64,
    /// `(value - baseline) / baseline`; absent when the baseline is zero.
    pub relative: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub eval_set_hash: String,
    pub rows: Vec<ComparisonRow>,
}

/// Relative improvement `(ours - base) / base`.
pub fn relative_improvement(base: f64, ours: f64) -> Option<f64> {
    (base != 0.0).then(|| (ours - base) / base)
}

/// Compares every report against the first one.
pub fn compare(reports: &[EvalReport]) -> Result<Comparison> {
    let [base, rest @ ..] = reports else {
        return Err(Error::Precondition("compare needs at least two reports".into()));
    };
    if rest.is_empty() {
        return Err(Error::Precondition("compare needs at least two reports".into()));
    }
    if rest.iter().any(|r| r.eval_set_hash != base.eval_set_hash || r.n != base.n) {
        return Err(Error::MismatchedEvalSets);
    }
    let mut rows = Vec::new();
    for r in rest {
        let mut push = |category: String, b: f64, v: f64| {
            rows.push(ComparisonRow {
                pathway: r.pathway.clone(),
                category,
                baseline: b,
                value: v,
                delta: v - b,
                relative: relative_improvement(b, v),
            })
        };
        for (c, &b) in &base.accuracy {
            push(c.name().to_string(), b, r.accuracy[c]);
        }
        push("overall".into(), base.overall, r.overall);
    }
    Ok(Comparison {
        baseline: base.pathway.clone(),
        eval_set_hash: base.eval_set_hash.clone(),
        rows,
    })
}

/// Plain-text table with one row per category and one column per report.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut out = format!("{:<18}", "category");
    for r in reports {
        out.push_str(&format!(" {:>14}", r.pathway));
    }
    out.push('\n');
    let Some(first) = reports.first() else {
        return out;
    };
    for c in first.accuracy.keys() {
        out.push_str(&format!("{:<18}", c.name()));
        for r in reports {
            out.push_str(&format!(" {:>14.3}", r.accuracy.get(c).copied().unwrap_or(f64::NAN)));
        }
        out.push('\n');
    }
    out.push_str(&format!("{:<18}", "overall"));
    for r in reports {
        out.push_str(&format!(" {:>14.3}", r.overall));
    }
    out.push('\n');
    out
}
