//! Law-of-total-variance experiments on two-stage reward sampling
//! (`H ~ π(H|P)`, then `P' ~ π(P'|H,P)`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{Structure, TokenId, UserPrompt};
use crate::policy::{sample_reasoning, sample_with_prefix, PolicyParams};
use crate::rewards::RewardContext;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceConfig {
    /// Prompts taken from the eval split.
    pub prompts: usize,
    pub n_outer: usize,
    pub n_inner: usize,
    pub n_batches: usize,
    pub eps_acc: f64,
    pub delta: f64,
    /// Outer and inner sample counts of the closed-form synthetic check.
    pub synthetic_outer: usize,
    pub synthetic_inner: usize,
}

impl Default for VarianceConfig {
    fn default() -> Self {
        VarianceConfig {
            prompts: 10,
            n_outer: 200,
            n_inner: 8,
            n_batches: 10,
            eps_acc: 0.1,
            delta: 0.05,
            synthetic_outer: 10_000,
            synthetic_inner: 5,
        }
    }
}

impl VarianceConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("variance: {m}")));
        if self.n_outer < 2 || self.n_inner < 2 || self.synthetic_outer < 2 || self.synthetic_inner < 2 {
            return bad("outer and inner sample counts must be at least 2");
        }
        if self.n_batches < 2 {
            return bad("n_batches must be at least 2");
        }
        if !(self.eps_acc > 0.0) || !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("need eps_acc > 0 and 0 < delta < 1");
        }
        Ok(())
    }
}

/// A reward generated in two stages: a latent first stage, then a reward
/// conditioned on it.
pub trait TwoStageSource {
    type Stage;
    fn sample_stage(&self, rng: &mut ChaCha8Rng) -> Self::Stage;
    fn sample_reward(&self, stage: &Self::Stage, rng: &mut ChaCha8Rng) -> f64;
}

/// `H` uniform on `{0, 1}`, `r | H ~ Bernoulli(p[H])`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwoValuedSource {
    pub p: [f64; 2],
}

impl Default for TwoValuedSource {
    fn default() -> Self {
        TwoValuedSource { p: [0.2, 0.8] }
    }
}

impl TwoStageSource for TwoValuedSource {
    type Stage = usize;

    fn sample_stage(&self, rng: &mut ChaCha8Rng) -> usize {
        usize::from(rng.random::<bool>())
    }

    fn sample_reward(&self, &h: &usize, rng: &mut ChaCha8Rng) -> f64 {
        f64::from(u8::from(rng.random::<f64>() < self.p[h]))
    }
}

/// Reasoning prefix from a policy, then a completion; scored with a frozen
/// normalizer. With `direct` the reasoning segment is forced empty.
pub struct PolicySource<'a> {
    pub params: &'a PolicyParams,
    pub prompt: &'a UserPrompt,
    pub rewards: &'a RewardContext,
    pub max_len: usize,
    pub direct: bool,
}

impl TwoStageSource for PolicySource<'_> {
    type Stage = Vec<TokenId>;

    fn sample_stage(&self, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
        if self.direct {
            vec![Structure::ReasonOpen.into(), Structure::ReasonClose.into()]
        } else {
            sample_reasoning(self.params, self.prompt, rng, self.max_len).tokens
        }
    }

    fn sample_reward(&self, prefix: &Vec<TokenId>, rng: &mut ChaCha8Rng) -> f64 {
        let t = sample_with_prefix(self.params, self.prompt, prefix, rng, self.max_len);
        self.rewards.score_frozen(&t.tokens, &self.prompt.spec).r_total
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub total_var: f64,
    /// `E_H[Var[r|H]]`
    pub within: f64,
    /// `Var_H[E[r|H]]`
    pub between: f64,
    pub n_outer: usize,
    pub n_inner: usize,
    pub stderr_total: f64,
    pub stderr_within: f64,
    pub stderr_between: f64,
    /// Batch standard error of `total − within − between`.
    pub stderr_gap: f64,
    pub eps_acc: f64,
    pub delta: f64,
    pub implied_n_bare: u64,
    pub implied_n_reasoning: u64,
}

impl VarianceReport {
    pub fn gap(&self) -> f64 {
        self.total_var - (self.within + self.between)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Components {
    total: f64,
    within: f64,
    between: f64,
}

/// Unbiased variance, computed on values shifted by the first sample so a
/// constant sequence gives exactly zero.
fn sample_var(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let shift = xs[0];
    let mean = xs.iter().map(|x| x - shift).sum::<f64>() / n;
    xs.iter().map(|x| (x - shift - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Estimates from an `outer x inner` matrix of rewards.
fn components(rows: &[Vec<f64>]) -> Components {
    let n_inner = rows[0].len() as f64;
    let within = rows.iter().map(|r| sample_var(r)).sum::<f64>() / rows.len() as f64;
    let means: Vec<f64> = rows.iter().map(|r| r.iter().sum::<f64>() / n_inner).collect();
    let between = (sample_var(&means) - within / n_inner).max(0.0);
    let pooled: Vec<f64> = rows.iter().flatten().copied().collect();
    Components {
        total: sample_var(&pooled),
        within,
        between,
    }
}

fn batch_stderr(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    (sample_var(values) / values.len() as f64).sqrt()
}

/// Smallest `N` with `N ≥ variance / (eps_acc² · delta)`. Quotients within
/// 1e-9 (relative) of an integer are taken as that integer so that rounding
/// in the division does not add a sample.
pub fn chebyshev_n(variance: f64, eps_acc: f64, delta: f64) -> Result<u64> {
    if !(variance >= 0.0) || !(eps_acc > 0.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Precondition(format!(
            "chebyshev_n needs variance >= 0, eps_acc > 0, 0 < delta < 1; got ({variance}, {eps_acc}, {delta})"
        )));
    }
    let x = variance / (eps_acc * eps_acc * delta);
    if !x.is_finite() {
        return Err(Error::Precondition("chebyshev bound overflows".into()));
    }
    let nearest = x.round();
    let n = if (x - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        x.ceil()
    };
    Ok(n as u64)
}

/// Two-stage Monte Carlo decomposition with batch standard errors over
/// `n_batches` contiguous groups of outer samples.
pub fn variance_decomposition<S: TwoStageSource>(
    source: &S,
    n_outer: usize,
    n_inner: usize,
    n_batches: usize,
    eps_acc: f64,
    delta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<VarianceReport> {
    if n_outer < 2 || n_inner < 2 {
        return Err(Error::Precondition("n_outer and n_inner must be at least 2".into()));
    }
    let rows: Vec<Vec<f64>> = (0..n_outer)
        .map(|_| {
            let stage = source.sample_stage(rng);
            (0..n_inner).map(|_| source.sample_reward(&stage, rng)).collect()
        })
        .collect();
    let all = components(&rows);

    let batches = n_batches.min(n_outer / 2);
    let per_batch: Vec<Components> = (0..batches)
        .map(|b| components(&rows[b * n_outer / batches..(b + 1) * n_outer / batches]))
        .collect();
    let se = |f: &dyn Fn(&Components) -> f64| batch_stderr(&per_batch.iter().map(f).collect::<Vec<_>>());

    Ok(VarianceReport {
        total_var: all.total,
        within: all.within,
        between: all.between,
        n_outer,
        n_inner,
        stderr_total: se(&|c| c.total),
        stderr_within: se(&|c| c.within),
        stderr_between: se(&|c| c.between),
        stderr_gap: se(&|c| c.total - c.within - c.between),
        eps_acc,
        delta,
        implied_n_bare: chebyshev_n(all.total, eps_acc, delta)?,
        implied_n_reasoning: chebyshev_n(all.within, eps_acc, delta)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptVariance {
    pub prompt_id: u64,
    pub prompt: String,
    pub reasoning: VarianceReport,
    pub direct: VarianceReport,
    /// `|total − (within + between)| ≤ 3 · stderr_gap`
    pub identity_holds: bool,
    /// `within ≤ total + 3 · stderr_total`
    pub within_le_total: bool,
    /// `within(reasoning) ≤ total(direct)`
    pub reasoning_le_direct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReasoningComparison {
    pub rows: Vec<PromptVariance>,
    pub mean_within_reasoning: f64,
    pub mean_total_reasoning: f64,
    pub mean_total_direct: f64,
    pub identity_holds: usize,
    pub within_le_total: usize,
    pub reasoning_le_direct: usize,
    pub synthetic: VarianceReport,
}

/// Per-prompt decomposition for the reasoning policy and for the same
/// policy with its reasoning forced empty, plus the synthetic two-valued
/// reference case.
pub fn reasoning_vs_direct(
    params: &PolicyParams,
    prompts: &[UserPrompt],
    rewards: &RewardContext,
    config: &VarianceConfig,
    max_len: usize,
    seed: u64,
) -> Result<ReasoningComparison> {
    config.validate()?;
    let stream = |s: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s);
        rng
    };
    let decompose = |source: &PolicySource<'_>, s: u64| {
        variance_decomposition(
            source,
            config.n_outer,
            config.n_inner,
            config.n_batches,
            config.eps_acc,
            config.delta,
            &mut stream(s),
        )
    };

    let mut rows = Vec::with_capacity(prompts.len());
    for (i, prompt) in prompts.iter().enumerate() {
        let src = |direct| PolicySource {
            params,
            prompt,
            rewards,
            max_len,
            direct,
        };
        let reasoning = decompose(&src(false), 2 * i as u64 + 1)?;
        let direct = decompose(&src(true), 2 * i as u64 + 2)?;
        rows.push(PromptVariance {
            prompt_id: prompt.spec.id,
            prompt: prompt.text(),
            identity_holds: reasoning.gap().abs() <= 3.0 * reasoning.stderr_gap,
            within_le_total: reasoning.within <= reasoning.total_var + 3.0 * reasoning.stderr_total,
            reasoning_le_direct: reasoning.within <= direct.total_var,
            reasoning,
            direct,
        });
    }
    let synthetic = variance_decomposition(
        &TwoValuedSource::default(),
        config.synthetic_outer,
        config.synthetic_inner,
        config.n_batches,
        config.eps_acc,
        config.delta,
        &mut stream(0),
    )?;
    let n = rows.len().max(1) as f64;
    let mean = |f: &dyn Fn(&PromptVariance) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Ok(ReasoningComparison {
        mean_within_reasoning: mean(&|r| r.reasoning.within),
        mean_total_reasoning: mean(&|r| r.reasoning.total_var),
        mean_total_direct: mean(&|r| r.direct.total_var),
        identity_holds: rows.iter().filter(|r| r.identity_holds).count(),
        within_le_total: rows.iter().filter(|r| r.within_le_total).count(),
        reasoning_le_direct: rows.iter().filter(|r| r.reasoning_le_direct).count(),
        rows,
        synthetic,
    })
}
