//! Group relative policy optimization.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::UserPrompt;
use crate::policy::{
    accumulate_kl_grads, accumulate_step_grads, exact_kl, sample, step_kls, step_log_probs,
    PolicyParams, Trajectory,
};
use crate::rewards::{RewardBreakdown, RewardContext};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioMode {
    /// One importance ratio per output sequence.
    Sequence,
    /// One ratio per token; surrogate and KL are token means.
    PerToken,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSignal {
    /// Normalized ensemble total.
    Normalized,
    /// Unnormalized `r_vis + r_struc + r_len`.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_coef: f64,
    pub lr: f64,
    pub steps: usize,
    pub prompts_per_step: usize,
    pub ratio_mode: RatioMode,
    pub reward_signal: RewardSignal,
    /// Global gradient-norm clip; `0` disables it.
    pub max_grad_norm: f64,
    /// Checkpoint period in steps; `0` writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Record wall time in the log (breaks byte-identical reruns).
    pub log_wall_time: bool,
    /// Derived from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 4,
            clip_eps: 0.2,
            kl_coef: 0.04,
            lr: 1.0,
            steps: 300,
            prompts_per_step: 8,
            ratio_mode: RatioMode::Sequence,
            reward_signal: RewardSignal::Normalized,
            max_grad_norm: 10.0,
            checkpoint_every: 50,
            log_wall_time: false,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("grpo: {m}")));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must be in (0, 1)");
        }
        if !(self.kl_coef >= 0.0) {
            return bad("kl_coef must be non-negative");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.prompts_per_step == 0 {
            return bad("prompts_per_step must be at least 1");
        }
        if !(self.max_grad_norm >= 0.0) {
            return bad("max_grad_norm must be non-negative");
        }
        Ok(())
    }
}

/// Normalized advantages `(r_i − mean) / std` with the population standard
/// deviation; all zeros for a constant group.
pub fn advantages(rewards: &[f64]) -> Vec<f64> {
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g;
    let std = var.sqrt();
    if std == 0.0 || !std.is_finite() {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSample {
    pub prompt: UserPrompt,
    pub trajectories: Vec<Trajectory>,
    pub breakdowns: Vec<RewardBreakdown>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// Samples `group_size` outputs from the frozen snapshot and scores each
/// through the full reward pipeline, updating the running normalizer in
/// order.
pub fn collect_group(
    prompt: &UserPrompt,
    params_old: &PolicyParams,
    config: &GrpoConfig,
    rng: &mut impl Rng,
    reward_ctx: &mut RewardContext,
    max_len: usize,
) -> GroupSample {
    let trajectories: Vec<Trajectory> = (0..config.group_size)
        .map(|_| sample(params_old, prompt, rng, max_len))
        .collect();
    let breakdowns: Vec<RewardBreakdown> = trajectories
        .iter()
        .map(|t| reward_ctx.score(&t.tokens, &prompt.spec))
        .collect();
    let rewards: Vec<f64> = breakdowns
        .iter()
        .map(|b| match config.reward_signal {
            RewardSignal::Normalized => b.r_total,
            RewardSignal::Raw => b.r_vis + b.r_struc + b.r_len,
        })
        .collect();
    GroupSample {
        prompt: prompt.clone(),
        advantages: advantages(&rewards),
        trajectories,
        breakdowns,
        rewards,
    }
}

fn clip(rho: f64, eps: f64) -> f64 {
    rho.clamp(1.0 - eps, 1.0 + eps)
}

/// `(value, weight on the policy gradient)`; the weight is zero when the
/// clipped branch wins. Ties go to the unclipped branch.
fn surrogate(rho: f64, adv: f64, eps: f64) -> (f64, f64) {
    let unclipped = rho * adv;
    let clipped = clip(rho, eps) * adv;
    if unclipped <= clipped {
        (unclipped, adv * rho)
    } else {
        (clipped, 0.0)
    }
}

/// Objective value and, optionally, its gradient.
fn objective_and_grad(
    params: &PolicyParams,
    params_old: &PolicyParams,
    reference: &PolicyParams,
    groups: &[GroupSample],
    config: &GrpoConfig,
    mut grad: Option<&mut PolicyParams>,
) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::Precondition("grpo needs at least one group".into()));
    }
    let eps = config.clip_eps;
    let beta = config.kl_coef;
    let mut j = 0.0;
    for (gi, group) in groups.iter().enumerate() {
        let scale = 1.0 / (groups.len() * group.trajectories.len()) as f64;
        let spec = &group.prompt.spec;
        for (si, (traj, &adv)) in group.trajectories.iter().zip(&group.advantages).enumerate() {
            let tokens = &traj.tokens;
            let lp = step_log_probs(params, spec, tokens);
            let lp_old = step_log_probs(params_old, spec, tokens);
            let len = tokens.len().max(1) as f64;
            let non_finite = || Error::NonFiniteRatio {
                group: gi,
                sample: si,
            };
            let (surr, weights, kl_weight) = match config.ratio_mode {
                RatioMode::Sequence => {
                    let rho = (lp.iter().sum::<f64>() - lp_old.iter().sum::<f64>()).exp();
                    if !rho.is_finite() {
                        return Err(non_finite());
                    }
                    let (value, w) = surrogate(rho, adv, eps);
                    (value, vec![w * scale; tokens.len()], scale)
                }
                RatioMode::PerToken => {
                    let mut value = 0.0;
                    let mut weights = Vec::with_capacity(tokens.len());
                    for (a, b) in lp.iter().zip(&lp_old) {
                        let rho = (a - b).exp();
                        if !rho.is_finite() {
                            return Err(non_finite());
                        }
                        let (v, w) = surrogate(rho, adv, eps);
                        value += v / len;
                        weights.push(w * scale / len);
                    }
                    (value, weights, scale / len)
                }
            };
            let kl = if beta > 0.0 {
                step_kls(params, reference, spec, tokens).iter().sum::<f64>()
            } else {
                0.0
            };
            let kl_term = match config.ratio_mode {
                RatioMode::Sequence => kl,
                RatioMode::PerToken => kl / len,
            };
            j += scale * (surr - beta * kl_term);
            if let Some(g) = grad.as_deref_mut() {
                accumulate_step_grads(params, spec, tokens, &weights, g);
                if beta > 0.0 {
                    let kw = vec![-beta * kl_weight; tokens.len()];
                    accumulate_kl_grads(params, reference, spec, tokens, &kw, g);
                }
            }
        }
    }
    Ok(j)
}

/// Mean over groups of `(1/G) Σ_i min(ρ_i A_i, clip(ρ_i) A_i) − β·KL`.
pub fn grpo_objective(
    params: &PolicyParams,
    params_old: &PolicyParams,
    reference: &PolicyParams,
    groups: &[GroupSample],
    config: &GrpoConfig,
) -> Result<f64> {
    objective_and_grad(params, params_old, reference, groups, config, None)
}

/// Analytic gradient of [`grpo_objective`].
pub fn grpo_grad(
    params: &PolicyParams,
    params_old: &PolicyParams,
    reference: &PolicyParams,
    groups: &[GroupSample],
    config: &GrpoConfig,
) -> Result<PolicyParams> {
    let mut g = PolicyParams::zeros();
    objective_and_grad(params, params_old, reference, groups, config, Some(&mut g))?;
    Ok(g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub mean_r_total: f64,
    pub mean_r_vis: f64,
    pub mean_r_sem: f64,
    pub mean_r_struc: f64,
    pub mean_r_len: f64,
    pub well_formed_rate: f64,
    /// Mean trajectory KL to the reference at collection time.
    pub mean_kl: f64,
    /// Norm before clipping.
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

/// Hook called after every optimization step.
pub trait TrainObserver {
    fn on_step(&mut self, record: &TrainLogRecord, params: &PolicyParams, ctx: &RewardContext) -> Result<()>;
}

impl TrainObserver for () {
    fn on_step(&mut self, _: &TrainLogRecord, _: &PolicyParams, _: &RewardContext) -> Result<()> {
        Ok(())
    }
}

/// RNG stream for one prompt slot of one step; stream 0 drives prompt
/// selection.
pub fn rollout_rng(seed: u64, step: usize, slot: usize, slots: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((step * slots + slot) as u64 + 1);
    rng
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Runs `config.steps` on-policy updates starting from `init`.
pub fn train(
    config: &GrpoConfig,
    prompts: &[UserPrompt],
    init: &PolicyParams,
    reference: &PolicyParams,
    reward_ctx: &mut RewardContext,
    max_len: usize,
    observer: &mut dyn TrainObserver,
) -> Result<(PolicyParams, Vec<TrainLogRecord>)> {
    config.validate()?;
    if prompts.is_empty() {
        return Err(Error::Precondition("no training prompts".into()));
    }
    let started = Instant::now();
    let mut params = init.clone();
    let mut log = Vec::with_capacity(config.steps);
    let mut selector = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    for step in 0..config.steps {
        let old = params.clone();
        let mut groups = Vec::with_capacity(config.prompts_per_step);
        for slot in 0..config.prompts_per_step {
            if order.is_empty() {
                order = (0..prompts.len()).collect();
                order.shuffle(&mut selector);
                order.reverse();
            }
            let idx = order.pop().expect("refilled above");
            let mut rng = rollout_rng(config.seed, step, slot, config.prompts_per_step);
            groups.push(collect_group(&prompts[idx], &old, config, &mut rng, reward_ctx, max_len));
        }

        let mut grad = grpo_grad(&params, &old, reference, &groups, config)?;
        let grad_norm = grad.norm();
        if config.max_grad_norm > 0.0 && grad_norm > config.max_grad_norm {
            grad.scale(config.max_grad_norm / grad_norm);
        }
        params.add_scaled(config.lr, &grad);
        if !params.is_finite() {
            return Err(Error::NonFiniteGradient { step });
        }

        let all = || groups.iter().flat_map(|g| g.breakdowns.iter());
        let record = TrainLogRecord {
            step,
            mean_r_total: mean(all().map(|b| b.r_total)),
            mean_r_vis: mean(all().map(|b| b.r_vis)),
            mean_r_sem: mean(all().map(|b| b.r_sem)),
            mean_r_struc: mean(all().map(|b| b.r_struc)),
            mean_r_len: mean(all().map(|b| b.r_len)),
            well_formed_rate: mean(all().map(|b| f64::from(u8::from(b.well_formed)))),
            mean_kl: mean(groups.iter().flat_map(|g| {
                g.trajectories
                    .iter()
                    .map(|t| exact_kl(&old, reference, &g.prompt.spec, &t.tokens))
            })),
            grad_norm,
            wall_time_s: config.log_wall_time.then(|| started.elapsed().as_secs_f64()),
        };
        observer.on_step(&record, &params, reward_ctx)?;
        log.push(record);
    }
    Ok((params, log))
}
