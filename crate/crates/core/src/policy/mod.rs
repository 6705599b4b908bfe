//! Autoregressive log-linear token policy.

mod features;
mod params;

pub use features::{bucket, FeatureState, Segment, Table, MAX_ACTIVE, ROWS, TABLES};
pub use params::PolicyParams;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::grammar::{PromptSpec, Structure, TokenId, UserPrompt, END, VOCAB_SIZE};

pub const DEFAULT_MAX_LEN: usize = 96;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    EndToken,
    MaxLength,
    /// Stopped right after emitting `</reason>` (reasoning-only sampling).
    ReasonClose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_id: u64,
    pub tokens: Vec<TokenId>,
    pub per_step_logprob: Vec<f64>,
    pub total_logprob: f64,
    pub terminated: Termination,
}

type Dist = [f64; VOCAB_SIZE];

fn logits(params: &PolicyParams, rows: &[usize]) -> Dist {
    let mut z = [0.0; VOCAB_SIZE];
    for &r in rows {
        for (zj, w) in z.iter_mut().zip(params.row(r)) {
            *zj += w;
        }
    }
    z
}

fn log_softmax(mut z: Dist) -> Dist {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|&x| (x - max).exp()).sum();
    let lse = max + sum.ln();
    z.iter_mut().for_each(|x| *x -= lse);
    z
}

/// Log-probabilities over the vocabulary at the given active rows.
pub fn log_probs_at(params: &PolicyParams, rows: &[usize]) -> [f64; VOCAB_SIZE] {
    log_softmax(logits(params, rows))
}

/// Calls `f(step, active_rows, emitted)` for each position of `tokens`.
pub fn walk_contexts(spec: &PromptSpec, tokens: &[TokenId], mut f: impl FnMut(usize, &[usize], TokenId)) {
    let mut state = FeatureState::new(spec);
    let mut rows = [0usize; MAX_ACTIVE];
    for (t, &tok) in tokens.iter().enumerate() {
        let n = state.active_rows(&mut rows);
        f(t, &rows[..n], tok);
        state.push(tok);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Decode {
    Sample,
    Greedy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stop {
    End,
    ReasonClose,
}

fn draw(logp: &Dist, rng: &mut impl Rng) -> TokenId {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (j, &lp) in logp.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last_positive = j;
        }
        acc += p;
        if u < acc {
            return TokenId(j as u16);
        }
    }
    TokenId(last_positive as u16)
}

fn argmax(logp: &Dist) -> TokenId {
    let mut best = 0;
    for j in 1..VOCAB_SIZE {
        if logp[j] > logp[best] {
            best = j;
        }
    }
    TokenId(best as u16)
}

fn decode<R: Rng>(
    params: &PolicyParams,
    prompt: &UserPrompt,
    prefix: &[TokenId],
    mut rng: Option<&mut R>,
    max_len: usize,
    mode: Decode,
    stop: Stop,
) -> Trajectory {
    let mut state = FeatureState::new(&prompt.spec);
    let mut rows = [0usize; MAX_ACTIVE];
    let mut tokens = Vec::with_capacity(max_len);
    let mut per_step = Vec::with_capacity(max_len);
    let reason_close = TokenId::from(Structure::ReasonClose);
    let mut terminated = Termination::MaxLength;
    while tokens.len() < max_len {
        let n = state.active_rows(&mut rows);
        let logp = log_probs_at(params, &rows[..n]);
        let tok = match prefix.get(tokens.len()) {
            Some(&forced) => forced,
            None => match mode {
                Decode::Greedy => argmax(&logp),
                Decode::Sample => draw(&logp, rng.as_deref_mut().expect("sampling needs an rng")),
            },
        };
        tokens.push(tok);
        per_step.push(logp[tok.index()]);
        state.push(tok);
        if tok == END {
            terminated = Termination::EndToken;
            break;
        }
        if stop == Stop::ReasonClose && tok == reason_close && tokens.len() >= prefix.len() {
            terminated = Termination::ReasonClose;
            break;
        }
    }
    Trajectory {
        prompt_id: prompt.spec.id,
        total_logprob: per_step.iter().sum(),
        tokens,
        per_step_logprob: per_step,
        terminated,
    }
}

/// Samples one output, stopping at `<end>` or after `max_len` tokens.
pub fn sample(params: &PolicyParams, prompt: &UserPrompt, rng: &mut impl Rng, max_len: usize) -> Trajectory {
    decode(params, prompt, &[], Some(rng), max_len, Decode::Sample, Stop::End)
}

/// Like [`sample`] but with the first tokens forced to `prefix`. Forced
/// tokens are still scored.
pub fn sample_with_prefix(
    params: &PolicyParams,
    prompt: &UserPrompt,
    prefix: &[TokenId],
    rng: &mut impl Rng,
    max_len: usize,
) -> Trajectory {
    decode(params, prompt, prefix, Some(rng), max_len, Decode::Sample, Stop::End)
}

/// Samples only the reasoning part: stops right after `</reason>`.
pub fn sample_reasoning(
    params: &PolicyParams,
    prompt: &UserPrompt,
    rng: &mut impl Rng,
    max_len: usize,
) -> Trajectory {
    decode(params, prompt, &[], Some(rng), max_len, Decode::Sample, Stop::ReasonClose)
}

/// Argmax decoding; ties go to the lowest token id.
pub fn greedy(params: &PolicyParams, prompt: &UserPrompt, max_len: usize) -> Trajectory {
    decode::<rand_chacha::ChaCha8Rng>(params, prompt, &[], None, max_len, Decode::Greedy, Stop::End)
}

/// Per-step log-probabilities of `tokens`.
pub fn step_log_probs(params: &PolicyParams, spec: &PromptSpec, tokens: &[TokenId]) -> Vec<f64> {
    let mut out = Vec::with_capacity(tokens.len());
    walk_contexts(spec, tokens, |_, rows, tok| {
        out.push(log_probs_at(params, rows)[tok.index()]);
    });
    out
}

pub fn log_prob(params: &PolicyParams, spec: &PromptSpec, tokens: &[TokenId]) -> f64 {
    step_log_probs(params, spec, tokens).iter().sum()
}

/// Adds `Σ_t weights[t] · ∇ log π(y_t | context_t)` into `grad`.
pub fn accumulate_step_grads(
    params: &PolicyParams,
    spec: &PromptSpec,
    tokens: &[TokenId],
    weights: &[f64],
    grad: &mut PolicyParams,
) {
    debug_assert_eq!(weights.len(), tokens.len());
    walk_contexts(spec, tokens, |t, rows, tok| {
        let w = weights[t];
        if w == 0.0 {
            return;
        }
        let logp = log_probs_at(params, rows);
        let mut g = [0.0; VOCAB_SIZE];
        for (gj, lp) in g.iter_mut().zip(logp) {
            *gj = -w * lp.exp();
        }
        g[tok.index()] += w;
        for &r in rows {
            for (x, gj) in grad.row_mut(r).iter_mut().zip(&g) {
                *x += gj;
            }
        }
    });
}

/// Gradient of [`log_prob`] with respect to every weight.
pub fn log_prob_grad(params: &PolicyParams, spec: &PromptSpec, tokens: &[TokenId]) -> PolicyParams {
    let mut grad = PolicyParams::zeros();
    accumulate_step_grads(params, spec, tokens, &vec![1.0; tokens.len()], &mut grad);
    grad
}

fn categorical_kl(logp: &Dist, logq: &Dist) -> f64 {
    logp.iter()
        .zip(logq)
        .map(|(&lp, &lq)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - lq)
            }
        })
        .sum::<f64>()
        .max(0.0)
}

/// Per-context exact KL(π_θ ‖ π_ref) over the visited contexts of `tokens`.
pub fn step_kls(params: &PolicyParams, reference: &PolicyParams, spec: &PromptSpec, tokens: &[TokenId]) -> Vec<f64> {
    let mut out = Vec::with_capacity(tokens.len());
    walk_contexts(spec, tokens, |_, rows, _| {
        out.push(categorical_kl(&log_probs_at(params, rows), &log_probs_at(reference, rows)));
    });
    out
}

/// Sum of exact per-context KLs along a trajectory.
pub fn exact_kl(params: &PolicyParams, reference: &PolicyParams, spec: &PromptSpec, tokens: &[TokenId]) -> f64 {
    step_kls(params, reference, spec, tokens).iter().sum()
}

/// Adds `Σ_t weights[t] · ∇_θ KL_t` into `grad`, using
/// `∂KL/∂z_j = p_j (log p_j − log q_j − KL)`.
pub fn accumulate_kl_grads(
    params: &PolicyParams,
    reference: &PolicyParams,
    spec: &PromptSpec,
    tokens: &[TokenId],
    weights: &[f64],
    grad: &mut PolicyParams,
) {
    walk_contexts(spec, tokens, |t, rows, _| {
        let w = weights[t];
        if w == 0.0 {
            return;
        }
        let logp = log_probs_at(params, rows);
        let logq = log_probs_at(reference, rows);
        let kl: f64 = logp.iter().zip(&logq).map(|(&lp, &lq)| lp.exp() * (lp - lq)).sum();
        let mut g = [0.0; VOCAB_SIZE];
        for j in 0..VOCAB_SIZE {
            g[j] = w * logp[j].exp() * (logp[j] - logq[j] - kl);
        }
        for &r in rows {
            for (x, gj) in grad.row_mut(r).iter_mut().zip(&g) {
                *x += gj;
            }
        }
    });
}

pub fn exact_kl_grad(
    params: &PolicyParams,
    reference: &PolicyParams,
    spec: &PromptSpec,
    tokens: &[TokenId],
) -> PolicyParams {
    let mut grad = PolicyParams::zeros();
    accumulate_kl_grads(params, reference, spec, tokens, &vec![1.0; tokens.len()], &mut grad);
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{ObjectClass, Relation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn prompt() -> UserPrompt {
        UserPrompt::new(PromptSpec::position(ObjectClass::Dog, Relation::Above, ObjectClass::Cow))
    }

    fn random_params(seed: u64, scale: f64) -> PolicyParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = PolicyParams::zeros();
        p.as_mut_slice()
            .iter_mut()
            .for_each(|x| *x = scale * (rng.random::<f64>() - 0.5));
        p
    }

    #[test]
    fn probabilities_sum_to_one() {
        let p = random_params(1, 4.0);
        let pr = prompt();
        let traj = sample(&p, &pr, &mut ChaCha8Rng::seed_from_u64(2), 40);
        walk_contexts(&pr.spec, &traj.tokens, |_, rows, _| {
            let s: f64 = log_probs_at(&p, rows).iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        });
    }

    #[test]
    fn recorded_logprob_matches_rescoring() {
        let p = random_params(3, 2.0);
        let pr = prompt();
        let traj = sample(&p, &pr, &mut ChaCha8Rng::seed_from_u64(4), 96);
        let lp = log_prob(&p, &pr.spec, &traj.tokens);
        assert!((lp - traj.total_logprob).abs() < 1e-12);
        assert_eq!(traj.tokens.len(), traj.per_step_logprob.len());
    }

    #[test]
    fn uniform_params_give_uniform_logprob() {
        let pr = prompt();
        let toks: Vec<TokenId> = (0..7).map(|i| TokenId(i * 3)).collect();
        let lp = log_prob(&PolicyParams::zeros(), &pr.spec, &toks);
        assert!((lp - 7.0 * (1.0 / VOCAB_SIZE as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let p = random_params(5, 1.0);
        let a = sample(&p, &prompt(), &mut ChaCha8Rng::seed_from_u64(9), 96);
        let b = sample(&p, &prompt(), &mut ChaCha8Rng::seed_from_u64(9), 96);
        assert_eq!(a, b);
    }

    #[test]
    fn prefix_is_forced_and_scored() {
        let p = random_params(6, 1.0);
        let pr = prompt();
        let prefix = vec![TokenId::from(Structure::ReasonOpen), TokenId::from(Structure::ReasonClose)];
        let t = sample_with_prefix(&p, &pr, &prefix, &mut ChaCha8Rng::seed_from_u64(1), 96);
        assert_eq!(&t.tokens[..2], &prefix[..]);
        assert!((log_prob(&p, &pr.spec, &t.tokens) - t.total_logprob).abs() < 1e-12);
    }

    #[test]
    fn reasoning_stops_at_close_tag() {
        let mut p = PolicyParams::zeros();
        // bias every context towards `</reason>`
        let close = TokenId::from(Structure::ReasonClose).index();
        p.row_mut(0)[close] = 5.0;
        let t = sample_reasoning(&p, &prompt(), &mut ChaCha8Rng::seed_from_u64(0), 96);
        assert_eq!(t.terminated, Termination::ReasonClose);
        assert_eq!(t.tokens.last().unwrap().index(), close);
    }

    #[test]
    fn greedy_ties_pick_lowest_id() {
        let t = greedy(&PolicyParams::zeros(), &prompt(), 3);
        assert_eq!(t.tokens, vec![TokenId(0); 3]);
        assert_eq!(t.terminated, Termination::MaxLength);
    }

    #[test]
    fn empty_trajectory_zero_gradient() {
        let g = log_prob_grad(&random_params(1, 1.0), &prompt().spec, &[]);
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn kl_zero_for_identical_and_nonnegative() {
        let p = random_params(7, 3.0);
        let q = random_params(8, 3.0);
        let pr = prompt();
        let t = sample(&p, &pr, &mut ChaCha8Rng::seed_from_u64(0), 50);
        assert_eq!(exact_kl(&p, &p, &pr.spec, &t.tokens), 0.0);
        assert!(exact_kl(&p, &q, &pr.spec, &t.tokens) >= 0.0);
    }
}
