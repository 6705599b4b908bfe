//! Supervised warm start from rule-based target outputs.
//!
//! The oracle's reasoning segment restates the constraints and, for spatial
//! prompts, names a layout cue for the second object. Its enhanced prompt is
//! synthesizer-naive on purpose: counts stay numerals and relations stay
//! words, so only a later optimization stage can learn to carry the layout
//! cue over.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{
    detail, numeral, Function, Layout, PromptSpec, Relation, Structure, TaskCategory, TokenId,
    UserPrompt, DETAIL_SURFACES, END,
};
use crate::policy::{accumulate_step_grads, log_prob, PolicyParams};
use crate::rewards::RewardConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleTrace {
    pub spec_id: u64,
    pub target_tokens: Vec<TokenId>,
}

/// Reasoning content (without tags).
pub fn oracle_reasoning(spec: &PromptSpec) -> Vec<TokenId> {
    let a = TokenId::from(Function::A);
    let and = TokenId::from(Function::And);
    let order = spec.mention_order();
    let obj = |i: usize| TokenId::from(order[i].class);
    let color = |i: usize| TokenId::from(order[i].color.expect("validated color slot"));
    match spec.category {
        TaskCategory::SingleObject => vec![a, obj(0)],
        TaskCategory::TwoObject => vec![a, obj(0), and, a, obj(1)],
        TaskCategory::Counting => {
            let n = spec.count.expect("validated count") as usize;
            let mut out = Vec::with_capacity(2 * n - 1);
            for i in 0..n {
                if i > 0 {
                    out.push(Function::Comma.into());
                }
                out.push(obj(0));
            }
            out
        }
        TaskCategory::Colors => vec![a, color(0), obj(0)],
        TaskCategory::Position => {
            let rel = spec.canonical_relation().expect("validated relation");
            let cue = match rel {
                Relation::LeftOf => Layout::Right,
                _ => Layout::Bottom,
            };
            vec![a, obj(0), rel.into(), a, obj(1), cue.into()]
        }
        TaskCategory::AttributeBinding => vec![a, color(0), obj(0), and, a, color(1), obj(1)],
    }
}

/// Enhanced-prompt content before padding.
pub fn oracle_prompt_content(spec: &PromptSpec) -> Vec<TokenId> {
    let a = TokenId::from(Function::A);
    let order = spec.mention_order();
    match spec.category {
        TaskCategory::Counting => vec![
            numeral(spec.count.expect("validated count")),
            order[0].class.into(),
        ],
        TaskCategory::Position => {
            let rel = spec.canonical_relation().expect("validated relation");
            vec![a, order[0].class.into(), rel.into(), a, order[1].class.into()]
        }
        _ => oracle_reasoning(spec),
    }
}

/// Full target output `<reason> H </reason> <prompt> P' </prompt> <end>`,
/// with `P'` padded by cycling detail tokens up to `l_min` tokens.
pub fn oracle_trace(spec: &PromptSpec, config: &RewardConfig) -> OracleTrace {
    let mut prompt = oracle_prompt_content(spec);
    let mut k = 0usize;
    while prompt.len() < config.l_min {
        prompt.push(detail((k % DETAIL_SURFACES.len()) as u8));
        k += 1;
    }
    let mut target = vec![TokenId::from(Structure::ReasonOpen)];
    target.extend(oracle_reasoning(spec));
    target.push(Structure::ReasonClose.into());
    target.push(Structure::PromptOpen.into());
    target.extend(prompt);
    target.push(Structure::PromptClose.into());
    target.push(END);
    OracleTrace {
        spec_id: spec.id,
        target_tokens: target,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Fraction of the training split used for SFT; the rest is left for RL.
    pub fraction: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            epochs: 8,
            lr: 0.5,
            batch_size: 32,
            fraction: 8.0 / 9.0,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig("sft: lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("sft: batch_size must be at least 1".into()));
        }
        if !(self.fraction > 0.0 && self.fraction < 1.0) {
            return Err(Error::InvalidConfig("sft: fraction must be in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftEpochLog {
    pub epoch: usize,
    /// Mean per-sequence negative log-likelihood over all traces after the
    /// epoch (epoch 0 is the starting point).
    pub mean_nll: f64,
}

/// Mean negative log-likelihood of the targets.
pub fn mean_nll(params: &PolicyParams, data: &[(UserPrompt, OracleTrace)]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let total: f64 = data
        .iter()
        .map(|(p, t)| -log_prob(params, &p.spec, &t.target_tokens))
        .sum();
    total / data.len() as f64
}

/// Mini-batch gradient ascent on the mean target log-likelihood.
pub fn sft_fit(
    init: &PolicyParams,
    data: &[(UserPrompt, OracleTrace)],
    config: &SftConfig,
    rng: &mut impl Rng,
) -> (PolicyParams, Vec<SftEpochLog>) {
    let mut params = init.clone();
    let mut log = vec![SftEpochLog {
        epoch: 0,
        mean_nll: mean_nll(&params, data),
    }];
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(rng);
        for batch in order.chunks(config.batch_size) {
            let mut grad = PolicyParams::zeros();
            for &i in batch {
                let (prompt, trace) = &data[i];
                let ones = vec![1.0; trace.target_tokens.len()];
                accumulate_step_grads(&params, &prompt.spec, &trace.target_tokens, &ones, &mut grad);
            }
            params.add_scaled(config.lr / batch.len() as f64, &grad);
        }
        log.push(SftEpochLog {
            epoch,
            mean_nll: mean_nll(&params, data),
        });
    }
    (params, log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{spec_space, vocabulary, Color, ObjectClass};
    use crate::rewards::{length_reward, parse_structured_output, structure_reward};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn text(t: &[TokenId]) -> String {
        vocabulary().detokenize(t).unwrap()
    }

    #[test]
    fn colors_adjacent_and_counting_numeral() {
        let c = RewardConfig::default();
        let t = oracle_trace(&PromptSpec::colors(ObjectClass::Cube, Color::Red), &c);
        let p = parse_structured_output(&t.target_tokens);
        assert!(text(&p.prompt_tokens).starts_with("a red cube"));

        let t = oracle_trace(&PromptSpec::counting(ObjectClass::Cat, 3), &c);
        let p = parse_structured_output(&t.target_tokens);
        assert!(text(&p.prompt_tokens).starts_with("three cat"));
        assert_eq!(text(&p.reason_tokens), "cat , cat , cat");
    }

    #[test]
    fn position_is_canonicalized() {
        let c = RewardConfig::default();
        let spec = PromptSpec::position(ObjectClass::Dog, Relation::Below, ObjectClass::Cow);
        let p = parse_structured_output(&oracle_trace(&spec, &c).target_tokens);
        assert_eq!(text(&p.reason_tokens), "a cow above a dog at-bottom");
        assert!(text(&p.prompt_tokens).starts_with("a cow above a dog detailed"));
    }

    #[test]
    fn every_spec_scores_well_formed_and_in_length() {
        let c = RewardConfig::default();
        for cat in TaskCategory::ALL {
            for spec in spec_space(cat) {
                let t = oracle_trace(&spec, &c);
                let p = parse_structured_output(&t.target_tokens);
                assert_eq!(structure_reward(&p), 1.0);
                assert_eq!(length_reward(&p.prompt_tokens, &c), 1.0);
                assert_eq!(p.prompt_tokens.len(), c.l_min);
            }
        }
    }

    #[test]
    fn zero_epochs_and_tiny_lr() {
        let c = RewardConfig::default();
        let data: Vec<_> = spec_space(TaskCategory::Colors)
            .into_iter()
            .take(10)
            .map(|s| {
                let t = oracle_trace(&s, &c);
                (UserPrompt::new(s), t)
            })
            .collect();
        let init = PolicyParams::zeros();
        let cfg = SftConfig {
            epochs: 0,
            ..Default::default()
        };
        let (p, log) = sft_fit(&init, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(p, init);
        assert_eq!(log.len(), 1);

        let cfg = SftConfig {
            epochs: 1,
            lr: 1e-12,
            ..Default::default()
        };
        let (p, _) = sft_fit(&init, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(p.as_slice().iter().all(|x| x.abs() < 1e-10));

        let cfg = SftConfig {
            epochs: 2,
            ..Default::default()
        };
        let (_, log) = sft_fit(&init, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(log.last().unwrap().mean_nll < log[0].mean_nll);
    }
}
