//! Reward model: visual, structure and length rewards plus the normalized
//! ensemble total.

mod normalizer;

pub use normalizer::{RewardNormalizer, RunningStats};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{PromptSpec, Relation, Structure, TaskCategory, TokenId, TokenKind, END};
use crate::synthesizer::{synthesize, Cell, Scene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Weight of the preference reward inside `r_vis`.
    pub alpha: f64,
    /// Weight of the semantic reward inside `r_vis`.
    pub gamma: f64,
    pub l_min: usize,
    pub l_max: usize,
    /// Samples observed before running normalization switches on.
    pub warmup: u64,
    pub sigma_floor: f64,
    /// Also scale the ±1 structure and length rewards.
    pub normalize_binary: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            alpha: 0.5,
            gamma: 0.5,
            l_min: 15,
            l_max: 77,
            warmup: 100,
            sigma_floor: 1e-6,
            normalize_binary: true,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("rewards: {m}")));
        if !(self.alpha >= 0.0 && self.gamma >= 0.0) {
            return bad("alpha and gamma must be non-negative");
        }
        if self.l_min == 0 || self.l_min > self.l_max {
            return bad("need 0 < l_min <= l_max");
        }
        if self.warmup < 1 {
            return bad("warmup must be at least 1");
        }
        if !(self.sigma_floor > 0.0) {
            return bad("sigma_floor must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedOutput {
    pub reason_tokens: Vec<TokenId>,
    pub prompt_tokens: Vec<TokenId>,
    pub well_formed: bool,
}

/// Checks `<reason> .. </reason> <prompt> .. </prompt> [<end>]` with no
/// structure tokens inside either segment and nothing else around them.
pub fn parse_structured_output(tokens: &[TokenId]) -> ParsedOutput {
    parse_inner(tokens).unwrap_or_default()
}

fn parse_inner(tokens: &[TokenId]) -> Option<ParsedOutput> {
    let body = match tokens.split_last() {
        Some((&last, rest)) if last == END => rest,
        _ => tokens,
    };
    let structure = |t: TokenId| match t.kind()? {
        TokenKind::Structure(s) => Some(Some(s)),
        _ => Some(None),
    };
    let mut tags = Vec::with_capacity(4);
    for (i, &t) in body.iter().enumerate() {
        if let Some(s) = structure(t)? {
            tags.push((i, s));
        }
    }
    use Structure::*;
    match tags.as_slice() {
        [(0, ReasonOpen), (rc, ReasonClose), (po, PromptOpen), (pc, PromptClose)]
            if *po == rc + 1 && *pc == body.len() - 1 =>
        {
            Some(ParsedOutput {
                reason_tokens: body[1..*rc].to_vec(),
                prompt_tokens: body[po + 1..*pc].to_vec(),
                well_formed: true,
            })
        }
        _ => None,
    }
}

pub fn structure_reward(parsed: &ParsedOutput) -> f64 {
    if parsed.well_formed {
        1.0
    } else {
        -1.0
    }
}

pub fn length_reward(prompt_tokens: &[TokenId], config: &RewardConfig) -> f64 {
    if (config.l_min..=config.l_max).contains(&prompt_tokens.len()) {
        1.0
    } else {
        -1.0
    }
}

/// Plausibility proxy: collisions cost 0.25 each, detail adds up to 0.3.
pub fn preference_reward(scene: &Scene) -> f64 {
    let raw = 1.0 - 0.25 * scene.collisions() as f64 + 0.1 * scene.detail_level.min(3) as f64;
    raw.clamp(0.0, 1.0)
}

/// True when cell `a` stands in relation `r` to cell `b`.
pub fn relation_holds(a: Cell, relation: Relation, b: Cell) -> bool {
    match relation {
        Relation::LeftOf => a.col < b.col,
        Relation::RightOf => a.col > b.col,
        Relation::Above => a.row < b.row,
        Relation::Below => a.row > b.row,
    }
}

/// Position check on the first instance of each class.
pub fn position_satisfied(scene: &Scene, spec: &PromptSpec) -> bool {
    let (Some(relation), [first, second]) = (spec.relation, spec.objects.as_slice()) else {
        return false;
    };
    match (scene.first(first.class), scene.first(second.class)) {
        (Some(a), Some(b)) => relation_holds(a.cell, relation, b.cell),
        _ => false,
    }
}

/// Graded rubric in `[0, 1]` of how well a scene matches the spec.
pub fn semantic_reward(scene: &Scene, spec: &PromptSpec) -> f64 {
    let present = |i: usize| scene.count(spec.objects[i].class) > 0;
    let color_score = |i: usize| {
        let slot = &spec.objects[i];
        match slot.color {
            Some(c) if scene.has_colored(slot.class, c) => 1.0,
            _ if scene.count(slot.class) > 0 => 0.5,
            _ => 0.0,
        }
    };
    match spec.category {
        TaskCategory::SingleObject => f64::from(u8::from(present(0))),
        TaskCategory::TwoObject => (u8::from(present(0)) + u8::from(present(1))) as f64 / 2.0,
        TaskCategory::Counting => {
            let n = spec.count.unwrap_or(1) as f64;
            let got = scene.count(spec.objects[0].class) as f64;
            (1.0 - (got - n).abs() / n).max(0.0)
        }
        TaskCategory::Colors => color_score(0),
        TaskCategory::Position => {
            let both = present(0) && present(1);
            0.5 * f64::from(u8::from(both))
                + 0.5 * f64::from(u8::from(position_satisfied(scene, spec)))
        }
        TaskCategory::AttributeBinding => (color_score(0) + color_score(1)) / 2.0,
    }
}

pub fn visual_reward(r_pref: f64, r_sem: f64, config: &RewardConfig) -> f64 {
    config.alpha * r_pref + config.gamma * r_sem
}

/// Per-component and total reward for one output.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub well_formed: bool,
    pub prompt_len: usize,
    pub r_pref: f64,
    pub r_sem: f64,
    pub r_vis: f64,
    pub r_struc: f64,
    pub r_len: f64,
    pub r_vis_n: f64,
    pub r_struc_n: f64,
    pub r_len_n: f64,
    pub r_total: f64,
}

/// Raw components plus the scene they came from; independent of any
/// normalizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct RawReward {
    pub parsed: ParsedOutput,
    pub scene: Option<Scene>,
    pub breakdown: RewardBreakdown,
}

/// Parses, synthesizes and scores raw components. Malformed outputs skip
/// synthesis and get `r_vis = 0`.
pub fn score_raw(output: &[TokenId], spec: &PromptSpec, config: &RewardConfig) -> RawReward {
    let parsed = parse_structured_output(output);
    let scene = if parsed.well_formed {
        Some(synthesize(&parsed.prompt_tokens).expect("well-formed segments hold no structure tokens"))
    } else {
        None
    };
    let (r_pref, r_sem) = scene
        .as_ref()
        .map(|s| (preference_reward(s), semantic_reward(s, spec)))
        .unwrap_or((0.0, 0.0));
    let r_vis = if parsed.well_formed {
        visual_reward(r_pref, r_sem, config)
    } else {
        0.0
    };
    let breakdown = RewardBreakdown {
        well_formed: parsed.well_formed,
        prompt_len: parsed.prompt_tokens.len(),
        r_pref,
        r_sem,
        r_vis,
        r_struc: structure_reward(&parsed),
        r_len: length_reward(&parsed.prompt_tokens, config),
        ..Default::default()
    };
    RawReward {
        parsed,
        scene,
        breakdown,
    }
}

/// Fills the normalized fields of `b` from the normalizer's current state.
pub fn apply_normalization(
    b: &mut RewardBreakdown,
    normalizer: &RewardNormalizer,
    config: &RewardConfig,
) {
    let scale = |stats: &RunningStats, x| normalizer::scale(stats, x, config.warmup, config.sigma_floor);
    b.r_vis_n = scale(&normalizer.vis, b.r_vis);
    if config.normalize_binary {
        b.r_struc_n = scale(&normalizer.struc, b.r_struc);
        b.r_len_n = scale(&normalizer.len, b.r_len);
    } else {
        b.r_struc_n = b.r_struc;
        b.r_len_n = b.r_len;
    }
    b.r_total = b.r_vis_n + b.r_struc_n + b.r_len_n;
}

/// Full scoring pipeline: raw components, then a normalizer update, then the
/// normalized total.
pub fn total_reward(
    output: &[TokenId],
    spec: &PromptSpec,
    config: &RewardConfig,
    normalizer: &mut RewardNormalizer,
) -> RewardBreakdown {
    let mut b = score_raw(output, spec, config).breakdown;
    normalizer.observe(b.r_vis, b.r_struc, b.r_len);
    apply_normalization(&mut b, normalizer, config);
    b
}

/// Scores against a normalizer without updating it.
pub fn frozen_reward(
    output: &[TokenId],
    spec: &PromptSpec,
    config: &RewardConfig,
    normalizer: &RewardNormalizer,
) -> RewardBreakdown {
    let mut b = score_raw(output, spec, config).breakdown;
    apply_normalization(&mut b, normalizer, config);
    b
}

/// Reward configuration together with the running normalizer a training
/// run threads through its steps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardContext {
    pub config: RewardConfig,
    pub normalizer: RewardNormalizer,
}

impl RewardContext {
    pub fn new(config: RewardConfig) -> Self {
        RewardContext {
            config,
            normalizer: RewardNormalizer::new(),
        }
    }

    pub fn score(&mut self, output: &[TokenId], spec: &PromptSpec) -> RewardBreakdown {
        total_reward(output, spec, &self.config, &mut self.normalizer)
    }

    pub fn score_frozen(&self, output: &[TokenId], spec: &PromptSpec) -> RewardBreakdown {
        frozen_reward(output, spec, &self.config, &self.normalizer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{vocabulary, Color, ObjectClass};
    use crate::synthesizer::SceneObject;

    fn toks(s: &str) -> Vec<TokenId> {
        vocabulary().tokenize(s).unwrap()
    }

    fn obj(class: ObjectClass, color: Option<Color>, row: u8, col: u8) -> SceneObject {
        SceneObject {
            class,
            color,
            cell: Cell::new(row, col),
        }
    }

    #[test]
    fn parser_cases() {
        let p = parse_structured_output(&toks("<reason> cat </reason><prompt> dog </prompt>"));
        assert!(p.well_formed);
        assert_eq!(p.reason_tokens, toks("cat"));
        assert_eq!(p.prompt_tokens, toks("dog"));

        assert!(!parse_structured_output(&toks("<reason> cat <prompt> dog </prompt>")).well_formed);

        let e = parse_structured_output(&toks("<reason></reason><prompt></prompt>"));
        assert!(e.well_formed && e.reason_tokens.is_empty() && e.prompt_tokens.is_empty());

        assert!(parse_structured_output(&toks("<reason></reason><prompt></prompt> <end>")).well_formed);
        assert!(!parse_structured_output(&toks("a <reason></reason><prompt></prompt>")).well_formed);
        assert!(!parse_structured_output(&toks("<reason></reason> a <prompt></prompt>")).well_formed);
        assert!(!parse_structured_output(&toks("<reason></reason><prompt></prompt> a")).well_formed);
        assert!(!parse_structured_output(&toks("<reason></reason><prompt></prompt> <end> <end>")).well_formed);
        assert!(!parse_structured_output(&[]).well_formed);
        assert!(!parse_structured_output(&[TokenId(999)]).well_formed);
    }

    #[test]
    fn preference_cases() {
        let two = Scene {
            objects: vec![obj(ObjectClass::Cat, None, 0, 0), obj(ObjectClass::Dog, None, 0, 1)],
            detail_level: 0,
        };
        assert_eq!(preference_reward(&two), 1.0);
        let stacked = Scene {
            objects: vec![obj(ObjectClass::Cat, None, 1, 1), obj(ObjectClass::Dog, None, 1, 1)],
            detail_level: 0,
        };
        assert_eq!(preference_reward(&stacked), 0.75);
        let empty = Scene {
            objects: vec![],
            detail_level: 2,
        };
        assert_eq!(preference_reward(&empty), 1.0);
    }

    #[test]
    fn semantic_cases() {
        let red_cube = Scene {
            objects: vec![obj(ObjectClass::Cube, Some(Color::Red), 0, 0)],
            detail_level: 0,
        };
        assert_eq!(semantic_reward(&red_cube, &PromptSpec::colors(ObjectClass::Cube, Color::Red)), 1.0);
        assert_eq!(semantic_reward(&red_cube, &PromptSpec::colors(ObjectClass::Cube, Color::Blue)), 0.5);

        let two_cats = synthesize(&toks("three cat")).unwrap();
        let r = semantic_reward(&two_cats, &PromptSpec::counting(ObjectClass::Cat, 3));
        assert!((r - 2.0 / 3.0).abs() < 1e-15);

        let default = synthesize(&toks("a dog above a cow")).unwrap();
        let spec = PromptSpec::position(ObjectClass::Dog, Relation::Above, ObjectClass::Cow);
        assert_eq!(semantic_reward(&default, &spec), 0.5);
        let fixed = synthesize(&toks("a dog above a cow at-bottom")).unwrap();
        assert_eq!(semantic_reward(&fixed, &spec), 1.0);
    }

    #[test]
    fn visual_cases() {
        let c = RewardConfig::default();
        assert_eq!(visual_reward(1.0, 1.0, &c), 1.0);
        assert_eq!(visual_reward(0.75, 0.5, &c), 0.625);
        let pref_only = RewardConfig {
            alpha: 1.0,
            gamma: 0.0,
            ..c
        };
        assert_eq!(visual_reward(0.3, 0.9, &pref_only), 0.3);
    }

    #[test]
    fn malformed_pipeline() {
        let mut n = RewardNormalizer::new();
        let spec = PromptSpec::single_object(ObjectClass::Cat);
        let b = total_reward(&toks("a cat"), &spec, &RewardConfig::default(), &mut n);
        assert!(!b.well_formed);
        assert_eq!((b.r_vis, b.r_struc, b.r_len), (0.0, -1.0, -1.0));
        assert_eq!(n.samples(), 1);
    }

    #[test]
    fn prewarmup_total_is_unscaled() {
        let mut n = RewardNormalizer::new();
        let spec = PromptSpec::single_object(ObjectClass::Cat);
        let out = toks(
            "<reason> a cat </reason><prompt> a cat detailed bright sharp realistic soft-light \
             high-angle wide-shot textured vivid cinematic detailed bright sharp </prompt><end>",
        );
        let b = total_reward(&out, &spec, &RewardConfig::default(), &mut n);
        assert_eq!(b.prompt_len, 15);
        assert_eq!(b.r_vis, 1.0);
        assert_eq!(b.r_total, b.r_vis + 2.0);
    }

    #[test]
    fn constant_stream_hits_floor() {
        let config = RewardConfig {
            warmup: 5,
            ..Default::default()
        };
        let mut n = RewardNormalizer::new();
        let spec = PromptSpec::single_object(ObjectClass::Cat);
        let mut last = RewardBreakdown::default();
        for _ in 0..10 {
            last = total_reward(&toks("a cat"), &spec, &config, &mut n);
        }
        assert!(last.r_total.is_finite());
        assert_eq!(last.r_struc_n, -1e6);
    }

    #[test]
    fn binary_switch() {
        let config = RewardConfig {
            warmup: 1,
            normalize_binary: false,
            ..Default::default()
        };
        let mut n = RewardNormalizer::new();
        let spec = PromptSpec::single_object(ObjectClass::Cat);
        for _ in 0..3 {
            let b = total_reward(&toks("a cat"), &spec, &config, &mut n);
            assert_eq!((b.r_struc_n, b.r_len_n), (-1.0, -1.0));
        }
    }

    #[test]
    fn frozen_does_not_update() {
        let ctx = RewardContext::new(RewardConfig::default());
        let spec = PromptSpec::single_object(ObjectClass::Cat);
        let a = ctx.score_frozen(&toks("a cat"), &spec);
        let b = ctx.score_frozen(&toks("a cat"), &spec);
        assert_eq!(a, b);
        assert_eq!(ctx.normalizer.samples(), 0);
    }
}
