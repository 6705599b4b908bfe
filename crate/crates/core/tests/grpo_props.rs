use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reprompt_core::grammar::{ObjectClass, PromptSpec};
use reprompt_core::grpo::{advantages, collect_group, grpo_grad, grpo_objective};
use reprompt_core::policy::exact_kl_grad;
use reprompt_core::{GroupSample, GrpoConfig, PolicyParams, RewardConfig, RewardContext, UserPrompt};

fn random_params(rng: &mut ChaCha8Rng, scale: f64) -> PolicyParams {
    let mut p = PolicyParams::zeros();
    for w in p.as_mut_slice() {
        *w = scale * (2.0 * rng.random::<f64>() - 1.0);
    }
    p
}

fn group(seed: u64, params: &PolicyParams, config: &GrpoConfig) -> GroupSample {
    let prompt = UserPrompt::new(PromptSpec::two_object(ObjectClass::Car, ObjectClass::Bird));
    let mut ctx = RewardContext::new(RewardConfig::default());
    collect_group(&prompt, params, config, &mut ChaCha8Rng::seed_from_u64(seed), &mut ctx, 30)
}

proptest! {
    #[test]
    fn advantages_are_standardized(rewards in prop::collection::vec(-50.0..50.0f64, 2..16)) {
        let a = advantages(&rewards);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let sd = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let spread = rewards.iter().cloned().fold(f64::MIN, f64::max) - rewards.iter().cloned().fold(f64::MAX, f64::min);
        if spread > 1e-6 {
            prop_assert!(mean.abs() <= 1e-9);
            prop_assert!((sd - 1.0).abs() <= 1e-9);
        }
    }

    /// Dyadic rewards and a power-of-two group keep the arithmetic exact.
    #[test]
    fn objective_ignores_reward_shift(eighths in prop::collection::vec(-40i32..40, 4), shift in -20i32..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let config = GrpoConfig::default();
        let old = random_params(&mut rng, 0.4);
        let reference = random_params(&mut rng, 0.4);
        let mut theta = old.clone();
        theta.add_scaled(1.0, &random_params(&mut rng, 0.02));

        let mut g = group(3, &old, &config);
        let rewards: Vec<f64> = eighths.iter().map(|&k| k as f64 / 8.0).collect();
        g.advantages = advantages(&rewards);
        let mut shifted = g.clone();
        shifted.advantages = advantages(&rewards.iter().map(|r| r + shift as f64).collect::<Vec<_>>());
        let a = grpo_objective(&theta, &old, &reference, &[g], &config).unwrap();
        let b = grpo_objective(&theta, &old, &reference, &[shifted], &config).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn zero_advantages_leave_only_the_kl_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let config = GrpoConfig::default();
    let params = random_params(&mut rng, 0.5);
    let reference = random_params(&mut rng, 0.5);
    let mut g = group(4, &params, &config);
    g.advantages = vec![0.0; g.advantages.len()];

    let got = grpo_grad(&params, &params, &reference, std::slice::from_ref(&g), &config).unwrap();
    let mut want = PolicyParams::zeros();
    for t in &g.trajectories {
        let kl = exact_kl_grad(&params, &reference, &g.prompt.spec, &t.tokens);
        want.add_scaled(-config.kl_coef / g.trajectories.len() as f64, &kl);
    }
    for (a, b) in got.as_slice().iter().zip(want.as_slice()) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}
