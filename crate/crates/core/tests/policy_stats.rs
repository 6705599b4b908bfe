use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reprompt_core::grammar::{vocabulary, ObjectClass, PromptSpec, Relation};
use reprompt_core::policy::{exact_kl, exact_kl_grad, log_prob, log_probs_at, sample, walk_contexts};
use reprompt_core::{PolicyParams, UserPrompt};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn prompt() -> UserPrompt {
    UserPrompt::new(PromptSpec::position(ObjectClass::Cat, Relation::RightOf, ObjectClass::Cup))
}

fn random_params(seed: u64, scale: f64) -> PolicyParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = PolicyParams::zeros();
    for w in p.as_mut_slice() {
        *w = scale * (2.0 * rng.random::<f64>() - 1.0);
    }
    p
}

fn first_rows(prompt: &UserPrompt) -> Vec<usize> {
    let mut rows = Vec::new();
    let first = vocabulary().lookup("a").unwrap();
    walk_contexts(&prompt.spec, &[first], |_, r, _| rows = r.to_vec());
    rows
}

fn chi_square_first_token(params: &PolicyParams, n: usize, seed: u64) {
    let p = prompt();
    let probs = log_probs_at(params, &first_rows(&p)).map(f64::exp);

    let mut counts = vec![0usize; probs.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n {
        counts[sample(params, &p, &mut rng, 1).tokens[0].index()] += 1;
    }

    // pool cells with small expectation into one
    let (mut stat, mut cells, mut pooled_e, mut pooled_o) = (0.0, 0usize, 0.0, 0.0);
    for (&c, &q) in counts.iter().zip(&probs) {
        let e = q * n as f64;
        if e < 5.0 {
            pooled_e += e;
            pooled_o += c as f64;
        } else {
            stat += (c as f64 - e).powi(2) / e;
            cells += 1;
        }
    }
    if pooled_e > 0.0 {
        stat += (pooled_o - pooled_e).powi(2) / pooled_e;
        cells += 1;
    }
    let crit = ChiSquared::new((cells - 1) as f64).unwrap().inverse_cdf(0.999);
    assert!(stat < crit, "chi-square {stat} >= {crit}");
}

#[test]
fn zero_params_sample_uniformly() {
    chi_square_first_token(&PolicyParams::zeros(), 10_000, 1);
}

#[test]
fn first_token_frequencies_match_softmax() {
    chi_square_first_token(&random_params(1, 1.0), 40_000, 2);
}

#[test]
fn large_bias_dominates_sampling() {
    let p = prompt();
    let mut params = PolicyParams::zeros();
    let target = vocabulary().lookup("<reason>").unwrap();
    let row = first_rows(&p)[0];
    params.row_mut(row)[target.index()] = 10.0;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let hits = (0..5000)
        .filter(|_| sample(&params, &p, &mut rng, 1).tokens[0] == target)
        .count();
    assert!(hits as f64 / 5000.0 > 0.99);
}

#[test]
fn exact_kl_agrees_with_monte_carlo() {
    let p = prompt();
    let params = random_params(4, 0.6);
    let reference = random_params(5, 0.6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 4000;
    let mut diffs = Vec::with_capacity(n);
    for _ in 0..n {
        let t = sample(&params, &p, &mut rng, 24);
        let mc = log_prob(&params, &p.spec, &t.tokens) - log_prob(&reference, &p.spec, &t.tokens);
        diffs.push(mc - exact_kl(&params, &reference, &p.spec, &t.tokens));
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    assert!(mean.abs() < 4.0 * se, "mean difference {mean} vs stderr {se}");
}

#[test]
fn kl_gradient_matches_finite_differences() {
    let p = prompt();
    let params = random_params(7, 0.5);
    let reference = random_params(8, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let t = sample(&params, &p, &mut rng, 30).tokens;
    let grad = exact_kl_grad(&params, &reference, &p.spec, &t);

    let mut rows = Vec::new();
    walk_contexts(&p.spec, &t, |_, r, _| rows.extend_from_slice(r));
    let v = vocabulary().len();
    let h = 1e-5;
    for _ in 0..50 {
        let i = rows[rng.random_range(0..rows.len())] * v + rng.random_range(0..v);
        let mut plus = params.clone();
        plus.as_mut_slice()[i] += h;
        let mut minus = params.clone();
        minus.as_mut_slice()[i] -= h;
        let fd = (exact_kl(&plus, &reference, &p.spec, &t) - exact_kl(&minus, &reference, &p.spec, &t)) / (2.0 * h);
        let an = grad.as_slice()[i];
        assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-6), "coord {i}: {fd} vs {an}");
    }
}
