use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::spec::{spec_space, ObjectSlot, PromptSpec, TaskCategory, UserPrompt};
use super::vocab::{Relation, TokenId};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub train: Vec<UserPrompt>,
    pub eval: Vec<UserPrompt>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// One line of a dataset file. SFT trace files reuse it with
/// `target_tokens` filled in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub id: u64,
    pub category: TaskCategory,
    pub objects: Vec<ObjectSlot>,
    pub count: Option<u8>,
    pub relation: Option<Relation>,
    pub user_prompt: Vec<TokenId>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_tokens: Option<Vec<TokenId>>,
}

impl DatasetRecord {
    pub fn new(prompt: &UserPrompt, split: Split) -> Self {
        let spec = &prompt.spec;
        DatasetRecord {
            id: spec.id,
            category: spec.category,
            objects: spec.objects.clone(),
            count: spec.count,
            relation: spec.relation,
            user_prompt: prompt.tokens.clone(),
            split,
            target_tokens: None,
        }
    }

    /// Rebuilds the prompt, checking that the stored tokens match the template.
    pub fn to_prompt(&self) -> Result<UserPrompt> {
        let spec = PromptSpec {
            id: self.id,
            category: self.category,
            objects: self.objects.clone(),
            count: self.count,
            relation: self.relation,
        };
        spec.validate()?;
        let prompt = UserPrompt::new(spec);
        if prompt.tokens != self.user_prompt {
            return Err(Error::Precondition(format!(
                "record {} has tokens that do not match its template",
                self.id
            )));
        }
        Ok(prompt)
    }
}

impl Dataset {
    pub fn records(&self) -> Vec<DatasetRecord> {
        self.train
            .iter()
            .map(|p| DatasetRecord::new(p, Split::Train))
            .chain(self.eval.iter().map(|p| DatasetRecord::new(p, Split::Eval)))
            .collect()
    }

    pub fn from_records(records: &[DatasetRecord]) -> Result<Self> {
        let mut ds = Dataset::default();
        for r in records {
            let prompt = r.to_prompt()?;
            match r.split {
                Split::Train => ds.train.push(prompt),
                Split::Eval => ds.eval.push(prompt),
            }
        }
        Ok(ds)
    }
}

/// Samples train and eval prompts per category.
///
/// Each category's distinct spec space is shuffled. When the request fits in
/// the space, specs are drawn without replacement and the first
/// `round(n * split_ratio)` go to train. Otherwise (only with
/// `allow_replacement`) the shuffled space is partitioned into a train pool
/// and an eval pool by the same ratio; each side exhausts its pool and then
/// resamples from it with replacement. Either way no spec key appears in both
/// splits.
pub fn generate_dataset(
    seed: u64,
    per_category: &BTreeMap<TaskCategory, usize>,
    split_ratio: f64,
    allow_replacement: bool,
) -> Result<Dataset> {
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(Error::Precondition(format!(
            "split_ratio must be in (0, 1), got {split_ratio}"
        )));
    }

    let mut ds = Dataset::default();
    let mut next_id = 0u64;
    for (&category, &n) in per_category {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(category.index() as u64 + 1);

        let mut space = spec_space(category);
        space.shuffle(&mut rng);
        let m = space.len();
        let n_train = ((n as f64) * split_ratio).round() as usize;
        let n_eval = n - n_train;

        let (train, eval): (Vec<PromptSpec>, Vec<PromptSpec>) = if n <= m {
            let mut chosen = space;
            chosen.truncate(n);
            let eval = chosen.split_off(n_train);
            (chosen, eval)
        } else if !allow_replacement {
            return Err(Error::SpecSpaceExhausted {
                category,
                requested: n,
                available: m,
            });
        } else {
            if m < 2 {
                return Err(Error::SpecSpaceExhausted {
                    category,
                    requested: n,
                    available: m,
                });
            }
            let train_pool = ((m as f64) * split_ratio).round().clamp(1.0, (m - 1) as f64) as usize;
            let mut train_specs = space;
            let eval_specs = train_specs.split_off(train_pool);
            (
                fill_from_pool(&train_specs, n_train, &mut rng),
                fill_from_pool(&eval_specs, n_eval, &mut rng),
            )
        };

        for spec in train {
            ds.train.push(UserPrompt::new(spec.with_id(next_id)));
            next_id += 1;
        }
        for spec in eval {
            ds.eval.push(UserPrompt::new(spec.with_id(next_id)));
            next_id += 1;
        }
    }
    Ok(ds)
}

fn fill_from_pool(pool: &[PromptSpec], n: usize, rng: &mut impl Rng) -> Vec<PromptSpec> {
    let mut out: Vec<PromptSpec> = pool.iter().take(n).cloned().collect();
    while out.len() < n {
        out.push(pool[rng.random_range(0..pool.len())].clone());
    }
    out
}

/// True when no spec key occurs in both splits.
pub fn splits_disjoint(ds: &Dataset) -> bool {
    let train: HashSet<_> = ds.train.iter().map(|p| p.spec.key()).collect();
    ds.eval.iter().all(|p| !train.contains(&p.spec.key()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts(pairs: &[(TaskCategory, usize)]) -> BTreeMap<TaskCategory, usize> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn position_split_arithmetic() {
        let ds = generate_dataset(7, &counts(&[(TaskCategory::Position, 10)]), 0.8, false).unwrap();
        assert_eq!(ds.train.len(), 8);
        assert_eq!(ds.eval.len(), 2);
        assert!(splits_disjoint(&ds));
    }

    #[test]
    fn deterministic() {
        let c = counts(&[(TaskCategory::Position, 10), (TaskCategory::Colors, 30)]);
        assert_eq!(
            generate_dataset(7, &c, 0.8, true).unwrap(),
            generate_dataset(7, &c, 0.8, true).unwrap()
        );
        assert_ne!(
            generate_dataset(7, &c, 0.8, true).unwrap(),
            generate_dataset(8, &c, 0.8, true).unwrap()
        );
    }

    #[test]
    fn exhausted_space_without_replacement() {
        let err = generate_dataset(0, &counts(&[(TaskCategory::SingleObject, 9)]), 0.8, false)
            .unwrap_err();
        match err {
            Error::SpecSpaceExhausted {
                category,
                requested,
                available,
            } => {
                assert_eq!(category, TaskCategory::SingleObject);
                assert_eq!((requested, available), (9, 8));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn replacement_keeps_splits_disjoint() {
        let ds = generate_dataset(3, &counts(&[(TaskCategory::SingleObject, 100)]), 0.8, true).unwrap();
        assert_eq!(ds.train.len(), 80);
        assert_eq!(ds.eval.len(), 20);
        assert!(splits_disjoint(&ds));
    }

    #[test]
    fn bad_ratio() {
        assert!(generate_dataset(0, &counts(&[(TaskCategory::Colors, 4)]), 1.0, false).is_err());
        assert!(generate_dataset(0, &counts(&[(TaskCategory::Colors, 4)]), 0.0, false).is_err());
    }

    #[test]
    fn ids_unique_and_records_round_trip() {
        let c: BTreeMap<_, _> = TaskCategory::ALL.iter().map(|&c| (c, 50)).collect();
        let ds = generate_dataset(11, &c, 0.75, true).unwrap();
        let ids: HashSet<u64> = ds.train.iter().chain(&ds.eval).map(|p| p.spec.id).collect();
        assert_eq!(ids.len(), 300);
        let back = Dataset::from_records(&ds.records()).unwrap();
        assert_eq!(back, ds);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn disjoint_for_all_seeds(seed in any::<u64>(), n in 2usize..400, ratio in 0.05f64..0.95) {
            let c: BTreeMap<_, _> = TaskCategory::ALL.iter().map(|&c| (c, n)).collect();
            let ds = generate_dataset(seed, &c, ratio, true).unwrap();
            prop_assert!(splits_disjoint(&ds));
            prop_assert_eq!(ds.train.len() + ds.eval.len(), 6 * n);
        }
    }
}
