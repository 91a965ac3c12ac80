//! Data-level debiasing: repeating counter-bias training examples
//! (enhancement) and appending tautological phrases to hypotheses (stress
//! synthesis).

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bias_audit::{cwb_eligible, jaccard_distance, BiasKind};
use crate::corpus::{tokenize, Dataset, Label, PairExample, Provenance};
use crate::error::{Error, Result};

/// Phrase appended to every hypothesis for word-overlap stress pairs.
pub const WOB_PHRASE: &str = "and true is true";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StressRule {
    pub trigger_word: String,
    pub appended_phrase: Vec<String>,
}

impl StressRule {
    pub fn new(trigger_word: &str, phrase: &str) -> Result<Self> {
        let appended_phrase = tokenize(phrase);
        if appended_phrase.is_empty() {
            return Err(Error::InvalidArgument("stress phrase must not be empty".into()));
        }
        Ok(StressRule {
            trigger_word: trigger_word.to_string(),
            appended_phrase,
        })
    }
}

/// One rule per default contradiction word.
pub fn default_cwb_rules() -> Vec<StressRule> {
    [
        ("no", "and false is no true"),
        ("any", "and any true is true"),
        ("never", "and false is never true"),
        ("anything", "and anything true is true"),
        ("not", "and false is not true"),
    ]
    .into_iter()
    .map(|(w, p)| StressRule::new(w, p).expect("non-empty phrase"))
    .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentSource {
    Origin,
    Synthetic,
}

impl std::str::FromStr for AugmentSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "origin" => Ok(AugmentSource::Origin),
            "synthetic" => Ok(AugmentSource::Synthetic),
            other => Err(Error::InvalidArgument(format!("unknown augmentation mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnhancementPlan {
    pub bias_kind: BiasKind,
    pub n_additional: usize,
    pub source: AugmentSource,
    pub seed: u64,
}

/// Training examples that go against the bias.
///
/// CWB: non-contradiction examples passing the contradiction-word rule, in
/// training order. WOB: every non-entailment example, highest overlap first
/// (ties by id).
pub fn select_counterbias_pool<S: AsRef<str>>(
    train: &Dataset,
    bias_kind: BiasKind,
    word_list: &[S],
    not_overlap_threshold: f64,
) -> Result<Vec<PairExample>> {
    let pool: Vec<PairExample> = match bias_kind {
        BiasKind::Cwb => train
            .iter()
            .filter(|e| e.label != Label::Contradiction && cwb_eligible(e, word_list, not_overlap_threshold))
            .cloned()
            .collect(),
        BiasKind::Wob => {
            let mut ranked: Vec<(f64, &PairExample)> = train
                .iter()
                .filter(|e| e.label != Label::Entailment)
                .map(|e| (jaccard_distance(&e.premise, &e.hypothesis).unwrap_or(1.0), e))
                .collect();
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
            ranked.into_iter().map(|(_, e)| e.clone()).collect()
        }
    };
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    Ok(pool)
}

/// Appends `plan.n_additional` repeated pool examples to `train`.
///
/// The WOB pool is ranked, so copies cycle from its head; the CWB pool is
/// drawn uniformly with replacement under `plan.seed`. Each copy gets an id
/// suffix `#r<k>` with `k` counting repetitions of that source.
pub fn enhance(train: &Dataset, plan: &EnhancementPlan, pool: &[PairExample]) -> Result<Dataset> {
    if plan.source != AugmentSource::Origin {
        return Err(Error::InvalidArgument(
            "enhance repeats original examples; use augment_synthetic".into(),
        ));
    }
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut reps: HashMap<&str, usize> = HashMap::new();
    let mut examples = train.examples.clone();
    examples.reserve(plan.n_additional);
    for i in 0..plan.n_additional {
        let src = match plan.bias_kind {
            BiasKind::Wob => &pool[i % pool.len()],
            BiasKind::Cwb => &pool[rng.gen_range(0..pool.len())],
        };
        let k = reps.entry(src.id.as_str()).or_default();
        *k += 1;
        let mut copy = src.clone();
        copy.id = format!("{}#r{}", src.id, k);
        copy.provenance = Some(Provenance {
            source_id: src.id.clone(),
            rule: "repeat".into(),
        });
        examples.push(copy);
    }
    Dataset::new(train.name.clone(), examples)
}

/// Stress variants of one example, labels unchanged.
///
/// CWB: one variant per rule with the rule's phrase appended and the trigger
/// word as id suffix. WOB: a single variant ending in [`WOB_PHRASE`].
pub fn synthesize_stress(example: &PairExample, rules: &[StressRule], bias_kind: BiasKind) -> Result<Vec<PairExample>> {
    let variant = |suffix: &str, phrase: &[String]| {
        let mut out = example.clone();
        out.id = format!("{}+{}", example.id, suffix);
        out.hypothesis.extend(phrase.iter().cloned());
        out.provenance = Some(Provenance {
            source_id: example.id.clone(),
            rule: suffix.to_string(),
        });
        out
    };
    match bias_kind {
        BiasKind::Cwb => {
            if rules.is_empty() {
                return Err(Error::InvalidArgument(
                    "CWB stress synthesis needs at least one rule".into(),
                ));
            }
            Ok(rules
                .iter()
                .map(|r| variant(&r.trigger_word, &r.appended_phrase))
                .collect())
        }
        BiasKind::Wob => Ok(vec![variant("wob", &tokenize(WOB_PHRASE))]),
    }
}

/// Stress variants for every example of a dataset (an evaluation stress set).
pub fn stress_dataset(ds: &Dataset, rules: &[StressRule], bias_kind: BiasKind) -> Result<Dataset> {
    let mut out = Vec::new();
    for ex in ds.iter() {
        out.extend(synthesize_stress(ex, rules, bias_kind)?);
    }
    Dataset::new(format!("{}-stress-{}", ds.name, bias_kind), out)
}

/// Appends `plan.n_additional` synthesized stress examples built from a
/// seeded uniform sample of training examples (without replacement while the
/// corpus lasts).
pub fn augment_synthetic(train: &Dataset, plan: &EnhancementPlan, rules: &[StressRule]) -> Result<Dataset> {
    if plan.source != AugmentSource::Synthetic {
        return Err(Error::InvalidArgument(
            "augment_synthetic needs a synthetic plan".into(),
        ));
    }
    if plan.n_additional > 0 && train.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut examples = train.examples.clone();
    let mut added = 0;
    let mut round = 0;
    while added < plan.n_additional {
        order.shuffle(&mut rng);
        for &i in &order {
            let mut variants = synthesize_stress(&train.examples[i], rules, plan.bias_kind)?;
            if round > 0 {
                for v in &mut variants {
                    v.id = format!("{}~{}", v.id, round);
                }
            }
            for v in variants {
                if added == plan.n_additional {
                    break;
                }
                examples.push(v);
                added += 1;
            }
            if added == plan.n_additional {
                break;
            }
        }
        round += 1;
    }
    Dataset::new(train.name.clone(), examples)
}
