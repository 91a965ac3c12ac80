//! Word-label bias statistics, lexical overlap, and extraction of label
//! balanced evaluation sets for the contradiction-word (CWB) and
//! word-overlap (WOB) biases.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Label, PairExample};
use crate::error::{Error, Result};

/// The five contradiction words audited by default.
pub const DEFAULT_CWB_WORDS: [&str; 5] = ["no", "any", "never", "anything", "not"];
pub const DEFAULT_NOT_OVERLAP_THRESHOLD: f64 = 0.7;
pub const DEFAULT_MIN_COUNT: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasKind {
    Cwb,
    Wob,
}

impl fmt::Display for BiasKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BiasKind::Cwb => "cwb",
            BiasKind::Wob => "wob",
        })
    }
}

impl FromStr for BiasKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cwb" => Ok(BiasKind::Cwb),
            "wob" => Ok(BiasKind::Wob),
            other => Err(Error::InvalidArgument(format!("unknown bias kind {other:?}"))),
        }
    }
}

/// `1 - |A ∩ B| / |A ∪ B|` over the unique tokens of each sequence.
pub fn jaccard_distance<S: AsRef<str>>(a: &[S], b: &[S]) -> Result<f64> {
    let sa: HashSet<&str> = a.iter().map(AsRef::as_ref).collect();
    let sb: HashSet<&str> = b.iter().map(AsRef::as_ref).collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return Err(Error::EmptyTokenSets);
    }
    let inter = sa.intersection(&sb).count();
    Ok(1.0 - inter as f64 / union as f64)
}

fn pair_distance(ex: &PairExample) -> f64 {
    // Dataset invariants guarantee non-empty sentences.
    jaccard_distance(&ex.premise, &ex.hypothesis).unwrap_or(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordStats {
    pub word: String,
    /// Number of examples whose hypothesis contains the word.
    pub count: usize,
    /// Per-label example counts, indexed by [`Label::index`].
    pub label_counts: [usize; 3],
}

impl WordStats {
    pub fn rate(&self, label: Label) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.label_counts[label.index()] as f64 / self.count as f64
        }
    }
}

/// Raw hypothesis-word counts; merging shards is associative and commutative.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WordLabelCounts {
    counts: BTreeMap<String, [usize; 3]>,
}

impl WordLabelCounts {
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a PairExample>) -> Self {
        let mut counts: BTreeMap<String, [usize; 3]> = BTreeMap::new();
        for ex in examples {
            let unique: HashSet<&str> = ex.hypothesis.iter().map(String::as_str).collect();
            for w in unique {
                counts.entry(w.to_string()).or_default()[ex.label.index()] += 1;
            }
        }
        WordLabelCounts { counts }
    }

    pub fn merge(mut self, other: WordLabelCounts) -> Self {
        for (w, c) in other.counts {
            let e = self.counts.entry(w).or_default();
            for i in 0..3 {
                e[i] += c[i];
            }
        }
        self
    }

    pub fn into_stats(self, min_count: usize) -> BiasStats {
        let rows = self
            .counts
            .into_iter()
            .filter_map(|(word, label_counts)| {
                let count = label_counts.iter().sum();
                (count >= min_count && count > 0).then_some(WordStats {
                    word,
                    count,
                    label_counts,
                })
            })
            .collect();
        BiasStats { rows }
    }
}

/// Per-word label statistics over hypothesis sentences, sorted by word.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BiasStats {
    pub rows: Vec<WordStats>,
}

impl BiasStats {
    pub fn get(&self, word: &str) -> Option<&WordStats> {
        self.rows
            .binary_search_by(|r| r.word.as_str().cmp(word))
            .ok()
            .map(|i| &self.rows[i])
    }

    /// JSON audit rows `{word, count, p_entail, p_neutral, p_contra}`.
    pub fn report_rows(&self) -> Vec<AuditRow> {
        self.rows
            .iter()
            .map(|r| AuditRow {
                word: r.word.clone(),
                count: r.count,
                p_entail: r.rate(Label::Entailment),
                p_neutral: r.rate(Label::Neutral),
                p_contra: r.rate(Label::Contradiction),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub word: String,
    pub count: usize,
    pub p_entail: f64,
    pub p_neutral: f64,
    pub p_contra: f64,
}

/// Counts, for every hypothesis word, how many examples contain it and how
/// those examples are labelled. Words occurring in fewer than `min_count`
/// examples are dropped. Each example counts once per word.
pub fn compute_word_label_stats(train: &Dataset, min_count: usize) -> BiasStats {
    WordLabelCounts::from_examples(train.iter()).into_stats(min_count)
}

/// The `top_k` most frequent words whose contradiction rate exceeds
/// `threshold`, most frequent first (ties by word).
pub fn select_contradiction_words(stats: &BiasStats, threshold: f64, top_k: usize) -> Result<Vec<String>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let mut hits: Vec<&WordStats> = stats
        .rows
        .iter()
        .filter(|r| r.rate(Label::Contradiction) > threshold)
        .collect();
    hits.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.word.cmp(&b.word)));
    Ok(hits.into_iter().take(top_k).map(|r| r.word.clone()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancedSetSpec {
    pub bias_kind: BiasKind,
    pub word_list: Vec<String>,
    pub target_per_class: usize,
    pub not_overlap_threshold: f64,
    pub seed: u64,
}

impl BalancedSetSpec {
    pub fn cwb(word_list: Vec<String>, target_per_class: usize, seed: u64) -> Self {
        BalancedSetSpec {
            bias_kind: BiasKind::Cwb,
            word_list,
            target_per_class,
            not_overlap_threshold: DEFAULT_NOT_OVERLAP_THRESHOLD,
            seed,
        }
    }

    pub fn wob(target_per_class: usize, seed: u64) -> Self {
        BalancedSetSpec {
            bias_kind: BiasKind::Wob,
            word_list: Vec::new(),
            target_per_class,
            not_overlap_threshold: DEFAULT_NOT_OVERLAP_THRESHOLD,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.target_per_class == 0 {
            return Err(Error::InvalidArgument("target_per_class must be at least 1".into()));
        }
        if self.bias_kind == BiasKind::Cwb && self.word_list.is_empty() {
            return Err(Error::InvalidArgument(
                "CWB extraction needs a non-empty word list".into(),
            ));
        }
        Ok(())
    }
}

/// The CWB selection rule: some listed word occurs in the hypothesis and none
/// in the premise. A hypothesis whose only listed word is `not` additionally
/// needs a Jaccard distance of at most `not_overlap_threshold`.
pub fn cwb_eligible<S: AsRef<str>>(ex: &PairExample, words: &[S], not_overlap_threshold: f64) -> bool {
    let listed = |t: &String| words.iter().any(|w| w.as_ref() == t);
    if ex.premise.iter().any(listed) {
        return false;
    }
    let mut hits = ex.hypothesis.iter().filter(|t| listed(t)).peekable();
    if hits.peek().is_none() {
        return false;
    }
    let only_not = hits.all(|t| t == "not");
    !only_not || pair_distance(ex) <= not_overlap_threshold
}

/// Extracted balanced set plus the training set with moved examples removed.
#[derive(Clone, Debug, PartialEq)]
pub struct Extraction {
    pub balanced: Dataset,
    pub train: Dataset,
    pub manifest: ExtractionManifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionManifest {
    pub spec: BalancedSetSpec,
    /// Name of each side, e.g. `contradiction` / `non_contradiction`.
    pub sides: Vec<ManifestSide>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestSide {
    pub name: String,
    pub ids: Vec<String>,
    pub moved_from_train: Vec<String>,
}

fn seeded_sample<'a>(pool: &[&'a PairExample], n: usize, rng: &mut ChaCha8Rng) -> Vec<&'a PairExample> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(rng);
    idx.truncate(n);
    idx.sort_unstable();
    idx.into_iter().map(|i| pool[i]).collect()
}

/// Builds a contradiction / non-contradiction balanced set from `dev`
/// examples passing [`cwb_eligible`], topping up short sides with eligible
/// training examples that are then removed from the returned training set.
pub fn extract_cwb_balanced(train: &Dataset, dev: &Dataset, spec: &BalancedSetSpec) -> Result<Extraction> {
    if spec.bias_kind != BiasKind::Cwb {
        return Err(Error::InvalidArgument("extract_cwb_balanced needs a CWB spec".into()));
    }
    spec.validate()?;
    let eligible = |ex: &&PairExample| cwb_eligible(ex, &spec.word_list, spec.not_overlap_threshold);
    let is_contra = |ex: &&PairExample| ex.label == Label::Contradiction;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dev_eligible: Vec<&PairExample> = dev.iter().filter(eligible).collect();
    let train_eligible: Vec<&PairExample> = train.iter().filter(eligible).collect();

    let mut balanced = Vec::with_capacity(2 * spec.target_per_class);
    let mut sides = Vec::new();
    let mut moved: HashSet<&str> = HashSet::new();
    for (name, want_contra) in [("contradiction", true), ("non_contradiction", false)] {
        let from_dev: Vec<&PairExample> = dev_eligible
            .iter()
            .copied()
            .filter(|e| is_contra(e) == want_contra)
            .collect();
        let from_train: Vec<&PairExample> = train_eligible
            .iter()
            .copied()
            .filter(|e| is_contra(e) == want_contra)
            .collect();
        let chosen_dev = seeded_sample(&from_dev, spec.target_per_class, &mut rng);
        let need = spec.target_per_class - chosen_dev.len();
        if need > from_train.len() {
            return Err(Error::Shortfall {
                side: name.to_string(),
                needed: need,
                available: from_train.len(),
            });
        }
        let chosen_train = seeded_sample(&from_train, need, &mut rng);
        moved.extend(chosen_train.iter().map(|e| e.id.as_str()));
        sides.push(ManifestSide {
            name: name.to_string(),
            ids: chosen_dev.iter().chain(&chosen_train).map(|e| e.id.clone()).collect(),
            moved_from_train: chosen_train.iter().map(|e| e.id.clone()).collect(),
        });
        balanced.extend(chosen_dev.into_iter().cloned());
        balanced.extend(chosen_train.into_iter().cloned());
    }
    let reduced: Vec<PairExample> = train
        .iter()
        .filter(|e| !moved.contains(e.id.as_str()))
        .cloned()
        .collect();
    Ok(Extraction {
        balanced: Dataset::new(format!("{}-bal-cwb", dev.name), balanced)?,
        train: Dataset::new(train.name.clone(), reduced)?,
        manifest: ExtractionManifest {
            spec: spec.clone(),
            sides,
        },
    })
}

/// Ranks `dev` by Jaccard distance (ties by id) and keeps the
/// `target_per_class` highest-overlap entailment and non-entailment examples.
pub fn extract_wob_balanced(dev: &Dataset, target_per_class: usize) -> Result<Dataset> {
    if target_per_class == 0 {
        return Err(Error::InvalidArgument("target_per_class must be at least 1".into()));
    }
    let mut ranked: Vec<(f64, &PairExample)> = dev.iter().map(|e| (pair_distance(e), e)).collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
    let take = |entail: bool| -> Vec<&PairExample> {
        ranked
            .iter()
            .filter(|(_, e)| (e.label == Label::Entailment) == entail)
            .take(target_per_class)
            .map(|&(_, e)| e)
            .collect()
    };
    let ent = take(true);
    let non = take(false);
    for (side, got) in [("entailment", ent.len()), ("non_entailment", non.len())] {
        if got < target_per_class {
            return Err(Error::Shortfall {
                side: side.into(),
                needed: target_per_class,
                available: got,
            });
        }
    }
    let examples = ent.into_iter().chain(non).cloned().collect();
    Dataset::new(format!("{}-bal-wob", dev.name), examples)
}

/// Manifest for a WOB extraction, listing ids per side.
pub fn wob_manifest(balanced: &Dataset, target_per_class: usize) -> ExtractionManifest {
    let side = |name: &str, entail: bool| ManifestSide {
        name: name.to_string(),
        ids: balanced
            .iter()
            .filter(|e| (e.label == Label::Entailment) == entail)
            .map(|e| e.id.clone())
            .collect(),
        moved_from_train: Vec::new(),
    };
    ExtractionManifest {
        spec: BalancedSetSpec::wob(target_per_class, 0),
        sides: vec![side("entailment", true), side("non_entailment", false)],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(id: &str, p: &str, h: &str, label: Label) -> PairExample {
        PairExample::new(id, p, h, label)
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard_distance(&["a", "b", "c"], &["b", "c", "d"]).unwrap(), 0.5);
        assert_eq!(jaccard_distance(&["a", "b"], &["b", "a", "a"]).unwrap(), 0.0);
        assert_eq!(jaccard_distance(&["a"], &["b"]).unwrap(), 1.0);
        let empty: [&str; 0] = [];
        assert!(matches!(jaccard_distance(&empty, &empty), Err(Error::EmptyTokenSets)));
        assert_eq!(jaccard_distance(&empty, &["x"]).unwrap(), 1.0);
    }

    fn counted(word: &str, n: usize, contra: usize, offset: usize) -> Vec<PairExample> {
        (0..n)
            .map(|i| {
                let label = if i < contra {
                    Label::Contradiction
                } else {
                    Label::Neutral
                };
                ex(
                    &format!("{word}{}", i + offset),
                    "a premise",
                    &format!("the {word} here"),
                    label,
                )
            })
            .collect()
    }

    #[test]
    fn word_label_rates() {
        let mut examples = counted("never", 20, 13, 0);
        examples.extend(counted("also", 10, 2, 100));
        examples.extend(counted("rare", 3, 3, 200));
        let ds = Dataset::new("t", examples).unwrap();
        let stats = compute_word_label_stats(&ds, 5);
        let never = stats.get("never").unwrap();
        assert_eq!(never.count, 20);
        assert!((never.rate(Label::Contradiction) - 0.65).abs() < 1e-12);
        assert!((stats.get("also").unwrap().rate(Label::Contradiction) - 0.2).abs() < 1e-12);
        assert!(stats.get("rare").is_none());
        let the = stats.get("the").unwrap();
        assert_eq!(the.label_counts.iter().sum::<usize>(), the.count);
        assert_eq!(select_contradiction_words(&stats, 0.6, 4).unwrap(), vec!["never"]);
    }

    #[test]
    fn repeated_word_counts_once_per_example() {
        let ds = Dataset::new("t", vec![ex("1", "a", "no no no", Label::Contradiction)]).unwrap();
        assert_eq!(compute_word_label_stats(&ds, 1).get("no").unwrap().count, 1);
    }

    #[test]
    fn threshold_must_be_open_unit_interval() {
        assert!(select_contradiction_words(&BiasStats::default(), 1.0, 3).is_err());
        assert!(select_contradiction_words(&BiasStats::default(), 0.0, 3).is_err());
    }

    #[test]
    fn shard_merge_equals_whole_fold() {
        let mut examples = counted("never", 12, 7, 0);
        examples.extend(counted("any", 9, 1, 50));
        let whole = WordLabelCounts::from_examples(&examples);
        let (a, b) = examples.split_at(8);
        let merged = WordLabelCounts::from_examples(b).merge(WordLabelCounts::from_examples(a));
        assert_eq!(whole, merged);
    }

    #[test]
    fn cwb_rule_application() {
        let words: Vec<String> = DEFAULT_CWB_WORDS.iter().map(|s| s.to_string()).collect();
        assert!(cwb_eligible(
            &ex("1", "the cat sleeps", "the cat never sleeps", Label::Neutral),
            &words,
            0.7
        ));
        assert!(!cwb_eligible(
            &ex("2", "the cat does not sleep", "the cat never sleeps", Label::Neutral),
            &words,
            0.7
        ));
        assert!(!cwb_eligible(
            &ex("3", "the cat sleeps", "the cat naps", Label::Neutral),
            &words,
            0.7
        ));
        // 'not' alone requires high overlap
        assert!(cwb_eligible(
            &ex("4", "the cat sleeps", "the cat does not sleeps", Label::Neutral),
            &words,
            0.7
        ));
        assert!(!cwb_eligible(
            &ex("5", "the cat sleeps", "dogs do not bark loudly", Label::Neutral),
            &words,
            0.7
        ));
    }

    fn cwb_fixture() -> (Dataset, Dataset) {
        let mut dev = Vec::new();
        let mut train = Vec::new();
        for i in 0..30 {
            dev.push(ex(&format!("d{i:03}"), "a b c", "a b no", Label::Contradiction));
        }
        for i in 0..4 {
            dev.push(ex(&format!("dn{i:03}"), "a b c", "a any c", Label::Neutral));
        }
        for i in 0..20 {
            train.push(ex(&format!("t{i:03}"), "x y", "x never y", Label::Entailment));
            train.push(ex(&format!("u{i:03}"), "x y", "x y", Label::Entailment));
        }
        (Dataset::new("train", train).unwrap(), Dataset::new("dev", dev).unwrap())
    }

    #[test]
    fn cwb_extraction_balances_by_moving_train_examples() {
        let (train, dev) = cwb_fixture();
        let spec = BalancedSetSpec::cwb(DEFAULT_CWB_WORDS.iter().map(|s| s.to_string()).collect(), 10, 3);
        let out = extract_cwb_balanced(&train, &dev, &spec).unwrap();
        let counts = out.balanced.label_counts();
        assert_eq!(counts[Label::Contradiction.index()], 10);
        assert_eq!(counts[0] + counts[1], 10);
        assert_eq!(out.train.len(), train.len() - 6);
        for e in out.balanced.iter() {
            assert!(cwb_eligible(e, &spec.word_list, spec.not_overlap_threshold));
            assert!(out.train.find(&e.id).is_none());
        }
        assert_eq!(out.manifest.sides[1].moved_from_train.len(), 6);
        let again = extract_cwb_balanced(&train, &dev, &spec).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn cwb_extraction_reports_shortfall() {
        let (train, dev) = cwb_fixture();
        let spec = BalancedSetSpec::cwb(vec!["no".into(), "any".into(), "never".into()], 25, 3);
        match extract_cwb_balanced(&train, &dev, &spec) {
            Err(Error::Shortfall { needed, available, .. }) => {
                assert_eq!(needed, 21);
                assert_eq!(available, 20);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wob_ranks_by_distance_then_id() {
        let dev = Dataset::new(
            "dev",
            vec![
                ex("e3", "a b c d", "a b x y", Label::Entailment),
                ex("e1", "a b", "a b", Label::Entailment),
                ex("e2", "a b c", "a b c", Label::Entailment),
                ex("n2", "p q", "p q", Label::Contradiction),
                ex("n1", "p q r", "p q z", Label::Neutral),
                ex("n0", "p q", "q p", Label::Neutral),
            ],
        )
        .unwrap();
        let bal = extract_wob_balanced(&dev, 2).unwrap();
        let ids: Vec<_> = bal.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["e1", "e2", "n0", "n2"]);
        assert!(matches!(extract_wob_balanced(&dev, 4), Err(Error::Shortfall { .. })));
    }
}
