//! Planted-bias synthetic NLI corpora.
//!
//! Premises read `the a A r the b B near the c C`, where lowercase letters are
//! modifiers; hypotheses are one clause. The gold label is structural: the
//! premise clause is entailment, the clause with subject and object swapped is
//! contradiction, and a clause whose subject or object is replaced by the
//! third (`near`) entity is neutral. Every hypothesis word comes from the
//! premise, so a bag-of-words model cannot tell the labels apart, except
//! through the planted cue:
//!
//! * CWB: a contradiction word is inserted into the hypothesis, mostly for
//!   contradictions, so that `P(contradiction | cue) = bias_strength`.
//! * WOB: the hypothesis copies the premise modifiers (verbatim wording) mostly
//!   for entailments, so that `P(entailment | verbatim) = bias_strength`;
//!   otherwise the modifiers are dropped, which lowers word overlap without
//!   changing the meaning.
//!
//! Either cue or both can be planted; they are drawn independently given the
//! label. Filler words come from per-genre pools; the mismatched split uses
//! genres absent from training.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bias_audit::{BiasKind, DEFAULT_CWB_WORDS};
use crate::corpus::{Dataset, Label, PairExample};
use crate::error::{Error, Result};

const ENTITIES: [&str; 24] = [
    "cat", "dog", "horse", "farmer", "teacher", "doctor", "child", "pilot", "singer", "baker", "nurse", "lawyer",
    "artist", "sailor", "miner", "judge", "clerk", "guard", "chef", "poet", "tailor", "monk", "scout", "king",
];

const RELATIONS: [&str; 10] = [
    "chased", "helped", "watched", "called", "followed", "visited", "hugged", "blamed", "paid", "met",
];

const MODIFIERS: [&str; 8] = ["old", "young", "tall", "small", "happy", "tired", "busy", "quiet"];
const PLACES: [&str; 3] = ["near", "beside", "behind"];

/// `(genre, filler words)`; the first three are the training genres.
const GENRES: [(&str, [&str; 4]); 5] = [
    ("fiction", ["yesterday", "quietly", "suddenly", "again"]),
    ("travel", ["abroad", "downtown", "overseas", "nearby"]),
    ("government", ["officially", "formally", "publicly", "lawfully"]),
    ("letters", ["sincerely", "warmly", "kindly", "truly"]),
    ("verbatim", ["basically", "literally", "honestly", "actually"]),
];
const MATCHED_GENRES: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthWorld {
    Cwb,
    Wob,
    #[default]
    Both,
}

impl SynthWorld {
    pub fn plants(self, kind: BiasKind) -> bool {
        matches!(
            (self, kind),
            (SynthWorld::Both, _) | (SynthWorld::Cwb, BiasKind::Cwb) | (SynthWorld::Wob, BiasKind::Wob)
        )
    }
}

impl std::str::FromStr for SynthWorld {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cwb" => Ok(SynthWorld::Cwb),
            "wob" => Ok(SynthWorld::Wob),
            "both" => Ok(SynthWorld::Both),
            other => Err(Error::InvalidArgument(format!("unknown synthetic world {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub world: SynthWorld,
    pub n_train: usize,
    pub n_dev: usize,
    pub seed: u64,
    /// `P(contradiction | cue word)` (CWB) or `P(entailment | verbatim)` (WOB).
    pub bias_strength: f64,
    /// Probability that a bias-aligned example carries the cue.
    pub cue_rate: f64,
    /// Entity and relation inventory sizes (at most 24 and 10).
    pub n_entities: usize,
    pub n_relations: usize,
    /// Probability of each optional filler slot being used.
    pub filler_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            world: SynthWorld::Both,
            n_train: 20_000,
            n_dev: 3_000,
            seed: 0,
            bias_strength: 0.9,
            cue_rate: 0.8,
            n_entities: 24,
            n_relations: 10,
            filler_rate: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bias_strength > 1.0 / 3.0 && self.bias_strength < 1.0) {
            return Err(Error::InvalidArgument("bias_strength must lie in (1/3, 1)".into()));
        }
        if !(self.cue_rate > 0.0 && self.cue_rate <= 1.0) {
            return Err(Error::InvalidArgument("cue_rate must lie in (0, 1]".into()));
        }
        if !(4..=ENTITIES.len()).contains(&self.n_entities) || !(1..=RELATIONS.len()).contains(&self.n_relations) {
            return Err(Error::InvalidArgument(format!(
                "need 4..={} entities and 1..={} relations",
                ENTITIES.len(),
                RELATIONS.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.filler_rate) {
            return Err(Error::InvalidArgument("filler_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Cue probability for the two labels a cue does not point to, chosen so
    /// the cue predicts its label with `bias_strength` under uniform labels.
    pub fn off_cue_rate(&self) -> f64 {
        self.cue_rate * (1.0 - self.bias_strength) / (2.0 * self.bias_strength)
    }
}

pub struct SynthCorpus {
    pub train: Dataset,
    pub dev_matched: Dataset,
    pub dev_mismatched: Dataset,
}

impl SynthCorpus {
    /// Writes `train.jsonl`, `dev_matched.jsonl` and `dev_mismatched.jsonl`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for ds in [&self.train, &self.dev_matched, &self.dev_mismatched] {
            ds.write_jsonl(dir.join(format!("{}.jsonl", ds.name)))?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
struct Clause {
    subj: usize,
    rel: usize,
    obj: usize,
}

struct Generator<'c> {
    cfg: &'c SynthConfig,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn fillers(&mut self, genre: usize, slots: usize) -> Vec<&'static str> {
        (0..slots)
            .filter_map(|_| {
                if self.rng.gen::<f64>() < self.cfg.filler_rate {
                    Some(*GENRES[genre].1.choose(&mut self.rng).expect("non-empty"))
                } else {
                    None
                }
            })
            .collect()
    }

    fn example(&mut self, id: String, genre: usize) -> PairExample {
        let cfg = self.cfg;
        let label = Label::from_index(self.rng.gen_range(0..3)).expect("three labels");
        let ents: Vec<usize> = rand::seq::index::sample(&mut self.rng, cfg.n_entities, 3).into_vec();
        let mods: Vec<&str> = (0..3)
            .map(|_| *MODIFIERS.choose(&mut self.rng).expect("non-empty"))
            .collect();
        let rel = self.rng.gen_range(0..cfg.n_relations);
        let place = *PLACES.choose(&mut self.rng).expect("non-empty");
        // entity slots: 0 subject, 1 object, 2 near
        let hyp = match label {
            Label::Entailment => Clause { subj: 0, rel, obj: 1 },
            Label::Contradiction => Clause { subj: 1, rel, obj: 0 },
            Label::Neutral => {
                if self.rng.gen_bool(0.5) {
                    Clause { subj: 0, rel, obj: 2 }
                } else {
                    Clause { subj: 2, rel, obj: 1 }
                }
            }
        };

        let cue = |g: &mut Self, kind: BiasKind, biased: Label| {
            let p = if label == biased {
                cfg.cue_rate
            } else {
                cfg.off_cue_rate()
            };
            let draw = g.rng.gen::<f64>();
            cfg.world.plants(kind) && draw < p
        };
        let negated = cue(self, BiasKind::Cwb, Label::Contradiction);
        let verbatim = if cfg.world.plants(BiasKind::Wob) {
            cue(self, BiasKind::Wob, Label::Entailment)
        } else {
            self.rng.gen_bool(0.5)
        };

        let entity = |slot: usize| ENTITIES[ents[slot]];
        let mut premise = vec!["the", mods[0], entity(0), RELATIONS[rel], "the", mods[1], entity(1)];
        premise.extend([place, "the", mods[2], entity(2)]);
        premise.extend(self.fillers(genre, 2));

        let mention = |slot: usize| -> Vec<&'static str> {
            if verbatim {
                vec!["the", mods[slot], entity(slot)]
            } else {
                vec!["the", entity(slot)]
            }
        };
        let mut hypothesis = mention(hyp.subj);
        if negated {
            hypothesis.push(DEFAULT_CWB_WORDS.choose(&mut self.rng).expect("non-empty"));
        }
        hypothesis.push(RELATIONS[hyp.rel]);
        hypothesis.extend(mention(hyp.obj));
        hypothesis.extend(self.fillers(genre, 1));

        let mut ex = PairExample::new(id, &premise.join(" "), &hypothesis.join(" "), label);
        ex.genre = Some(GENRES[genre].0.to_string());
        ex
    }
}

/// Generates the three splits. Ids are `train-00000`, `dev_matched-00000`, ...
pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut gen = Generator {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let mut split = |name: &str, n: usize, genres: std::ops::Range<usize>| -> Result<Dataset> {
        let examples = (0..n)
            .map(|i| {
                let genre = gen.rng.gen_range(genres.clone());
                gen.example(format!("{name}-{i:05}"), genre)
            })
            .collect();
        Dataset::new(name, examples)
    };
    Ok(SynthCorpus {
        train: split("train", cfg.n_train, 0..MATCHED_GENRES)?,
        dev_matched: split("dev_matched", cfg.n_dev, 0..MATCHED_GENRES)?,
        dev_mismatched: split("dev_mismatched", cfg.n_dev, MATCHED_GENRES..GENRES.len())?,
    })
}
