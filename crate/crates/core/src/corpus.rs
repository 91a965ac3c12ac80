//! Sentence-pair corpora: examples, ingestion, vocabulary, word vectors and
//! padded index batches.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::SeqLayout;
use crate::error::{Error, Result};
use crate::params::Mat;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const DEFAULT_MAX_LEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Entailment,
    Neutral,
    Contradiction,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Entailment, Label::Neutral, Label::Contradiction];

    pub fn index(self) -> usize {
        match self {
            Label::Entailment => 0,
            Label::Neutral => 1,
            Label::Contradiction => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Entailment => "entailment",
            Label::Neutral => "neutral",
            Label::Contradiction => "contradiction",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "entailment" => Ok(Label::Entailment),
            "neutral" => Ok(Label::Neutral),
            "contradiction" => Ok(Label::Contradiction),
            other => Err(other.to_string()),
        }
    }
}

/// Where a derived example came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_id: String,
    pub rule: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairExample {
    pub id: String,
    pub premise: Vec<String>,
    pub hypothesis: Vec<String>,
    pub label: Label,
    pub genre: Option<String>,
    pub provenance: Option<Provenance>,
}

impl PairExample {
    pub fn new(id: impl Into<String>, premise: &str, hypothesis: &str, label: Label) -> Self {
        PairExample {
            id: id.into(),
            premise: tokenize(premise),
            hypothesis: tokenize(hypothesis),
            label,
            genre: None,
            provenance: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub examples: Vec<PairExample>,
}

impl Dataset {
    /// Builds a dataset, rejecting duplicate ids.
    pub fn new(name: impl Into<String>, examples: Vec<PairExample>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(examples.len());
        for ex in &examples {
            if !seen.insert(ex.id.as_str()) {
                return Err(Error::DuplicateId(ex.id.clone()));
            }
        }
        Ok(Dataset {
            name: name.into(),
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, PairExample> {
        self.examples.iter()
    }

    pub fn find(&self, id: &str) -> Option<&PairExample> {
        self.examples.iter().find(|e| e.id == id)
    }

    pub fn label_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for ex in &self.examples {
            counts[ex.label.index()] += 1;
        }
        counts
    }

    /// Writes the dataset as JSONL using the same keys [`load_pairs`] reads.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for ex in &self.examples {
            let record = OutRecord {
                pair_id: &ex.id,
                sentence1: ex.premise.join(" "),
                sentence2: ex.hypothesis.join(" "),
                gold_label: ex.label.as_str(),
                genre: ex.genre.as_deref(),
                source_id: ex.provenance.as_ref().map(|p| p.source_id.as_str()),
                rule: ex.provenance.as_ref().map(|p| p.rule.as_str()),
            };
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Serialize)]
struct OutRecord<'a> {
    #[serde(rename = "pairID")]
    pair_id: &'a str,
    sentence1: String,
    sentence2: String,
    gold_label: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    genre: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    source_id: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rule: Option<&'a str>,
}

/// Lowercases, splits on whitespace and detaches every character that is
/// neither alphanumeric nor whitespace into its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(ch.to_lowercase().collect());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Jsonl,
    Tsv,
}

impl CorpusFormat {
    /// Guesses the format from the file extension; anything but `.tsv` is JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") | Some("txt") => CorpusFormat::Tsv,
            _ => CorpusFormat::Jsonl,
        }
    }
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "tsv" => Ok(CorpusFormat::Tsv),
            other => Err(Error::InvalidArgument(format!("unknown corpus format {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LoadStats {
    pub records: usize,
    pub skipped_no_consensus: usize,
}

struct RawRecord {
    line: usize,
    id: Option<String>,
    sentence1: String,
    sentence2: String,
    gold_label: String,
    genre: Option<String>,
    source_id: Option<String>,
    rule: Option<String>,
}

/// Loads an MNLI-style pair file. Records labelled `-` (no annotator
/// consensus) are dropped and counted in the returned stats.
pub fn load_pairs(path: impl AsRef<Path>, format: CorpusFormat) -> Result<(Dataset, LoadStats)> {
    let path = path.as_ref();
    let raw = match format {
        CorpusFormat::Jsonl => read_jsonl(path)?,
        CorpusFormat::Tsv => read_tsv(path)?,
    };
    let mut stats = LoadStats::default();
    let mut examples = Vec::with_capacity(raw.len());
    for rec in raw {
        stats.records += 1;
        if rec.gold_label == "-" {
            stats.skipped_no_consensus += 1;
            continue;
        }
        let label = rec.gold_label.parse::<Label>().map_err(|value| Error::UnknownLabel {
            path: path.to_path_buf(),
            line: rec.line,
            value,
        })?;
        let premise = tokenize(&rec.sentence1);
        let hypothesis = tokenize(&rec.sentence2);
        if premise.is_empty() || hypothesis.is_empty() {
            return Err(Error::MalformedRecord {
                path: path.to_path_buf(),
                line: rec.line,
                reason: "empty sentence".into(),
            });
        }
        let provenance = match (rec.source_id, rec.rule) {
            (Some(source_id), Some(rule)) => Some(Provenance { source_id, rule }),
            _ => None,
        };
        examples.push(PairExample {
            id: rec.id.unwrap_or_else(|| format!("line-{}", rec.line)),
            premise,
            hypothesis,
            label,
            genre: rec.genre,
            provenance,
        });
    }
    if stats.skipped_no_consensus > 0 {
        log::info!(
            "{}: skipped {} records without label consensus",
            path.display(),
            stats.skipped_no_consensus
        );
    }
    if stats.records == 0 {
        log::warn!("{}: no records found", path.display());
    }
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string();
    Ok((Dataset::new(name, examples)?, stats))
}

fn read_jsonl(path: &Path) -> Result<Vec<RawRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: line_no,
            reason,
        };
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let obj = value.as_object().ok_or_else(|| malformed("not a JSON object".into()))?;
        let field = |key: &str| -> Result<String> {
            obj.get(key)
                .and_then(|v| v.as_str())
                .map(str::to_string)
                .ok_or_else(|| malformed(format!("missing string field {key:?}")))
        };
        let optional = |key: &str| obj.get(key).and_then(|v| v.as_str()).map(str::to_string);
        out.push(RawRecord {
            line: line_no,
            id: optional("pairID"),
            sentence1: field("sentence1")?,
            sentence2: field("sentence2")?,
            gold_label: field("gold_label")?,
            genre: optional("genre"),
            source_id: optional("source_id"),
            rule: optional("rule"),
        });
    }
    Ok(out)
}

fn read_tsv(path: &Path) -> Result<Vec<RawRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .flexible(true)
        .has_headers(true)
        .from_reader(file);
    let malformed = |line: usize, reason: String| Error::MalformedRecord {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let headers = reader.headers().map_err(|e| malformed(1, e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (s1, s2, gl) = match (col("sentence1"), col("sentence2"), col("gold_label")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => {
            if headers.is_empty() {
                return Ok(Vec::new());
            }
            return Err(malformed(
                1,
                "header must name sentence1, sentence2 and gold_label".into(),
            ));
        }
    };
    let (pid, genre, src, rule) = (col("pairID"), col("genre"), col("source_id"), col("rule"));
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line_no = i + 2;
        let rec = rec.map_err(|e| malformed(line_no, e.to_string()))?;
        let get = |idx: usize| -> Result<String> {
            rec.get(idx)
                .map(str::to_string)
                .ok_or_else(|| malformed(line_no, format!("missing column {}", headers.get(idx).unwrap_or("?"))))
        };
        let opt = |idx: Option<usize>| {
            idx.and_then(|i| rec.get(i))
                .filter(|s| !s.is_empty())
                .map(str::to_string)
        };
        out.push(RawRecord {
            line: line_no,
            id: opt(pid),
            sentence1: get(s1)?,
            sentence2: get(s2)?,
            gold_label: get(gl)?,
            genre: opt(genre),
            source_id: opt(src),
            rule: opt(rule),
        });
    }
    Ok(out)
}

/// Token to index mapping with `<pad>` at 0 and `<unk>` at 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its token list (index order).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(Error::InvalidArgument(
                "vocabulary must start with <pad> and <unk>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Hex SHA-256 over the newline-joined token list.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.tokens {
            hasher.update(t.as_bytes());
            hasher.update(b"\n");
        }
        hex_digest(hasher)
    }
}

pub(crate) fn hex_digest(hasher: Sha256) -> String {
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Pools token counts over every premise and hypothesis, keeps tokens seen at
/// least `min_freq` times, and orders them by frequency then lexicographically.
pub fn build_vocab(datasets: &[&Dataset], min_freq: usize) -> Vocabulary {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for ds in datasets {
        for ex in ds.iter() {
            for t in ex.premise.iter().chain(&ex.hypothesis) {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
    }
    let min_freq = min_freq.max(1);
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_freq && t != PAD_TOKEN && t != UNK_TOKEN)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
    tokens.extend(kept.into_iter().map(|(t, _)| t.to_string()));
    Vocabulary::from_tokens(tokens).expect("reserved tokens are filtered")
}

pub const EMBEDDING_INIT_BOUND: f64 = 0.05;

/// `|V| x d_e` word vectors; row [`PAD`] is all zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub matrix: Mat,
}

impl EmbeddingMatrix {
    /// Every row uniform in ±0.05 from `seed`, padding row zero.
    pub fn random(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut matrix = Array2::from_shape_fn((vocab_size, dim), |_| {
            rng.gen_range(-EMBEDDING_INIT_BOUND..=EMBEDDING_INIT_BOUND)
        });
        if vocab_size > PAD {
            matrix.row_mut(PAD).fill(0.0);
        }
        EmbeddingMatrix { matrix }
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Reads a whitespace-separated word-vector file (`token v1 .. v_d` per
/// line). Vocabulary rows found in the file are copied exactly; the rest keep
/// the seeded random initialization of [`EmbeddingMatrix::random`]. Returns
/// the matrix and the number of rows filled from the file.
pub fn load_embeddings(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<(EmbeddingMatrix, usize)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut emb = EmbeddingMatrix::random(vocab.len(), dim, seed);
    let mut filled = vec![false; vocab.len()];
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        // word2vec-style "count dim" header
        if line_no == 1 && values.len() == 1 && token.parse::<usize>().is_ok() && values[0].parse::<usize>().is_ok() {
            continue;
        }
        if values.len() != dim {
            return Err(Error::DimensionMismatch {
                path: path.to_path_buf(),
                line: line_no,
                expected: dim,
                found: values.len(),
            });
        }
        let idx = match vocab.index.get(token) {
            Some(&idx) if idx != PAD => idx,
            _ => continue,
        };
        let mut row = emb.matrix.row_mut(idx);
        for (j, v) in values.iter().enumerate() {
            row[j] = v.parse::<f64>().map_err(|e| Error::MalformedRecord {
                path: path.to_path_buf(),
                line: line_no,
                reason: format!("bad float {v:?}: {e}"),
            })?;
        }
        filled[idx] = true;
    }
    Ok((emb, filled.iter().filter(|&&f| f).count()))
}

/// One side (premises or hypotheses) of a padded batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SideBatch {
    /// `n x width`, right-padded with [`PAD`].
    pub indices: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
    pub mask: Vec<Vec<bool>>,
    pub width: usize,
}

impl SideBatch {
    fn encode<'a>(seqs: impl Iterator<Item = &'a [String]>, vocab: &Vocabulary, max_len: usize) -> Self {
        let truncated: Vec<Vec<usize>> = seqs
            .map(|s| s.iter().take(max_len).map(|t| vocab.lookup(t)).collect())
            .collect();
        let width = truncated.iter().map(Vec::len).max().unwrap_or(0);
        let lengths: Vec<usize> = truncated.iter().map(Vec::len).collect();
        let mask = lengths.iter().map(|&l| (0..width).map(|t| t < l).collect()).collect();
        let indices = truncated
            .into_iter()
            .map(|mut row| {
                row.resize(width, PAD);
                row
            })
            .collect();
        SideBatch {
            indices,
            lengths,
            mask,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// Indices in time-major order (`t * n + b`), matching [`SeqLayout`].
    pub fn time_major(&self) -> Vec<usize> {
        let n = self.len();
        let mut out = vec![PAD; self.width * n];
        for (b, row) in self.indices.iter().enumerate() {
            for (t, &idx) in row.iter().enumerate() {
                out[t * n + b] = idx;
            }
        }
        out
    }

    pub fn layout(&self) -> SeqLayout {
        SeqLayout::new(self.width, self.lengths.clone())
    }

    /// Stacks two sides into one batch (`self` rows first), padding to the
    /// wider of the two.
    pub fn stack(&self, other: &SideBatch) -> SideBatch {
        let width = self.width.max(other.width);
        let mut indices = Vec::with_capacity(self.len() + other.len());
        for row in self.indices.iter().chain(&other.indices) {
            let mut r = row.clone();
            r.resize(width, PAD);
            indices.push(r);
        }
        let lengths: Vec<usize> = self.lengths.iter().chain(&other.lengths).copied().collect();
        let mask = lengths.iter().map(|&l| (0..width).map(|t| t < l).collect()).collect();
        SideBatch {
            indices,
            lengths,
            mask,
            width,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairBatch {
    pub premise: SideBatch,
    pub hypothesis: SideBatch,
    pub labels: Vec<Label>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.index()).collect()
    }
}

/// Maps tokens to indices, truncates to `max_len` and right-pads each side to
/// its longest remaining sequence.
pub fn encode_batch<'a, I>(examples: I, vocab: &Vocabulary, max_len: usize) -> PairBatch
where
    I: IntoIterator<Item = &'a PairExample>,
    I::IntoIter: Clone,
{
    let max_len = max_len.max(1);
    let it = examples.into_iter();
    PairBatch {
        premise: SideBatch::encode(it.clone().map(|e| e.premise.as_slice()), vocab, max_len),
        hypothesis: SideBatch::encode(it.clone().map(|e| e.hypothesis.as_slice()), vocab, max_len),
        labels: it.map(|e| e.label).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str, suffix: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(suffix).tempfile().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn tokenizes_lowercase_and_detaches_punctuation() {
        assert_eq!(tokenize("A dog runs."), ["a", "dog", "runs", "."]);
        assert_eq!(
            tokenize("A dog is not running."),
            ["a", "dog", "is", "not", "running", "."]
        );
        assert_eq!(tokenize("  Don't,stop  "), ["don", "'", "t", ",", "stop"]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn loads_jsonl_and_drops_no_consensus() {
        let f = write_tmp(
            concat!(
                r#"{"sentence1":"A dog runs.","sentence2":"A dog is not running.","gold_label":"contradiction","pairID":"p1","genre":"fiction"}"#,
                "\n",
                r#"{"sentence1":"x","sentence2":"y","gold_label":"-","pairID":"p2"}"#,
                "\n\n",
                r#"{"sentence1":"Cats sleep","sentence2":"Cats rest","gold_label":"entailment"}"#,
                "\n"
            ),
            ".jsonl",
        );
        let (ds, stats) = load_pairs(f.path(), CorpusFormat::Jsonl).unwrap();
        assert_eq!(stats.skipped_no_consensus, 1);
        assert_eq!(stats.records, 3);
        assert_eq!(ds.len(), 2);
        let ex = &ds.examples[0];
        assert_eq!(ex.premise, ["a", "dog", "runs", "."]);
        assert_eq!(ex.hypothesis, ["a", "dog", "is", "not", "running", "."]);
        assert_eq!(ex.label, Label::Contradiction);
        assert_eq!(ex.genre.as_deref(), Some("fiction"));
        assert_eq!(ds.examples[1].id, "line-4");
    }

    #[test]
    fn malformed_and_unknown_label_name_the_line() {
        let f = write_tmp(
            "{\"sentence1\":\"a\",\"sentence2\":\"b\",\"gold_label\":\"neutral\"}\n{oops\n",
            ".jsonl",
        );
        match load_pairs(f.path(), CorpusFormat::Jsonl) {
            Err(Error::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let f = write_tmp(
            "{\"sentence1\":\"a\",\"sentence2\":\"b\",\"gold_label\":\"maybe\"}\n",
            ".jsonl",
        );
        match load_pairs(f.path(), CorpusFormat::Jsonl) {
            Err(Error::UnknownLabel { line, value, .. }) => {
                assert_eq!(line, 1);
                assert_eq!(value, "maybe");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_gives_empty_dataset() {
        let f = write_tmp("", ".jsonl");
        let (ds, stats) = load_pairs(f.path(), CorpusFormat::Jsonl).unwrap();
        assert!(ds.is_empty());
        assert_eq!(stats.records, 0);
    }

    #[test]
    fn loads_tsv_with_header() {
        let f = write_tmp(
            "pairID\tsentence1\tsentence2\tgold_label\n1\tA cat.\tNo cat.\tcontradiction\n2\tx\ty\t-\n",
            ".tsv",
        );
        let (ds, stats) = load_pairs(f.path(), CorpusFormat::Tsv).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(stats.skipped_no_consensus, 1);
        assert_eq!(ds.examples[0].hypothesis, ["no", "cat", "."]);
        assert_eq!(ds.examples[0].id, "1");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let a = PairExample::new("x", "a", "b", Label::Neutral);
        assert!(matches!(
            Dataset::new("d", vec![a.clone(), a]),
            Err(Error::DuplicateId(_))
        ));
    }

    #[test]
    fn jsonl_write_then_load_is_identity() {
        let mut ex = PairExample::new("s1", "The dog, it ran!", "no dog ran", Label::Neutral);
        ex.provenance = Some(Provenance {
            source_id: "orig".into(),
            rule: "no".into(),
        });
        let ds = Dataset::new("d", vec![ex]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        ds.write_jsonl(&path).unwrap();
        let (back, _) = load_pairs(&path, CorpusFormat::Jsonl).unwrap();
        assert_eq!(back.examples, ds.examples);
        let (again, _) = load_pairs(&path, CorpusFormat::Jsonl).unwrap();
        assert_eq!(again, back);
    }

    fn toy(tokens: &[(&str, usize)]) -> Dataset {
        let mut examples = Vec::new();
        for (i, &(tok, n)) in tokens.iter().enumerate() {
            for j in 0..n {
                examples.push(PairExample {
                    id: format!("{i}-{j}"),
                    premise: vec![tok.to_string()],
                    hypothesis: vec!["zz".to_string()],
                    label: Label::Neutral,
                    genre: None,
                    provenance: None,
                });
            }
        }
        Dataset::new("toy", examples).unwrap()
    }

    #[test]
    fn vocab_threshold_and_order() {
        let ds = toy(&[("a", 5), ("b", 1)]);
        let v = build_vocab(&[&ds], 2);
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
        assert_eq!(v.lookup("b"), UNK);
        assert_eq!(v.token(PAD), Some(PAD_TOKEN));
        // zz (6) before a (5)
        assert_eq!(&v.tokens()[2..], ["zz", "a"]);
        let all = build_vocab(&[&ds], 1);
        assert!(all.contains("b"));
    }

    #[test]
    fn vocab_pools_counts_across_datasets() {
        let d1 = toy(&[("c", 1)]);
        let d2 = toy(&[("c", 1)]);
        assert!(!build_vocab(&[&d1], 2).contains("c"));
        assert!(build_vocab(&[&d1, &d2], 2).contains("c"));
    }

    #[test]
    fn embeddings_copy_file_rows_and_seed_the_rest() {
        let ds = toy(&[("cat", 2), ("dog", 1)]);
        let vocab = build_vocab(&[&ds], 1);
        let f = write_tmp("cat 0.5 -1.25 3\nunrelated 1 2 3\n", ".txt");
        let (e1, filled) = load_embeddings(f.path(), &vocab, 3, 7).unwrap();
        assert_eq!(filled, 1);
        let cat = vocab.lookup("cat");
        assert_eq!(e1.matrix.row(cat).to_vec(), vec![0.5, -1.25, 3.0]);
        assert!(e1.matrix.row(PAD).iter().all(|&v| v == 0.0));
        let dog = vocab.lookup("dog");
        assert!(e1.matrix.row(dog).iter().all(|v| v.abs() <= EMBEDDING_INIT_BOUND));
        let (e2, _) = load_embeddings(f.path(), &vocab, 3, 7).unwrap();
        let bits = |m: &EmbeddingMatrix| m.matrix.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&e1), bits(&e2));
    }

    #[test]
    fn embedding_dimension_mismatch_names_line() {
        let vocab = build_vocab(&[&toy(&[("cat", 1)])], 1);
        let f = write_tmp("cat 1 2 3\ndog 1 2\n", ".txt");
        match load_embeddings(f.path(), &vocab, 3, 0) {
            Err(Error::DimensionMismatch { line, found, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(found, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn ex_with_lens(id: &str, lp: usize, lh: usize) -> PairExample {
        PairExample {
            id: id.into(),
            premise: (0..lp).map(|i| format!("p{i}")).collect(),
            hypothesis: (0..lh).map(|i| format!("h{i}")).collect(),
            label: Label::Entailment,
            genre: None,
            provenance: None,
        }
    }

    #[test]
    fn encode_batch_truncates_and_pads() {
        let exs = [ex_with_lens("a", 3, 2), ex_with_lens("b", 5, 1)];
        let ds = Dataset::new("d", exs.to_vec()).unwrap();
        let vocab = build_vocab(&[&ds], 1);
        let batch = encode_batch(&exs, &vocab, 4);
        assert_eq!(batch.premise.width, 4);
        assert_eq!(batch.premise.lengths, vec![3, 4]);
        for (row, &len) in batch.premise.mask.iter().zip(&batch.premise.lengths) {
            assert_eq!(row.iter().filter(|&&m| m).count(), len);
        }
        assert_eq!(batch.premise.indices[0][3], PAD);
        let wide = encode_batch(&exs, &vocab, 64);
        assert_eq!(wide.premise.lengths, vec![3, 5]);
        assert_eq!(wide.hypothesis.width, 2);
    }

    #[test]
    fn time_major_matches_layout_rows() {
        let exs = [ex_with_lens("a", 2, 1), ex_with_lens("b", 1, 1)];
        let ds = Dataset::new("d", exs.to_vec()).unwrap();
        let vocab = build_vocab(&[&ds], 1);
        let batch = encode_batch(&exs, &vocab, 8);
        let tm = batch.premise.time_major();
        let layout = batch.premise.layout();
        assert_eq!(tm[layout.row(1, 0)], batch.premise.indices[0][1]);
        assert_eq!(tm[layout.row(1, 1)], PAD);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn encoded_batches_respect_mask_and_vocab(
                lens in proptest::collection::vec((1usize..12, 1usize..12), 1..8),
                max_len in 1usize..10,
            ) {
                let exs: Vec<_> = lens.iter().enumerate().map(|(i, &(a, b))| ex_with_lens(&i.to_string(), a, b)).collect();
                let ds = Dataset::new("d", exs.clone()).unwrap();
                let vocab = build_vocab(&[&ds], 1);
                let batch = encode_batch(&exs, &vocab, max_len);
                for side in [&batch.premise, &batch.hypothesis] {
                    for (row, (&len, idx)) in side.mask.iter().zip(side.lengths.iter().zip(&side.indices)) {
                        prop_assert_eq!(row.iter().filter(|&&m| m).count(), len);
                        prop_assert!(len <= max_len);
                        prop_assert!(idx.iter().all(|&i| i < vocab.len()));
                    }
                }
                // every in-vocabulary token decodes to itself
                for (ex, row) in exs.iter().zip(&batch.premise.indices) {
                    for (tok, &i) in ex.premise.iter().zip(row) {
                        prop_assert_eq!(vocab.token(i), Some(tok.as_str()));
                    }
                }
            }
        }
    }
}
