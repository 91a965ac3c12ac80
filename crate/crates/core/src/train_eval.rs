//! Training loop with per-epoch model selection, and the Acc / Acc_hr
//! evaluation harness.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bias_audit::BiasKind;
use crate::corpus::{Dataset, Label, PairExample};
use crate::debias_grl::DEBIAS_PREFIX;
use crate::error::{Error, Result};
use crate::model::{LossParts, Model};
use crate::optim::{clip_group, Adam};
use crate::params::ParamId;

pub const DEFAULT_SELECTION_SPLIT: &str = "dev_mismatched";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Name of the dataset used for per-epoch model selection.
    pub selection_split: String,
    pub clip_norm: f64,
    /// Stop after this many optimizer steps (the selection pass still runs).
    pub max_steps: Option<usize>,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.0004,
            batch_size: 32,
            max_epochs: 10,
            seed: 0,
            selection_split: DEFAULT_SELECTION_SPLIT.to_string(),
            clip_norm: 5.0,
            max_steps: None,
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument("batch_size must be at least 2".into()));
        }
        if self.max_epochs == 0 || self.eval_batch_size == 0 {
            return Err(Error::InvalidArgument(
                "max_epochs and eval_batch_size must be at least 1".into(),
            ));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::InvalidArgument("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the metrics stream: either a step's loss components or an
/// epoch's selection accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub epoch: usize,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossParts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection_acc: Option<f64>,
}

pub struct TrainOutcome {
    /// The model from the epoch with the best selection accuracy.
    pub model: Model,
    pub best_epoch: usize,
    pub best_selection_acc: f64,
    pub selection_history: Vec<f64>,
    pub metrics: Vec<MetricRecord>,
    pub steps: usize,
}

/// Model predictions for a list of examples.
pub trait Predictor {
    fn predict_labels(&self, examples: &[&PairExample]) -> Result<Vec<Label>>;
}

impl Predictor for Model {
    fn predict_labels(&self, examples: &[&PairExample]) -> Result<Vec<Label>> {
        self.predict(examples, 256)
    }
}

pub fn accuracy(model: &impl Predictor, ds: &Dataset) -> Result<f64> {
    Ok(evaluate(model, ds, None)?.accuracy)
}

/// Parameter groups clipped independently: the debias network, and
/// everything else. Keeping them apart means the debias network never
/// changes the main model's clipping.
fn clip_groups(model: &Model) -> [Vec<ParamId>; 2] {
    let (debias, main): (Vec<ParamId>, Vec<ParamId>) = model
        .params
        .ids()
        .filter(|&id| model.params.is_trainable(id))
        .partition(|&id| model.params.name(id).starts_with(&format!("{DEBIAS_PREFIX}.")));
    [main, debias]
}

/// Trains `model` on `train`, evaluating on `selection` after every epoch and
/// keeping the best (earliest on ties). Deterministic for a fixed seed.
pub fn train(mut model: Model, cfg: &TrainConfig, train: &Dataset, selection: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);
    let mut adam = Adam::new(cfg.lr);
    let groups = clip_groups(&model);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut metrics = Vec::new();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, crate::params::ParamStore)> = None;
    let mut step = 0usize;
    let mut last_finite: Option<(usize, f64)> = None;

    'epochs: for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut stop = false;
        for chunk in order.chunks(cfg.batch_size) {
            // a trailing batch of one cannot be column-normalized
            if chunk.len() < 2 {
                continue;
            }
            let examples: Vec<&PairExample> = chunk.iter().map(|&i| &train.examples[i]).collect();
            let batch = model.encode(&examples);
            let out = model.step(&batch, &mut dropout_rng)?;
            step += 1;
            let mut grads = out.grads.into_params();
            let finite = out.loss.total.is_finite() && grads.values().all(|g| g.iter().all(|v| v.is_finite()));
            if !finite {
                return Err(Error::Diverged {
                    step,
                    last_finite_step: last_finite.map(|(s, _)| s),
                    last_finite_loss: last_finite.map(|(_, l)| l),
                });
            }
            last_finite = Some((step, out.loss.total));
            for group in &groups {
                clip_group(&mut grads, group, cfg.clip_norm);
            }
            adam.step(&mut model.params, &grads);
            if let Some(stats) = &out.stats {
                model.update_running_stats(stats);
            }
            metrics.push(MetricRecord {
                step,
                epoch,
                loss: Some(out.loss),
                selection_acc: None,
            });
            if cfg.max_steps.is_some_and(|m| step >= m) {
                stop = true;
                break;
            }
        }
        let acc = evaluate_with(&model, selection, None, cfg.eval_batch_size)?.accuracy;
        info!("epoch {epoch}: step {step}, selection accuracy {acc:.4}");
        history.push(acc);
        metrics.push(MetricRecord {
            step,
            epoch,
            loss: None,
            selection_acc: Some(acc),
        });
        if best.as_ref().is_none_or(|(_, b, _)| acc > *b) {
            best = Some((epoch, acc, model.params.clone()));
        }
        if stop {
            break 'epochs;
        }
    }
    let (best_epoch, best_selection_acc, params) = best.expect("at least one epoch ran");
    model.params = params;
    Ok(TrainOutcome {
        model,
        best_epoch,
        best_selection_acc,
        selection_history: history,
        metrics,
        steps: step,
    })
}

pub fn write_metrics_jsonl(
    path: impl AsRef<Path>,
    records: &[MetricRecord],
    config_digest: Option<&str>,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let mut v = serde_json::to_value(r)?;
        if let (Some(d), Some(obj)) = (config_digest, v.as_object_mut()) {
            obj.insert("config_sha256".into(), d.into());
        }
        serde_json::to_writer(&mut out, &v)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    /// Balanced set extracted from in-distribution data.
    Bal,
    /// Set perturbed with appended tautologies.
    Stress,
}

/// Which labels form the hard part of an evaluation set: those on which the
/// bias heuristic is wrong.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HardSubsetRule {
    pub bias_kind: BiasKind,
    pub source_kind: SourceKind,
}

impl HardSubsetRule {
    pub fn new(source_kind: SourceKind, bias_kind: BiasKind) -> Self {
        HardSubsetRule { bias_kind, source_kind }
    }

    pub fn hard_labels(self) -> &'static [Label] {
        use Label::*;
        match (self.source_kind, self.bias_kind) {
            (_, BiasKind::Cwb) => &[Entailment, Neutral],
            (SourceKind::Bal, BiasKind::Wob) => &[Neutral, Contradiction],
            (SourceKind::Stress, BiasKind::Wob) => &[Entailment],
        }
    }

    pub fn is_hard(self, label: Label) -> bool {
        self.hard_labels().contains(&label)
    }
}

impl fmt::Display for HardSubsetRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let src = match self.source_kind {
            SourceKind::Bal => "bal",
            SourceKind::Stress => "stress",
        };
        write!(f, "{src}-{}", self.bias_kind)
    }
}

impl FromStr for HardSubsetRule {
    type Err = Error;

    /// `bal-cwb`, `bal-wob`, `stress-cwb` or `stress-wob`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let (src, bias) = lower
            .split_once(['-', '_', '+'])
            .ok_or_else(|| Error::InvalidArgument(format!("unknown hard-subset rule {s:?}")))?;
        let source_kind = match src {
            "bal" => SourceKind::Bal,
            "stress" => SourceKind::Stress,
            _ => return Err(Error::InvalidArgument(format!("unknown hard-subset rule {s:?}"))),
        };
        let bias_kind = bias
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("unknown hard-subset rule {s:?}")))?;
        Ok(HardSubsetRule { bias_kind, source_kind })
    }
}

/// The examples whose gold label is in the rule's hard set.
pub fn hard_subset(ds: &Dataset, rule: HardSubsetRule) -> Vec<&PairExample> {
    ds.iter().filter(|e| rule.is_hard(e.label)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub name: String,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub n_hard: usize,
    pub correct_hard: usize,
    /// `None` without a rule or when the hard subset is empty.
    pub accuracy_hard: Option<f64>,
    pub rule: Option<HardSubsetRule>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_sha256: Option<String>,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Scores given predictions against gold labels.
pub fn evaluate_predictions(
    name: &str,
    examples: &[&PairExample],
    predictions: &[Label],
    rule: Option<HardSubsetRule>,
) -> Result<EvalRow> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument(format!("dataset {name:?} is empty")));
    }
    if examples.len() != predictions.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} examples",
            predictions.len(),
            examples.len()
        )));
    }
    let (mut correct, mut n_hard, mut correct_hard) = (0, 0, 0);
    for (e, &p) in examples.iter().zip(predictions) {
        let ok = e.label == p;
        correct += ok as usize;
        if rule.is_some_and(|r| r.is_hard(e.label)) {
            n_hard += 1;
            correct_hard += ok as usize;
        }
    }
    let n = examples.len();
    Ok(EvalRow {
        name: name.to_string(),
        n,
        correct,
        accuracy: correct as f64 / n as f64,
        n_hard,
        correct_hard,
        accuracy_hard: (n_hard > 0).then(|| correct_hard as f64 / n_hard as f64),
        rule,
    })
}

pub fn evaluate(model: &impl Predictor, ds: &Dataset, rule: Option<HardSubsetRule>) -> Result<EvalRow> {
    let examples: Vec<&PairExample> = ds.iter().collect();
    if examples.is_empty() {
        return Err(Error::InvalidArgument(format!("dataset {:?} is empty", ds.name)));
    }
    let predictions = model.predict_labels(&examples)?;
    evaluate_predictions(&ds.name, &examples, &predictions, rule)
}

fn evaluate_with(model: &Model, ds: &Dataset, rule: Option<HardSubsetRule>, batch: usize) -> Result<EvalRow> {
    let examples: Vec<&PairExample> = ds.iter().collect();
    if examples.is_empty() {
        return Err(Error::InvalidArgument(format!("dataset {:?} is empty", ds.name)));
    }
    let predictions = model.predict(&examples, batch)?;
    evaluate_predictions(&ds.name, &examples, &predictions, rule)
}
