//! A complete pair classifier: baseline, gradient-reversal debiased, or
//! HEX-projected, sharing one parameter store and vocabulary.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Grads, Graph, NodeId};
use crate::corpus::{encode_batch, EmbeddingMatrix, PairBatch, PairExample, Vocabulary, DEFAULT_MAX_LEN};
use crate::debias_grl::{debias_term, register_debias_net, GrlConfig};
use crate::encoders::{
    classify, encode_pair, mlp_hidden, register_bow_encoder, register_main_encoder, register_mlp, Dropout,
    EncoderConfig, RepKind, N_CLASSES,
};
use crate::error::{Error, Result};
use crate::hex_projection::{hex_graph, hex_loss, hex_predict_graph, register_head, HexConfig};
use crate::params::{Mat, ParamStore};

const MAIN_HEAD: &str = "head";
const BOW_HEAD: &str = "hex.bow";
const NORM_MAIN: &str = "hex.norm.main";
const NORM_BOW: &str = "hex.norm.bow";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Baseline,
    Grl,
    Hex,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Baseline => "baseline",
            ModelKind::Grl => "grl",
            ModelKind::Hex => "hex",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(ModelKind::Baseline),
            "grl" => Ok(ModelKind::Grl),
            "hex" => Ok(ModelKind::Hex),
            other => Err(Error::InvalidArgument(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub max_len: usize,
    pub encoder: EncoderConfig,
    pub grl: GrlConfig,
    pub hex: HexConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Baseline,
            max_len: DEFAULT_MAX_LEN,
            encoder: EncoderConfig::default(),
            grl: GrlConfig::default(),
            hex: HexConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.grl.validate()?;
        self.hex.validate()?;
        if self.max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// Loss components of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    /// The objective value (for GRL, `L_c - lambda * L_ed`).
    pub total: f64,
    pub l_c: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_ed: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_f_l: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_f_g: Option<f64>,
}

/// Batch column statistics of the HEX inputs, folded into running averages
/// after each step.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnStats {
    pub main: Option<(Vec<f64>, Vec<f64>)>,
    pub bow: Option<(Vec<f64>, Vec<f64>)>,
}

pub struct StepOutput {
    pub loss: LossParts,
    pub grads: Grads,
    pub stats: Option<ColumnStats>,
}

fn column_mean_var(x: &Mat) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    x.columns()
        .into_iter()
        .map(|c| {
            let m = c.sum() / n;
            (m, c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n)
        })
        .unzip()
}

pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
}

impl Model {
    /// Builds a freshly initialized model. Without pretrained vectors the
    /// embedding table is drawn uniformly.
    pub fn new(config: ModelConfig, vocab: Vocabulary, embeddings: Option<EmbeddingMatrix>, seed: u64) -> Result<Self> {
        config.validate()?;
        let enc = &config.encoder;
        let emb = match embeddings {
            Some(e) => e,
            None => EmbeddingMatrix::random(vocab.len(), enc.d_e, seed),
        };
        if emb.matrix.dim() != (vocab.len(), enc.d_e) {
            return Err(Error::Shape(format!(
                "embedding table is {:?}, expected ({}, {})",
                emb.matrix.dim(),
                vocab.len(),
                enc.d_e
            )));
        }
        let mut params = ParamStore::new();
        params.insert("emb", emb.matrix, true);
        register_main_encoder(&mut params, enc, seed);
        register_mlp(&mut params, seed, MAIN_HEAD, 4 * enc.d_rep_main(), enc.d_mlp, N_CLASSES);
        match config.kind {
            ModelKind::Baseline => {}
            ModelKind::Grl => register_debias_net(&mut params, enc, config.grl.variant, seed),
            ModelKind::Hex => {
                register_bow_encoder(&mut params, enc, seed);
                crate::encoders::register(
                    &mut params,
                    seed,
                    &format!("{BOW_HEAD}.hidden.w"),
                    4 * enc.d_rep_bow(),
                    enc.d_mlp,
                );
                crate::encoders::register_zeros(&mut params, &format!("{BOW_HEAD}.hidden.b"), 1, enc.d_mlp);
                register_head(&mut params, seed, enc.d_mlp, enc.d_mlp);
                for prefix in [NORM_MAIN, NORM_BOW] {
                    params.insert(&format!("{prefix}.mean"), Array2::zeros((1, enc.d_mlp)), false);
                    params.insert(&format!("{prefix}.var"), Array2::ones((1, enc.d_mlp)), false);
                }
            }
        }
        Ok(Model { config, vocab, params })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    /// Copies every same-named, same-shaped parameter from a trained model
    /// (normally the baseline), then applies the HEX bottom freeze.
    pub fn warm_start(&mut self, from: &Model) -> Result<Vec<String>> {
        if from.vocab.digest() != self.vocab.digest() {
            return Err(Error::Checkpoint("warm start needs an identical vocabulary".into()));
        }
        let copied = self.params.copy_matching(&from.params);
        if self.kind() == ModelKind::Hex && self.config.hex.freeze_bottom {
            self.freeze_bottom();
        }
        Ok(copied)
    }

    /// Marks the embeddings and the first BiLSTM layer as fixed.
    pub fn freeze_bottom(&mut self) {
        let ids: Vec<_> = self
            .params
            .ids()
            .filter(|&id| {
                let name = self.params.name(id);
                name == "emb" || name.starts_with("main.l0.")
            })
            .collect();
        for id in ids {
            self.params.set_trainable(id, false);
        }
    }

    pub fn encode(&self, examples: &[&PairExample]) -> PairBatch {
        encode_batch(examples.iter().copied(), &self.vocab, self.config.max_len)
    }

    /// One training forward/backward pass.
    pub fn step(&self, batch: &PairBatch, rng: &mut ChaCha8Rng) -> Result<StepOutput> {
        let labels = batch.label_indices();
        let n = labels.len();
        let enc = &self.config.encoder;
        let mut g = Graph::new(&self.params);
        let mut drop = Dropout::train(enc.dropout, rng);
        let (h1, h2, m) = encode_pair(
            &mut g,
            &self.params,
            enc,
            &batch.premise,
            &batch.hypothesis,
            RepKind::Main,
            &mut drop,
        )?;
        let mean = vec![1.0 / n as f64; n];
        match self.kind() {
            ModelKind::Baseline | ModelKind::Grl => {
                let logits = classify(&mut g, &self.params, m);
                let l_c = g.softmax_xent(logits, &labels, &mean);
                if self.kind() == ModelKind::Baseline {
                    let loss = LossParts {
                        total: g.scalar(l_c),
                        l_c: g.scalar(l_c),
                        ..Default::default()
                    };
                    return Ok(StepOutput {
                        loss,
                        grads: g.backward(l_c),
                        stats: None,
                    });
                }
                let grl = &self.config.grl;
                let term = debias_term(
                    &mut g,
                    &self.params,
                    grl,
                    &batch.premise,
                    &batch.hypothesis,
                    h1.node,
                    h2.node,
                    &labels,
                )?;
                // The reversal node flips the encoder's share, so the
                // backward root adds the debias loss.
                let root = g.add(l_c, term.loss);
                let (lc, led) = (g.scalar(l_c), g.scalar(term.loss));
                let loss = LossParts {
                    total: lc - grl.loss.lambda * led,
                    l_c: lc,
                    l_ed: Some(led),
                    ..Default::default()
                };
                Ok(StepOutput {
                    loss,
                    grads: g.backward(root),
                    stats: None,
                })
            }
            ModelKind::Hex => {
                if n < 2 {
                    return Err(Error::InvalidArgument(
                        "HEX training needs batches of at least 2".into(),
                    ));
                }
                let hex = &self.config.hex;
                let u_main = mlp_hidden(&mut g, &self.params, MAIN_HEAD, m.node);
                let (_, _, mb) = encode_pair(
                    &mut g,
                    &self.params,
                    enc,
                    &batch.premise,
                    &batch.hypothesis,
                    RepKind::Bow,
                    &mut drop,
                )?;
                let u_bow = mlp_hidden(&mut g, &self.params, BOW_HEAD, mb.node);
                let stats = ColumnStats {
                    main: hex.normalize_main.then(|| column_mean_var(g.value(u_main))),
                    bow: hex.normalize_bow.then(|| column_mean_var(g.value(u_bow))),
                };
                let u_main = if hex.normalize_main {
                    g.column_normalize(u_main)
                } else {
                    u_main
                };
                let u_bow = if hex.normalize_bow {
                    g.column_normalize(u_bow)
                } else {
                    u_bow
                };
                let nodes = hex_graph(&mut g, &self.params, u_bow, u_main, hex);
                let (root, l_l, l_g) = hex_loss(&mut g, &nodes, &labels, hex);
                let loss = LossParts {
                    total: g.scalar(root),
                    l_c: g.scalar(l_l),
                    l_f_l: Some(g.scalar(l_l)),
                    l_f_g: Some(g.scalar(l_g)),
                    ..Default::default()
                };
                Ok(StepOutput {
                    loss,
                    grads: g.backward(root),
                    stats: Some(stats),
                })
            }
        }
    }

    /// Folds batch statistics into the running averages used at test time.
    pub fn update_running_stats(&mut self, stats: &ColumnStats) {
        let momentum = self.config.hex.running_momentum;
        for (prefix, s) in [(NORM_MAIN, &stats.main), (NORM_BOW, &stats.bow)] {
            let Some((mean, var)) = s else { continue };
            for (suffix, fresh) in [("mean", mean), ("var", var)] {
                let id = self.params.expect(&format!("{prefix}.{suffix}"));
                let cur = self.params.value_mut(id);
                for (c, &f) in cur.iter_mut().zip(fresh) {
                    *c = (1.0 - momentum) * *c + momentum * f;
                }
            }
        }
    }

    /// Normalizes test-time HEX inputs with the running statistics; columns
    /// that were constant in training map to zero as they did then.
    fn normalize_running(&self, g: &mut Graph, x: NodeId, prefix: &str) -> NodeId {
        let mean = self.params.value(self.params.expect(&format!("{prefix}.mean")));
        let var = self.params.value(self.params.expect(&format!("{prefix}.var")));
        let shift: Vec<f64> = mean.iter().copied().collect();
        let scale: Vec<f64> = var
            .iter()
            .zip(&shift)
            .map(|(&v, &m)| {
                let sd = v.max(0.0).sqrt();
                if sd <= 1e-12 * (1.0 + m.abs()) {
                    0.0
                } else {
                    1.0 / sd
                }
            })
            .collect();
        g.affine_cols(x, &shift, &scale)
    }

    /// Evaluation-mode logits (`n x 3`).
    pub fn logits(&self, batch: &PairBatch) -> Result<Mat> {
        let enc = &self.config.encoder;
        let mut g = Graph::new(&self.params);
        let mut off = Dropout::off();
        let (_, _, m) = encode_pair(
            &mut g,
            &self.params,
            enc,
            &batch.premise,
            &batch.hypothesis,
            RepKind::Main,
            &mut off,
        )?;
        let out = match self.kind() {
            ModelKind::Baseline | ModelKind::Grl => classify(&mut g, &self.params, m),
            ModelKind::Hex => {
                let u_main = mlp_hidden(&mut g, &self.params, MAIN_HEAD, m.node);
                let u_main = if self.config.hex.normalize_main {
                    self.normalize_running(&mut g, u_main, NORM_MAIN)
                } else {
                    u_main
                };
                hex_predict_graph(&mut g, &self.params, u_main, enc.d_mlp)
            }
        };
        Ok(g.value(out).clone())
    }

    /// Class probabilities, computed in chunks of `batch_size`.
    pub fn probabilities(&self, examples: &[&PairExample], batch_size: usize) -> Result<Vec<[f64; 3]>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(batch_size.max(1)) {
            let probs = softmax_rows(&self.logits(&self.encode(chunk))?);
            out.extend(probs.rows().into_iter().map(|r| [r[0], r[1], r[2]]));
        }
        Ok(out)
    }

    /// Argmax predictions (ties go to the lower class index).
    pub fn predict(&self, examples: &[&PairExample], batch_size: usize) -> Result<Vec<crate::corpus::Label>> {
        Ok(self
            .probabilities(examples, batch_size)?
            .into_iter()
            .map(|p| crate::corpus::Label::from_index(argmax(&p)).expect("three classes"))
            .collect())
    }
}

pub(crate) fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, Dataset, Label};
    use crate::debias_grl::{DebiasVariant, GrlLossConfig};
    use rand::SeedableRng;

    fn small(kind: ModelKind) -> ModelConfig {
        ModelConfig {
            kind,
            encoder: EncoderConfig {
                d_e: 6,
                d_h: 4,
                n_layers: 2,
                dropout: 0.2,
                n_heads: 2,
                d_att: 4,
                d_mlp: 5,
            },
            ..ModelConfig::default()
        }
    }

    fn data() -> Dataset {
        Dataset::new(
            "d",
            vec![
                PairExample::new("1", "a man sleeps", "no man sleeps", Label::Contradiction),
                PairExample::new("2", "the dog runs fast", "a dog runs", Label::Entailment),
                PairExample::new("3", "two birds sing", "birds sing at dawn", Label::Neutral),
            ],
        )
        .unwrap()
    }

    #[test]
    fn every_kind_steps_and_predicts() {
        let ds = data();
        let vocab = build_vocab(&[&ds], 1);
        let refs: Vec<&PairExample> = ds.iter().collect();
        for kind in [ModelKind::Baseline, ModelKind::Grl, ModelKind::Hex] {
            let mut model = Model::new(small(kind), vocab.clone(), None, 3).unwrap();
            let batch = model.encode(&refs);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = model.step(&batch, &mut rng).unwrap();
            assert!(out.loss.total.is_finite());
            assert!(out.grads.param(model.params.expect("main.l0.fwd.w")).is_some());
            if let Some(stats) = &out.stats {
                model.update_running_stats(stats);
            }
            let probs = model.probabilities(&refs, 2).unwrap();
            for p in probs {
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grl_with_zero_lambda_matches_baseline_gradients() {
        let ds = data();
        let vocab = build_vocab(&[&ds], 1);
        let refs: Vec<&PairExample> = ds.iter().collect();
        let base = Model::new(small(ModelKind::Baseline), vocab.clone(), None, 3).unwrap();
        let mut cfg = small(ModelKind::Grl);
        cfg.grl = GrlConfig {
            variant: DebiasVariant::Full,
            loss: GrlLossConfig { lambda: 0.0 },
        };
        let grl = Model::new(cfg, vocab, None, 3).unwrap();
        let batch = base.encode(&refs);
        let a = base.step(&batch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = grl.step(&batch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.loss.l_c.to_bits(), b.loss.l_c.to_bits());
        for id in base.params.ids() {
            let name = base.params.name(id);
            let other = grl.params.expect(name);
            assert_eq!(a.grads.param(id), b.grads.param(other), "{name}");
        }
    }

    #[test]
    fn hex_warm_start_freezes_bottom_and_ignores_bow_at_test() {
        let ds = data();
        let vocab = build_vocab(&[&ds], 1);
        let refs: Vec<&PairExample> = ds.iter().collect();
        let base = Model::new(small(ModelKind::Baseline), vocab.clone(), None, 3).unwrap();
        let mut hex = Model::new(small(ModelKind::Hex), vocab, None, 4).unwrap();
        let copied = hex.warm_start(&base).unwrap();
        assert!(copied.contains(&"main.l1.bwd.u".to_string()));
        assert!(!hex.params.is_trainable(hex.params.expect("emb")));
        assert!(!hex.params.is_trainable(hex.params.expect("main.l0.fwd.w")));
        assert!(hex.params.is_trainable(hex.params.expect("main.l1.fwd.w")));
        let batch = hex.encode(&refs);
        let before = hex.logits(&batch).unwrap();
        let id = hex.params.expect("bow.wv");
        hex.params.value_mut(id).mapv_inplace(|v| v * 3.0 + 1.0);
        assert_eq!(hex.logits(&batch).unwrap(), before);
    }
}
