//! Sentence encoders and the pair classifier.
//!
//! The main encoder is a shortcut-stacked BiLSTM: layer `i` reads the word
//! vectors concatenated with the outputs of every earlier layer, and the
//! sentence vector is the elementwise max over time of the last layer. The
//! BoW encoder is position-free multi-head self-attention followed by a mean
//! over real tokens, so it cannot see word order.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::corpus::SideBatch;
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, param_rng, ParamStore};

pub const N_CLASSES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Word vector width.
    pub d_e: usize,
    /// LSTM hidden width per direction.
    pub d_h: usize,
    pub n_layers: usize,
    pub dropout: f64,
    pub n_heads: usize,
    /// Self-attention width of the BoW encoder.
    pub d_att: usize,
    /// Hidden width of the classifier, u-projection and debias MLPs.
    pub d_mlp: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_e: 300,
            d_h: 300,
            n_layers: 3,
            dropout: 0.4,
            n_heads: 4,
            d_att: 300,
            d_mlp: 300,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_e", self.d_e),
            ("d_h", self.d_h),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_att", self.d_att),
            ("d_mlp", self.d_mlp),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if !self.d_att.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument("d_att must be divisible by n_heads".into()));
        }
        Ok(())
    }

    /// Width of a main-encoder sentence vector.
    pub fn d_rep_main(&self) -> usize {
        2 * self.d_h
    }

    pub fn d_rep_bow(&self) -> usize {
        self.d_att
    }

    fn layer_input(&self, layer: usize) -> usize {
        self.d_e + layer * 2 * self.d_h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepKind {
    Main,
    Bow,
}

/// Batch of sentence vectors (`batch x width`) living in a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SentenceRep {
    pub node: NodeId,
    pub width: usize,
    pub kind: RepKind,
}

/// Batch of pair vectors `[h1; h2; h1 - h2; h1 * h2]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairRep {
    pub node: NodeId,
    pub width: usize,
}

/// Inverted dropout; a no-op without an RNG (evaluation) or at rate 0.
pub struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Dropout<'r> {
    pub fn train(rate: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Dropout { rate, rng: Some(rng) }
    }

    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn is_active(&self) -> bool {
        self.rng.is_some()
    }

    pub fn apply(&mut self, g: &mut Graph, x: NodeId) -> NodeId {
        let Some(rng) = self.rng.as_deref_mut() else { return x };
        if self.rate == 0.0 {
            return x;
        }
        let keep = 1.0 - self.rate;
        let dim = g.value(x).dim();
        let mask = Array2::from_shape_fn(dim, |_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
        g.mul_const(x, mask)
    }
}

pub(crate) fn register(store: &mut ParamStore, seed: u64, name: &str, rows: usize, cols: usize) {
    let mut rng = param_rng(seed, name);
    store.insert(name, fan_in_uniform(rows, cols, &mut rng), true);
}

pub(crate) fn register_zeros(store: &mut ParamStore, name: &str, rows: usize, cols: usize) {
    store.insert(name, Array2::zeros((rows, cols)), true);
}

fn lstm_name(layer: usize, dir: &str, part: &str) -> String {
    format!("main.l{layer}.{dir}.{part}")
}

/// Registers the shortcut-stacked BiLSTM weights.
pub fn register_main_encoder(store: &mut ParamStore, cfg: &EncoderConfig, seed: u64) {
    let h = cfg.d_h;
    for layer in 0..cfg.n_layers {
        for dir in ["fwd", "bwd"] {
            // LSTM weights use ±1/sqrt(h) like common framework defaults.
            let bound = 1.0 / (h as f64).sqrt();
            for (part, rows) in [("w", cfg.layer_input(layer)), ("u", h)] {
                let name = lstm_name(layer, dir, part);
                let mut rng = param_rng(seed, &name);
                store.insert(&name, crate::params::uniform(rows, 4 * h, bound, &mut rng), true);
            }
            register_zeros(store, &lstm_name(layer, dir, "b"), 1, 4 * h);
        }
    }
}

/// Registers the self-attention projections of the BoW encoder.
pub fn register_bow_encoder(store: &mut ParamStore, cfg: &EncoderConfig, seed: u64) {
    for part in ["wq", "wk", "wv"] {
        register(store, seed, &format!("bow.{part}"), cfg.d_e, cfg.d_att);
    }
    register(store, seed, "bow.wo", cfg.d_att, cfg.d_att);
}

/// Registers a one-hidden-layer tanh MLP under `prefix`.
pub fn register_mlp(store: &mut ParamStore, seed: u64, prefix: &str, d_in: usize, d_hidden: usize, d_out: usize) {
    register(store, seed, &format!("{prefix}.hidden.w"), d_in, d_hidden);
    register_zeros(store, &format!("{prefix}.hidden.b"), 1, d_hidden);
    register(store, seed, &format!("{prefix}.out.w"), d_hidden, d_out);
    register_zeros(store, &format!("{prefix}.out.b"), 1, d_out);
}

/// `x W + b` for parameters `{prefix}.w` and `{prefix}.b`.
pub fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> NodeId {
    let w = g.param(store.expect(&format!("{prefix}.w")));
    let b = g.param(store.expect(&format!("{prefix}.b")));
    let xw = g.matmul(x, w);
    g.add_row(xw, b)
}

/// Hidden activations `tanh(x W1 + b1)` of the MLP under `prefix`.
pub fn mlp_hidden(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> NodeId {
    let pre = linear(g, store, &format!("{prefix}.hidden"), x);
    g.tanh(pre)
}

/// Full MLP output.
pub fn mlp(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> NodeId {
    let h = mlp_hidden(g, store, prefix, x);
    linear(g, store, &format!("{prefix}.out"), h)
}

fn check_lengths(side: &SideBatch) -> Result<()> {
    match side.lengths.iter().position(|&l| l == 0) {
        Some(index) => Err(Error::EmptySequence { index }),
        None => Ok(()),
    }
}

/// Word vectors for a batch side, time-major `(width * n) x d_e`.
pub fn embed(g: &mut Graph, store: &ParamStore, side: &SideBatch) -> NodeId {
    let emb = g.param(store.expect("emb"));
    g.gather_rows(emb, side.time_major())
}

/// Main-encoder sentence vectors (`n x 2 d_h`).
pub fn encode_main(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    side: &SideBatch,
    dropout: &mut Dropout,
) -> Result<SentenceRep> {
    let words = embed(g, store, side);
    encode_main_from(g, store, cfg, side, words, dropout)
}

/// Main encoder over precomputed time-major word vectors.
pub fn encode_main_from(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    side: &SideBatch,
    words: NodeId,
    dropout: &mut Dropout,
) -> Result<SentenceRep> {
    check_lengths(side)?;
    let layout = side.layout();
    let x = dropout.apply(g, words);
    let mut inputs = vec![x];
    let mut last = x;
    for layer in 0..cfg.n_layers {
        let inp = if inputs.len() == 1 {
            inputs[0]
        } else {
            g.concat_cols(&inputs)
        };
        let mut dirs = [inp; 2];
        for (k, dir) in ["fwd", "bwd"].into_iter().enumerate() {
            let w = g.param(store.expect(&lstm_name(layer, dir, "w")));
            let u = g.param(store.expect(&lstm_name(layer, dir, "u")));
            let b = g.param(store.expect(&lstm_name(layer, dir, "b")));
            let xw = g.matmul(inp, w);
            let xw = g.add_row(xw, b);
            dirs[k] = g.lstm_seq(xw, u, &layout, k == 1);
        }
        let out = g.concat_cols(&dirs);
        last = out;
        if layer + 1 < cfg.n_layers {
            let out = dropout.apply(g, out);
            inputs.push(out);
        }
    }
    let pooled = g.masked_max(last, &layout);
    Ok(SentenceRep {
        node: pooled,
        width: cfg.d_rep_main(),
        kind: RepKind::Main,
    })
}

/// BoW sentence vectors (`n x d_att`): self-attention without positions,
/// output projection, mean over the true length.
pub fn encode_bow(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    side: &SideBatch,
    dropout: &mut Dropout,
) -> Result<SentenceRep> {
    check_lengths(side)?;
    let layout = side.layout();
    let words = embed(g, store, side);
    let x = dropout.apply(g, words);
    let proj = |g: &mut Graph, name: &str| {
        let w = g.param(store.expect(name));
        g.matmul(x, w)
    };
    let q = proj(g, "bow.wq");
    let k = proj(g, "bow.wk");
    let v = proj(g, "bow.wv");
    let att = g.attention(q, k, v, cfg.n_heads, &layout);
    let wo = g.param(store.expect("bow.wo"));
    let out = g.matmul(att, wo);
    let pooled = g.masked_mean(out, &layout);
    Ok(SentenceRep {
        node: pooled,
        width: cfg.d_rep_bow(),
        kind: RepKind::Bow,
    })
}

/// `m = [h1; h2; h1 - h2; h1 * h2]`.
pub fn combine(g: &mut Graph, h1: SentenceRep, h2: SentenceRep) -> Result<PairRep> {
    if h1.width != h2.width || g.value(h1.node).dim() != g.value(h2.node).dim() {
        return Err(Error::Shape(format!(
            "cannot combine sentence vectors of widths {} and {}",
            h1.width, h2.width
        )));
    }
    let diff = g.sub(h1.node, h2.node);
    let prod = g.mul(h1.node, h2.node);
    let node = g.concat_cols(&[h1.node, h2.node, diff, prod]);
    Ok(PairRep {
        node,
        width: 4 * h1.width,
    })
}

/// Encodes premises and hypotheses in one stacked pass and combines them.
pub fn encode_pair(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    premise: &SideBatch,
    hypothesis: &SideBatch,
    kind: RepKind,
    dropout: &mut Dropout,
) -> Result<(SentenceRep, SentenceRep, PairRep)> {
    let n = premise.len();
    let stacked = premise.stack(hypothesis);
    let both = match kind {
        RepKind::Main => encode_main(g, store, cfg, &stacked, dropout)?,
        RepKind::Bow => encode_bow(g, store, cfg, &stacked, dropout)?,
    };
    let split = |g: &mut Graph, lo: usize, hi: usize| SentenceRep {
        node: g.slice_rows(both.node, lo, hi),
        ..both
    };
    let h1 = split(g, 0, n);
    let h2 = split(g, n, 2 * n);
    let m = combine(g, h1, h2)?;
    Ok((h1, h2, m))
}

/// Three-class logits from the classifier MLP (`head.*`).
pub fn classify(g: &mut Graph, store: &ParamStore, m: PairRep) -> NodeId {
    mlp(g, store, "head", m.node)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, encode_batch, Dataset, Label, PairExample};
    use crate::params::Mat;
    use ndarray::arr2;
    use rand::SeedableRng;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            d_e: 6,
            d_h: 4,
            n_layers: 3,
            dropout: 0.0,
            n_heads: 2,
            d_att: 4,
            d_mlp: 5,
        }
    }

    fn store_for(cfg: &EncoderConfig, vocab_size: usize) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = param_rng(11, "emb");
        let mut emb = crate::params::uniform(vocab_size, cfg.d_e, 1.0, &mut rng);
        emb.row_mut(0).fill(0.0);
        store.insert("emb", emb, true);
        register_main_encoder(&mut store, cfg, 11);
        register_bow_encoder(&mut store, cfg, 11);
        register_mlp(&mut store, 11, "head", 4 * cfg.d_rep_main(), cfg.d_mlp, N_CLASSES);
        store
    }

    fn fixture() -> (Dataset, crate::corpus::Vocabulary) {
        let ds = Dataset::new(
            "f",
            vec![
                PairExample::new(
                    "1",
                    "the cat chased the dog",
                    "the dog chased the cat",
                    Label::Contradiction,
                ),
                PairExample::new("2", "a bird", "a bird sang loudly today", Label::Neutral),
            ],
        )
        .unwrap();
        let vocab = build_vocab(&[&ds], 1);
        (ds, vocab)
    }

    fn encode(store: &ParamStore, cfg: &EncoderConfig, side: &SideBatch, kind: RepKind) -> Mat {
        let mut g = Graph::new(store);
        let rep = match kind {
            RepKind::Main => encode_main(&mut g, store, cfg, side, &mut Dropout::off()).unwrap(),
            RepKind::Bow => encode_bow(&mut g, store, cfg, side, &mut Dropout::off()).unwrap(),
        };
        g.value(rep.node).clone()
    }

    #[test]
    fn default_config_main_width() {
        let cfg = EncoderConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.d_rep_main(), 600);
        assert_eq!(4 * cfg.d_rep_main(), 2400);
    }

    #[test]
    fn main_output_shape_and_single_token() {
        let cfg = EncoderConfig { d_h: 5, ..small_cfg() };
        let (ds, vocab) = fixture();
        let store = store_for(&cfg, vocab.len());
        let batch = encode_batch(ds.iter(), &vocab, 64);
        let out = encode(&store, &cfg, &batch.premise, RepKind::Main);
        assert_eq!(out.dim(), (2, 10));

        let single = PairExample::new("s", "cat", "cat", Label::Entailment);
        let b = encode_batch([&single], &vocab, 64);
        // with one token, max over time is that token's top-layer output
        let mut g = Graph::new(&store);
        let rep = encode_main(&mut g, &store, &cfg, &b.premise, &mut Dropout::off()).unwrap();
        assert_eq!(g.value(rep.node).dim(), (1, 10));
    }

    #[test]
    fn padding_never_changes_representations() {
        let cfg = small_cfg();
        let (ds, vocab) = fixture();
        let store = store_for(&cfg, vocab.len());
        let short = &ds.examples[1];
        let alone = encode_batch([short], &vocab, 64);
        let padded = encode_batch([&ds.examples[0], short], &vocab, 64);
        assert!(padded.premise.width > alone.premise.width);
        for kind in [RepKind::Main, RepKind::Bow] {
            let a = encode(&store, &cfg, &alone.premise, kind);
            let b = encode(&store, &cfg, &padded.premise, kind);
            for j in 0..a.ncols() {
                assert!((a[[0, j]] - b[[1, j]]).abs() <= 1e-6, "{kind:?} col {j}");
            }
        }
    }

    #[test]
    fn bow_ignores_order_main_does_not() {
        let cfg = small_cfg();
        let (_, vocab) = fixture();
        let store = store_for(&cfg, vocab.len());
        let a = PairExample::new("a", "the cat chased the dog", "x", Label::Entailment);
        let b = PairExample::new("b", "the dog chased the cat", "x", Label::Entailment);
        let ba = encode_batch([&a], &vocab, 64);
        let bb = encode_batch([&b], &vocab, 64);
        let bow_diff = (encode(&store, &cfg, &ba.premise, RepKind::Bow)
            - encode(&store, &cfg, &bb.premise, RepKind::Bow))
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(bow_diff <= 1e-6);
        let main_diff = (encode(&store, &cfg, &ba.premise, RepKind::Main)
            - encode(&store, &cfg, &bb.premise, RepKind::Main))
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(main_diff > 1e-6);
    }

    #[test]
    fn single_token_bow_is_that_tokens_attention_output() {
        let cfg = small_cfg();
        let (_, vocab) = fixture();
        let store = store_for(&cfg, vocab.len());
        let single = PairExample::new("s", "bird", "bird", Label::Entailment);
        let b = encode_batch([&single], &vocab, 64);
        let got = encode(&store, &cfg, &b.premise, RepKind::Bow);
        let e = store
            .value(store.expect("emb"))
            .row(vocab.lookup("bird"))
            .to_owned()
            .insert_axis(ndarray::Axis(0));
        let expect = e
            .dot(store.value(store.expect("bow.wv")))
            .dot(store.value(store.expect("bow.wo")));
        for j in 0..expect.ncols() {
            assert!((got[[0, j]] - expect[[0, j]]).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_row_is_an_error() {
        let cfg = small_cfg();
        let store = store_for(&cfg, 4);
        let side = SideBatch {
            indices: vec![vec![2], vec![0]],
            lengths: vec![1, 0],
            mask: vec![vec![true], vec![false]],
            width: 1,
        };
        let mut g = Graph::new(&store);
        assert!(matches!(
            encode_main(&mut g, &store, &cfg, &side, &mut Dropout::off()),
            Err(Error::EmptySequence { index: 1 })
        ));
        assert!(encode_bow(&mut g, &store, &cfg, &side, &mut Dropout::off()).is_err());
    }

    #[test]
    fn combine_arithmetic_and_width_check() {
        let mut g = Graph::detached();
        let a = g.constant(arr2(&[[1.0, 2.0]]));
        let b = g.constant(arr2(&[[3.0, 4.0]]));
        let rep = |node| SentenceRep {
            node,
            width: 2,
            kind: RepKind::Main,
        };
        let m = combine(&mut g, rep(a), rep(b)).unwrap();
        assert_eq!(g.value(m.node), &arr2(&[[1.0, 2.0, 3.0, 4.0, -2.0, -2.0, 3.0, 8.0]]));
        let same = combine(&mut g, rep(a), rep(a)).unwrap();
        assert_eq!(g.value(same.node).row(0).to_vec()[4..], [0.0, 0.0, 1.0, 4.0]);
        let c = g.constant(arr2(&[[1.0, 2.0, 3.0]]));
        assert!(combine(
            &mut g,
            rep(a),
            SentenceRep {
                node: c,
                width: 3,
                kind: RepKind::Main
            }
        )
        .is_err());
    }

    #[test]
    fn zero_head_gives_zero_logits_and_rows_are_independent() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        register_mlp(&mut store, 1, "head", 8, 5, 3);
        for name in ["head.out.w", "head.out.b"] {
            store.value_mut(store.expect(name)).fill(0.0);
        }
        let mut g = Graph::new(&store);
        let x = g.constant(Array2::from_shape_fn((2, 8), |(i, j)| (i * 8 + j) as f64 * 0.1));
        let logits = classify(&mut g, &store, PairRep { node: x, width: 8 });
        assert!(g.value(logits).iter().all(|&v| v == 0.0));

        let store = store_for(&cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows = Array2::from_shape_fn((3, 4 * cfg.d_rep_main()), |_| rng.gen_range(-1.0..1.0));
        let mut g = Graph::new(&store);
        let x = g.constant(rows.clone());
        let fwd = classify(
            &mut g,
            &store,
            PairRep {
                node: x,
                width: rows.ncols(),
            },
        );
        let mut rev = rows.clone();
        for i in 0..3 {
            rev.row_mut(i).assign(&rows.row(2 - i));
        }
        let xr = g.constant(rev);
        let bwd = classify(
            &mut g,
            &store,
            PairRep {
                node: xr,
                width: rows.ncols(),
            },
        );
        for i in 0..3 {
            for j in 0..3 {
                assert!((g.value(fwd)[[i, j]] - g.value(bwd)[[2 - i, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encoder_parameter_gradients_match_finite_differences() {
        let cfg = EncoderConfig {
            d_e: 3,
            d_h: 2,
            n_layers: 2,
            dropout: 0.0,
            n_heads: 1,
            d_att: 2,
            d_mlp: 3,
        };
        let (ds, vocab) = fixture();
        let mut store = store_for(&cfg, vocab.len());
        register_mlp(&mut store, 11, "bowhead", 4 * cfg.d_rep_bow(), cfg.d_mlp, N_CLASSES);
        let batch = encode_batch(ds.iter(), &vocab, 64);
        let labels = batch.label_indices();
        let loss = |store: &ParamStore| -> (f64, crate::autograd::Grads) {
            let mut g = Graph::new(store);
            let (_, _, m) = encode_pair(
                &mut g,
                store,
                &cfg,
                &batch.premise,
                &batch.hypothesis,
                RepKind::Main,
                &mut Dropout::off(),
            )
            .unwrap();
            let logits = classify(&mut g, store, m);
            let (_, _, mb) = encode_pair(
                &mut g,
                store,
                &cfg,
                &batch.premise,
                &batch.hypothesis,
                RepKind::Bow,
                &mut Dropout::off(),
            )
            .unwrap();
            let lb = mlp(&mut g, store, "bowhead", mb.node);
            let l1 = g.softmax_xent(logits, &labels, &[1.0, 1.0]);
            let l2 = g.softmax_xent(lb, &labels, &[1.0, 1.0]);
            let total = g.add(l1, l2);
            let v = g.scalar(total);
            (v, g.backward(total))
        };
        let (_, grads) = loss(&store);
        let eps = 1e-6;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let analytic = grads
                .param(id)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(store.value(id).dim()));
            let n = store.value(id).len();
            let cols = store.value(id).ncols();
            for idx in 0..n {
                let (r, c) = (idx / cols, idx % cols);
                let orig = store.value(id)[[r, c]];
                store.value_mut(id)[[r, c]] = orig + eps;
                let (lp, _) = loss(&store);
                store.value_mut(id)[[r, c]] = orig - eps;
                let (lm, _) = loss(&store);
                store.value_mut(id)[[r, c]] = orig;
                let numeric = (lp - lm) / (2.0 * eps);
                let a = analytic[[r, c]];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
                assert!(
                    rel <= 1e-4,
                    "{} [{r},{c}] analytic {a} numeric {numeric}",
                    store.name(id)
                );
            }
        }
    }
}
