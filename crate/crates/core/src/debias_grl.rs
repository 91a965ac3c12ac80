//! Embedding-level debiasing through gradient reversal.
//!
//! A small debias MLP predicts the label from each word vector (optionally
//! conditioned on the other sentence's representation) or from a single
//! sentence representation. Its inputs pass through a gradient-reversal node,
//! so the debias network descends on its loss while the shared embeddings and
//! encoder ascend on it:
//!
//! `L = L_c - lambda / (l_a + l_b) * L_ed`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::corpus::SideBatch;
use crate::encoders::{mlp, register_mlp, EncoderConfig, N_CLASSES};
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const DEBIAS_PREFIX: &str = "debias";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DebiasVariant {
    /// Word vector plus the other sentence's representation.
    #[default]
    Full,
    /// Word vector only.
    Basic,
    /// One sentence representation only.
    Sent,
}

impl DebiasVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            DebiasVariant::Full => "full",
            DebiasVariant::Basic => "basic",
            DebiasVariant::Sent => "sent",
        }
    }

    /// Width of the debias network's input.
    pub fn input_width(self, cfg: &EncoderConfig) -> usize {
        match self {
            DebiasVariant::Full => cfg.d_e + cfg.d_rep_main(),
            DebiasVariant::Basic => cfg.d_e,
            DebiasVariant::Sent => cfg.d_rep_main(),
        }
    }
}

impl fmt::Display for DebiasVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DebiasVariant {
    type Err = Error;

    /// Accepts the short names and the alternative names
    /// (`emb_cond`, `emb_basic`, `sgl_sent`/`ind_sent`).
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" | "emb_cond" => Ok(DebiasVariant::Full),
            "basic" | "emb_basic" => Ok(DebiasVariant::Basic),
            "sent" | "sgl_sent" | "ind_sent" => Ok(DebiasVariant::Sent),
            other => Err(Error::InvalidArgument(format!("unknown debias variant {other:?}"))),
        }
    }
}

/// Serialized as the bare `lambda` value of [`GrlConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GrlLossConfig {
    /// Multitask coefficient.
    pub lambda: f64,
}

impl Default for GrlLossConfig {
    fn default() -> Self {
        GrlLossConfig { lambda: 1.0 }
    }
}

impl GrlLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.is_finite() && self.lambda >= 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrlConfig {
    pub variant: DebiasVariant,
    #[serde(rename = "lambda")]
    pub loss: GrlLossConfig,
}

impl GrlConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()
    }
}

/// Registers the debias MLP (`debias.*`).
pub fn register_debias_net(store: &mut ParamStore, cfg: &EncoderConfig, variant: DebiasVariant, seed: u64) {
    register_mlp(
        store,
        seed,
        DEBIAS_PREFIX,
        variant.input_width(cfg),
        cfg.d_mlp,
        N_CLASSES,
    );
}

/// Debias-network logits from gradient-reversed inputs.
///
/// `token_vectors` holds one word vector per row; `sentence_reps` holds the
/// matching other-sentence representation for FULL, or the sentence
/// representation itself for SENT. Inputs a variant does not use are ignored.
pub fn debias_logits(
    g: &mut Graph,
    store: &ParamStore,
    variant: DebiasVariant,
    token_vectors: Option<NodeId>,
    sentence_reps: Option<NodeId>,
    lambda: f64,
) -> Result<NodeId> {
    let missing = |what: &str| Error::InvalidArgument(format!("{variant} debias network needs {what}"));
    let input = match variant {
        DebiasVariant::Basic => {
            let tok = token_vectors.ok_or_else(|| missing("token vectors"))?;
            g.grad_reverse(tok, lambda)
        }
        DebiasVariant::Sent => {
            let sent = sentence_reps.ok_or_else(|| missing("a sentence representation"))?;
            g.grad_reverse(sent, lambda)
        }
        DebiasVariant::Full => {
            let tok = token_vectors.ok_or_else(|| missing("token vectors"))?;
            let sent = sentence_reps.ok_or_else(|| missing("the other sentence's representation"))?;
            if g.value(tok).nrows() != g.value(sent).nrows() {
                return Err(Error::Shape("token and sentence rows differ".into()));
            }
            let joined = g.concat_cols(&[tok, sent]);
            g.grad_reverse(joined, lambda)
        }
    };
    Ok(mlp(g, store, DEBIAS_PREFIX, input))
}

/// The batch's debias loss node, already divided per example by the number
/// of terms (`l_a + l_b` tokens, or 2 sentences for SENT) and averaged over
/// the batch.
pub struct DebiasTerm {
    pub loss: NodeId,
    /// Number of rows fed to the debias network.
    pub n_terms: usize,
}

/// Builds the debias loss for a batch. `h1`/`h2` are main-encoder premise and
/// hypothesis representations (`n x 2 d_h`).
#[allow(clippy::too_many_arguments)]
pub fn debias_term(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &GrlConfig,
    premise: &SideBatch,
    hypothesis: &SideBatch,
    h1: NodeId,
    h2: NodeId,
    labels: &[usize],
) -> Result<DebiasTerm> {
    let n = labels.len();
    if premise.len() != n || hypothesis.len() != n {
        return Err(Error::Shape("batch sides and labels differ in length".into()));
    }
    let lambda = cfg.loss.lambda;
    let (logits, row_labels, weights) = match cfg.variant {
        DebiasVariant::Sent => {
            let both = g.concat_rows(&[h1, h2]);
            let logits = debias_logits(g, store, DebiasVariant::Sent, None, Some(both), lambda)?;
            let row_labels: Vec<usize> = labels.iter().chain(labels).copied().collect();
            let w = 1.0 / (2.0 * n as f64);
            (logits, row_labels, vec![w; 2 * n])
        }
        variant => {
            let mut ids = Vec::new();
            let mut ctx = Vec::new();
            let mut row_labels = Vec::new();
            let mut weights = Vec::new();
            for (j, &y) in labels.iter().enumerate() {
                let (la, lb) = (premise.lengths[j], hypothesis.lengths[j]);
                if la == 0 || lb == 0 {
                    return Err(Error::EmptySequence { index: j });
                }
                let w = 1.0 / (n as f64 * (la + lb) as f64);
                // premise tokens see the hypothesis (row j of [h2; h1]) and
                // hypothesis tokens see the premise (row n + j)
                for (side, other) in [(premise, j), (hypothesis, n + j)] {
                    for &tok in &side.indices[j][..side.lengths[j]] {
                        ids.push(tok);
                        ctx.push(other);
                        row_labels.push(y);
                        weights.push(w);
                    }
                }
            }
            let emb = g.param(store.expect("emb"));
            let tokens = g.gather_rows(emb, ids);
            let sent = if variant == DebiasVariant::Full {
                let table = g.concat_rows(&[h2, h1]);
                Some(g.gather_rows(table, ctx))
            } else {
                None
            };
            let logits = debias_logits(g, store, variant, Some(tokens), sent, lambda)?;
            (logits, row_labels, weights)
        }
    };
    let n_terms = row_labels.len();
    let loss = g.softmax_xent(logits, &row_labels, &weights);
    Ok(DebiasTerm { loss, n_terms })
}

/// `L_c - lambda / (l_a + l_b) * sum(per_token_losses)` for one example.
pub fn total_loss(l_c: f64, per_token_losses: &[f64], lambda: f64, l_a: usize, l_b: usize) -> Result<f64> {
    if l_a == 0 || l_b == 0 {
        return Err(Error::InvalidArgument("sentence lengths must be at least 1".into()));
    }
    let l_ed: f64 = per_token_losses.iter().sum();
    Ok(l_c - lambda * token_scale(l_a, l_b) * l_ed)
}

/// Per-token scaling factor `1 / (l_a + l_b)`.
pub fn token_scale(l_a: usize, l_b: usize) -> f64 {
    1.0 / (l_a + l_b) as f64
}
