//! LIME-style local explanations for one premise/hypothesis pair.
//!
//! Perturbations drop tokens (replacing them with the unknown token); a
//! kernel-weighted ridge regression from token presence to the target-class
//! probability gives one signed weight per token.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autograd::invert;
use crate::corpus::{Label, PairExample, UNK_TOKEN};
use crate::error::{Error, Result};
use crate::hex_projection::CONDITION_THRESHOLD;
use crate::model::Model;
use crate::params::{fnv1a, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Premise,
    Hypothesis,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Premise => "premise",
            Side::Hypothesis => "hypothesis",
        }
    }
}

/// Anything that maps pairs to class probabilities.
pub trait PairScorer {
    fn class_probabilities(&self, examples: &[PairExample]) -> Result<Vec<[f64; 3]>>;
}

impl PairScorer for Model {
    fn class_probabilities(&self, examples: &[PairExample]) -> Result<Vec<[f64; 3]>> {
        let refs: Vec<&PairExample> = examples.iter().collect();
        self.probabilities(&refs, 256)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub n_samples: usize,
    pub top_k: usize,
    pub ridge: f64,
    /// Kernel width is `kernel_width_scale * sqrt(l_a + l_b)`.
    pub kernel_width_scale: f64,
    pub seed: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            n_samples: 1000,
            top_k: 6,
            ridge: 1e-3,
            kernel_width_scale: 0.75,
            seed: 0,
        }
    }
}

impl ExplainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.top_k == 0 {
            return Err(Error::InvalidArgument("n_samples and top_k must be at least 1".into()));
        }
        if !(self.ridge > 0.0 && self.kernel_width_scale > 0.0) {
            return Err(Error::InvalidArgument("ridge and kernel width must be positive".into()));
        }
        Ok(())
    }
}

/// One token position of the pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSlot {
    pub side: Side,
    pub position: usize,
    pub token: String,
}

/// Premise tokens first, then hypothesis tokens.
pub fn token_slots(example: &PairExample) -> Vec<TokenSlot> {
    let side = |s: Side, toks: &[String]| {
        toks.iter()
            .enumerate()
            .map(|(position, token)| TokenSlot {
                side: s,
                position,
                token: token.clone(),
            })
            .collect::<Vec<_>>()
    };
    let mut slots = side(Side::Premise, &example.premise);
    slots.extend(side(Side::Hypothesis, &example.hypothesis));
    slots
}

#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub example: PairExample,
    /// One flag per token slot, `true` when kept.
    pub presence: Vec<bool>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Keep/drop draw for one token. Keyed by the token string and its occurrence
/// index within its side rather than by position, so reordering a sentence
/// reorders the draws with it.
fn keep(seed: u64, sample: usize, side: Side, token: &str, occurrence: usize) -> bool {
    let mut h = splitmix(seed ^ fnv1a(token.as_bytes()));
    h = splitmix(h ^ sample as u64);
    h = splitmix(h ^ ((side as u64) << 32 | occurrence as u64));
    h >> 63 == 0
}

/// `n_samples` perturbations; the first keeps every token, the others drop
/// each token independently with probability 1/2.
pub fn perturb(example: &PairExample, n_samples: usize, seed: u64) -> Result<Vec<Perturbation>> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    let slots = token_slots(example);
    let mut occurrence = Vec::with_capacity(slots.len());
    for (i, s) in slots.iter().enumerate() {
        let before = slots[..i]
            .iter()
            .filter(|o| o.side == s.side && o.token == s.token)
            .count();
        occurrence.push(before);
    }
    let out = (0..n_samples)
        .map(|sample| {
            let presence: Vec<bool> = slots
                .iter()
                .zip(&occurrence)
                .map(|(s, &k)| sample == 0 || keep(seed, sample, s.side, &s.token, k))
                .collect();
            let mask = |side: Side, toks: &[String]| -> Vec<String> {
                toks.iter()
                    .enumerate()
                    .map(|(pos, t)| {
                        let idx = slots
                            .iter()
                            .position(|s| s.side == side && s.position == pos)
                            .expect("slot exists");
                        if presence[idx] {
                            t.clone()
                        } else {
                            UNK_TOKEN.to_string()
                        }
                    })
                    .collect()
            };
            let mut ex = example.clone();
            ex.premise = mask(Side::Premise, &example.premise);
            ex.hypothesis = mask(Side::Hypothesis, &example.hypothesis);
            Perturbation { example: ex, presence }
        })
        .collect();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub token: String,
    pub side: Side,
    pub position: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub example_id: String,
    pub target_class: Label,
    /// Target-class probability on the unperturbed pair.
    pub probability: f64,
    pub intercept: f64,
    /// Top-k features by |weight|, descending.
    pub features: Vec<Feature>,
    /// Weights of every token slot, in slot order.
    pub all_weights: Vec<f64>,
    pub n_samples: usize,
    pub ridge: f64,
    /// Set when the default ridge left the system ill-conditioned and a
    /// stronger one was used.
    pub ridge_escalated: bool,
}

/// Weighted ridge regression with an unpenalized intercept. Returns
/// `(coefficients, intercept, ridge used, escalated)`.
pub fn weighted_ridge(x: &Mat, y: &[f64], w: &[f64], ridge: f64) -> Result<(Vec<f64>, f64, f64, bool)> {
    let (n, p) = x.dim();
    if y.len() != n || w.len() != n || n == 0 {
        return Err(Error::Shape("weighted_ridge: row counts differ".into()));
    }
    let total: f64 = w.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::InvalidArgument("kernel weights sum to zero".into()));
    }
    let x_mean: Vec<f64> = (0..p)
        .map(|j| (0..n).map(|i| w[i] * x[[i, j]]).sum::<f64>() / total)
        .collect();
    let y_mean = (0..n).map(|i| w[i] * y[i]).sum::<f64>() / total;
    let mut gram = Mat::zeros((p, p));
    let mut rhs = vec![0.0; p];
    for i in 0..n {
        let xc: Vec<f64> = (0..p).map(|j| x[[i, j]] - x_mean[j]).collect();
        let yc = y[i] - y_mean;
        for a in 0..p {
            if xc[a] == 0.0 {
                continue;
            }
            rhs[a] += w[i] * xc[a] * yc;
            for b in 0..p {
                gram[[a, b]] += w[i] * xc[a] * xc[b];
            }
        }
    }
    let mut lambda = ridge;
    let mut escalated = false;
    for _ in 0..12 {
        let mut a = gram.clone();
        for j in 0..p {
            a[[j, j]] += lambda;
        }
        if let Some(inv) = invert(&a) {
            let norm = |m: &Mat| m.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cond = norm(&a) * norm(&inv);
            if cond.is_finite() && cond <= CONDITION_THRESHOLD {
                let beta: Vec<f64> = (0..p).map(|r| (0..p).map(|c| inv[[r, c]] * rhs[c]).sum()).collect();
                if beta.iter().all(|b| b.is_finite()) {
                    let intercept = y_mean - beta.iter().zip(&x_mean).map(|(b, m)| b * m).sum::<f64>();
                    return Ok((beta, intercept, lambda, escalated));
                }
            }
        }
        // jump straight to a scale-aware floor before growing geometrically
        let trace = (0..p).map(|j| gram[[j, j]]).sum::<f64>() / p.max(1) as f64;
        lambda = (lambda * 10.0).max(trace * 1e-10);
        escalated = true;
    }
    Err(Error::Numerical("ridge regression stayed degenerate".into()))
}

/// Explains `target` for one pair by fitting a local linear surrogate.
pub fn lime_explain(
    scorer: &impl PairScorer,
    example: &PairExample,
    target: Label,
    cfg: &ExplainConfig,
) -> Result<Explanation> {
    cfg.validate()?;
    let slots = token_slots(example);
    if slots.is_empty() {
        return Err(Error::InvalidArgument(format!("pair {} has no tokens", example.id)));
    }
    let samples = perturb(example, cfg.n_samples, cfg.seed)?;
    let masked: Vec<PairExample> = samples.iter().map(|s| s.example.clone()).collect();
    let probs = scorer.class_probabilities(&masked)?;
    let y: Vec<f64> = probs.iter().map(|p| p[target.index()]).collect();
    let p = slots.len();
    let width = cfg.kernel_width_scale * (p as f64).sqrt();
    let mut x = Mat::zeros((samples.len(), p));
    let mut w = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let dropped = s.presence.iter().filter(|&&k| !k).count() as f64;
        for (j, &k) in s.presence.iter().enumerate() {
            x[[i, j]] = k as u8 as f64;
        }
        w.push((-dropped / (width * width)).exp());
    }
    let (beta, intercept, ridge, ridge_escalated) = weighted_ridge(&x, &y, &w, cfg.ridge)?;
    if ridge_escalated {
        log::warn!("explanation for {}: ridge escalated to {ridge:e}", example.id);
    }
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| beta[b].abs().total_cmp(&beta[a].abs()).then(a.cmp(&b)));
    let features = order
        .iter()
        .take(cfg.top_k)
        .map(|&j| Feature {
            token: slots[j].token.clone(),
            side: slots[j].side,
            position: slots[j].position,
            weight: beta[j],
        })
        .collect();
    Ok(Explanation {
        example_id: example.id.clone(),
        target_class: target,
        probability: y[0],
        intercept,
        features,
        all_weights: beta,
        n_samples: cfg.n_samples,
        ridge,
        ridge_escalated,
    })
}

/// Plain-text bar chart, one line per feature.
pub fn render_bars(e: &Explanation, width: usize) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} -> {} (p = {:.3})", e.example_id, e.target_class, e.probability);
    let max = e.features.iter().map(|f| f.weight.abs()).fold(0.0, f64::max);
    let token_w = e.features.iter().map(|f| f.token.chars().count()).max().unwrap_or(0);
    for f in &e.features {
        let n = if max > 0.0 {
            ((f.weight.abs() / max) * width as f64).round() as usize
        } else {
            0
        };
        let bar = if f.weight >= 0.0 { "+".repeat(n) } else { "-".repeat(n) };
        let _ = writeln!(
            out,
            "{:<10} {:<tw$} {:>+9.4} {}",
            f.side.as_str(),
            f.token,
            f.weight,
            bar,
            tw = token_w
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    /// Target probability is linear in token presence; class 0 is the target.
    struct Linear(HashMap<String, f64>, f64);

    impl PairScorer for Linear {
        fn class_probabilities(&self, examples: &[PairExample]) -> Result<Vec<[f64; 3]>> {
            Ok(examples
                .iter()
                .map(|e| {
                    let p = self.1
                        + e.premise
                            .iter()
                            .chain(&e.hypothesis)
                            .map(|t| self.0.get(t).copied().unwrap_or(0.0))
                            .sum::<f64>();
                    [p, (1.0 - p) / 2.0, (1.0 - p) / 2.0]
                })
                .collect())
        }
    }

    fn pair() -> PairExample {
        PairExample::new(
            "x",
            "the cat sat on the mat",
            "the cat did not sit",
            Label::Contradiction,
        )
    }

    #[test]
    fn perturbations_are_deterministic_and_include_original() {
        let ex = pair();
        let a = perturb(&ex, 50, 7).unwrap();
        assert_eq!(a, perturb(&ex, 50, 7).unwrap());
        assert_ne!(a, perturb(&ex, 50, 8).unwrap());
        assert!(a[0].presence.iter().all(|&k| k));
        assert_eq!(a[0].example, ex);
        assert!(a.iter().all(|s| s.presence.len() == 11));
        let dropped = a.iter().flat_map(|s| &s.presence).filter(|&&k| !k).count();
        let rate = dropped as f64 / (49.0 * 11.0);
        assert!((rate - 0.5).abs() < 0.1, "{rate}");
        let s = &a[3];
        for (slot, &k) in token_slots(&ex).iter().zip(&s.presence) {
            let toks = if slot.side == Side::Premise {
                &s.example.premise
            } else {
                &s.example.hypothesis
            };
            assert_eq!(toks[slot.position] == UNK_TOKEN, !k);
        }
        assert!(perturb(&ex, 0, 0).is_err());
    }

    #[test]
    fn recovers_linear_weights_and_zero_for_inert_tokens() {
        let weights: HashMap<String, f64> = [("not", 0.3), ("sit", -0.1), ("mat", 0.05)]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        let scorer = Linear(weights, 0.3);
        let e = lime_explain(&scorer, &pair(), Label::Entailment, &ExplainConfig::default()).unwrap();
        assert_eq!(e.features.len(), 6);
        assert_eq!(e.features[0].token, "not");
        assert!((e.features[0].weight - 0.3).abs() < 1e-3);
        assert_eq!(e.features[1].token, "sit");
        assert!(!e.ridge_escalated);
        let slots = token_slots(&pair());
        for (s, w) in slots.iter().zip(&e.all_weights) {
            if !["not", "sit", "mat"].contains(&s.token.as_str()) {
                assert!(w.abs() <= 1e-3, "{} {w}", s.token);
            }
        }
        assert!(e.features.windows(2).all(|w| w[0].weight.abs() >= w[1].weight.abs()));
        let text = render_bars(&e, 20);
        assert!(text.lines().nth(1).unwrap().contains("not"));
    }

    #[test]
    fn constant_scorer_gives_zero_weights() {
        let scorer = Linear(HashMap::new(), 0.4);
        let e = lime_explain(
            &scorer,
            &pair(),
            Label::Entailment,
            &ExplainConfig {
                n_samples: 200,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(e.all_weights.iter().all(|w| w.abs() <= 1e-9));
        assert!((e.intercept - 0.4).abs() < 1e-9);
    }

    #[test]
    fn ridge_escalates_on_degenerate_design() {
        // two identical columns and a zero ridge cannot be inverted
        let x = Mat::from_shape_fn((6, 2), |(i, _)| (i % 2) as f64);
        let y = [0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let (beta, _, ridge, escalated) = weighted_ridge(&x, &y, &[1.0; 6], 1e-300).unwrap();
        assert!(escalated && ridge > 1e-300);
        assert!((beta[0] + beta[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn weight_mass_is_order_invariant_for_order_blind_scorers() {
        let weights: HashMap<String, f64> = [("not", 0.3), ("cat", 0.1)]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        let scorer = Linear(weights, 0.2);
        let ex = pair();
        let mut shuffled = ex.clone();
        shuffled.hypothesis.reverse();
        shuffled.premise.rotate_left(2);
        let cfg = ExplainConfig {
            n_samples: 300,
            ..Default::default()
        };
        let a = lime_explain(&scorer, &ex, Label::Entailment, &cfg).unwrap();
        let b = lime_explain(&scorer, &shuffled, Label::Entailment, &cfg).unwrap();
        let mass = |e: &Explanation| e.all_weights.iter().map(|w| w.abs()).sum::<f64>();
        assert!((mass(&a) - mass(&b)).abs() < 1e-9);
    }
}
