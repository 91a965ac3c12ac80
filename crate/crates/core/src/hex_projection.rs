//! BoW-orthogonality head.
//!
//! The shared head `f` sees `[u_bow; u_main]` with one side zero-masked:
//! `F_A = f([u_bow; u_main])`, `F_P = f([0; u_main])`, `F_G = f([u_bow; 0])`.
//! Training fits `F_L = (I - F_G (F_G^T F_G)^-1 F_G^T) F_A`, the part of the
//! joint logits orthogonal (over the batch) to what the BoW branch explains,
//! plus a down-weighted loss on `F_G`. Predictions at test time use `F_P`.

use log::debug;
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::autograd::{invert, normalize_columns, Graph, NodeId};
use crate::encoders::{linear, register, register_zeros, N_CLASSES};
use crate::error::{Error, Result};
use crate::params::{Mat, ParamStore};

pub const HEAD_PREFIX: &str = "hex.f";
/// Gram matrices with an estimated condition number above this get a ridge.
pub const CONDITION_THRESHOLD: f64 = 1e12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HexConfig {
    pub loss_weight_l: f64,
    pub loss_weight_g: f64,
    /// The ridge added to an ill-conditioned `F_G^T F_G` is
    /// `ridge_scale * trace / 3`.
    pub ridge_scale: f64,
    pub normalize_bow: bool,
    pub normalize_main: bool,
    /// Freeze the word embeddings and the first BiLSTM layer.
    pub freeze_bottom: bool,
    /// Momentum of the running column statistics used at test time.
    pub running_momentum: f64,
    /// Assert `F_G^T F_L ~ 0` on every training batch.
    pub check_orthogonality: bool,
}

impl Default for HexConfig {
    fn default() -> Self {
        HexConfig {
            loss_weight_l: 1.0,
            loss_weight_g: 0.3,
            ridge_scale: 1e-6,
            normalize_bow: true,
            normalize_main: true,
            freeze_bottom: true,
            running_momentum: 0.1,
            check_orthogonality: false,
        }
    }
}

impl HexConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.loss_weight_l >= 0.0 && self.loss_weight_g >= 0.0) {
            return Err(Error::InvalidArgument("HEX loss weights must be >= 0".into()));
        }
        if !(self.ridge_scale > 0.0 && self.ridge_scale.is_finite()) {
            return Err(Error::InvalidArgument("ridge_scale must be positive".into()));
        }
        if !(self.running_momentum > 0.0 && self.running_momentum <= 1.0) {
            return Err(Error::InvalidArgument("running_momentum must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Standardizes each column over the batch; constant columns become zero.
pub fn column_normalize(u: &Mat) -> Result<Mat> {
    if u.nrows() < 2 {
        return Err(Error::InvalidArgument(
            "column normalization needs at least 2 rows".into(),
        ));
    }
    Ok(normalize_columns(u).0)
}

fn frobenius(m: &Mat) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Decides whether `gram` needs a ridge. Returns `None` when it is safely
/// invertible, else the ridge to add (`ridge_eps`, or a scale-aware default
/// when that is zero).
fn ridge_for(gram: &Mat, ridge_eps: f64) -> Option<f64> {
    if let Some(inv) = invert(gram) {
        let cond = frobenius(gram) * frobenius(&inv);
        if cond.is_finite() && cond <= CONDITION_THRESHOLD {
            return None;
        }
    }
    let trace: f64 = gram.diag().sum();
    let eps = if ridge_eps > 0.0 {
        ridge_eps
    } else {
        1e-6 * trace / gram.nrows() as f64
    };
    // An all-zero F_G spans nothing; any positive ridge projects onto {0}.
    Some(if eps > 0.0 { eps } else { 1.0 })
}

/// Scale-aware ridge `scale * trace(F_G^T F_G) / k`.
pub fn default_ridge(f_g: &Mat, scale: f64) -> f64 {
    let trace: f64 = f_g.iter().map(|v| v * v).sum();
    scale * trace / f_g.ncols().max(1) as f64
}

pub struct Projection {
    pub f_l: Mat,
    /// Ridge that was added, if the Gram matrix was ill-conditioned.
    pub ridge: Option<f64>,
}

/// `F_L = (I - F_G (F_G^T F_G)^-1 F_G^T) F_A`, with `ridge_eps * I` added to
/// the Gram matrix only when it is singular or badly conditioned.
pub fn orthogonal_project(f_a: &Mat, f_g: &Mat, ridge_eps: f64) -> Result<Mat> {
    Ok(project_detailed(f_a, f_g, ridge_eps)?.f_l)
}

pub fn project_detailed(f_a: &Mat, f_g: &Mat, ridge_eps: f64) -> Result<Projection> {
    if f_a.nrows() != f_g.nrows() {
        return Err(Error::Shape(format!(
            "F_A has {} rows but F_G has {}",
            f_a.nrows(),
            f_g.nrows()
        )));
    }
    let mut gram = f_g.t().dot(f_g);
    let ridge = ridge_for(&gram, ridge_eps);
    if let Some(eps) = ridge {
        debug!("HEX projection: ridge {eps:e} added to an ill-conditioned Gram matrix");
        for i in 0..gram.nrows() {
            gram[[i, i]] += eps;
        }
    }
    let inv = invert(&gram).ok_or_else(|| Error::Shape("Gram matrix not invertible even with ridge".into()))?;
    let coef = inv.dot(&f_g.t().dot(f_a));
    Ok(Projection {
        f_l: f_a - &f_g.dot(&coef),
        ridge,
    })
}

/// Graph version of [`orthogonal_project`]; the ridge decision is made on
/// the current values with `ridge_scale * trace / k`.
pub fn project_graph(g: &mut Graph, f_a: NodeId, f_g: NodeId, ridge_scale: f64) -> NodeId {
    let fg_t = g.transpose(f_g);
    let gram = g.matmul(fg_t, f_g);
    let eps = default_ridge(g.value(f_g), ridge_scale);
    let gram = match ridge_for(g.value(gram), eps) {
        Some(eps) => {
            debug!("HEX projection: ridge {eps:e} added to an ill-conditioned Gram matrix");
            g.add_scaled_identity(gram, eps)
        }
        None => gram,
    };
    let inv = g.inverse(gram);
    let cross = g.matmul(fg_t, f_a);
    let coef = g.matmul(inv, cross);
    let explained = g.matmul(f_g, coef);
    g.sub(f_a, explained)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HexMode {
    Train,
    Test,
}

/// The four logit matrices plus the ones used for the current mode.
#[derive(Clone, Debug, PartialEq)]
pub struct HexOutputs {
    pub f_a: Mat,
    pub f_p: Mat,
    pub f_g: Mat,
    pub f_l: Mat,
    /// `F_L` in training mode, `F_P` in test mode.
    pub logits: Mat,
}

/// Plain-matrix forward pass of the head `f(x) = x W + b`, where `W` has
/// `u_bow` rows first. Inputs are used as given (normalize beforehand).
pub fn hex_forward(u_bow: &Mat, u_main: &Mat, w: &Mat, b: &Mat, mode: HexMode, ridge_scale: f64) -> Result<HexOutputs> {
    let (db, dm) = (u_bow.ncols(), u_main.ncols());
    if w.nrows() != db + dm || u_bow.nrows() != u_main.nrows() || b.dim() != (1, w.ncols()) {
        return Err(Error::Shape(format!(
            "head expects {} input columns, got {db} + {dm}",
            w.nrows()
        )));
    }
    let w_bow = w.slice(s![..db, ..]);
    let w_main = w.slice(s![db.., ..]);
    let f_p = u_main.dot(&w_main) + b;
    let f_g = u_bow.dot(&w_bow) + b;
    let f_a = u_bow.dot(&w_bow) + u_main.dot(&w_main) + b;
    let f_l = orthogonal_project(&f_a, &f_g, default_ridge(&f_g, ridge_scale))?;
    let logits = match mode {
        HexMode::Train => f_l.clone(),
        HexMode::Test => f_p.clone(),
    };
    Ok(HexOutputs {
        f_a,
        f_p,
        f_g,
        f_l,
        logits,
    })
}

/// Registers the head `f` (`hex.f.w`, `hex.f.b`).
pub fn register_head(store: &mut ParamStore, seed: u64, d_bow: usize, d_main: usize) {
    register(store, seed, &format!("{HEAD_PREFIX}.w"), d_bow + d_main, N_CLASSES);
    register_zeros(store, &format!("{HEAD_PREFIX}.b"), 1, N_CLASSES);
}

#[derive(Clone, Copy, Debug)]
pub struct HexNodes {
    pub f_a: NodeId,
    pub f_p: NodeId,
    pub f_g: NodeId,
    pub f_l: NodeId,
}

/// Training-mode graph: all four outputs through the shared head.
pub fn hex_graph(g: &mut Graph, store: &ParamStore, u_bow: NodeId, u_main: NodeId, cfg: &HexConfig) -> HexNodes {
    let n = g.value(u_bow).nrows();
    let zeros_bow = g.constant(Array2::zeros((n, g.value(u_bow).ncols())));
    let zeros_main = g.constant(Array2::zeros((n, g.value(u_main).ncols())));
    let joint = g.concat_cols(&[u_bow, u_main]);
    let main_only = g.concat_cols(&[zeros_bow, u_main]);
    let bow_only = g.concat_cols(&[u_bow, zeros_main]);
    let f_a = linear(g, store, HEAD_PREFIX, joint);
    let f_p = linear(g, store, HEAD_PREFIX, main_only);
    let f_g = linear(g, store, HEAD_PREFIX, bow_only);
    let f_l = project_graph(g, f_a, f_g, cfg.ridge_scale);
    if cfg.check_orthogonality {
        let fg = g.value(f_g);
        let fl = g.value(f_l);
        let worst = fg.t().dot(fl).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let bound = 1e-6 * frobenius(fg) * frobenius(g.value(f_a)) + 1e-9;
        assert!(worst <= bound, "HEX orthogonality violated: {worst:e} > {bound:e}");
    }
    HexNodes { f_a, f_p, f_g, f_l }
}

/// Test-mode logits `F_P = f([0; u_main])`.
pub fn hex_predict_graph(g: &mut Graph, store: &ParamStore, u_main: NodeId, d_bow: usize) -> NodeId {
    let n = g.value(u_main).nrows();
    let zeros = g.constant(Array2::zeros((n, d_bow)));
    let x = g.concat_cols(&[zeros, u_main]);
    linear(g, store, HEAD_PREFIX, x)
}

/// `w_L * mean CE(F_L) + w_G * mean CE(F_G)`, with the two parts.
pub fn hex_loss(g: &mut Graph, nodes: &HexNodes, labels: &[usize], cfg: &HexConfig) -> (NodeId, NodeId, NodeId) {
    let w = vec![1.0 / labels.len() as f64; labels.len()];
    let l_l = g.softmax_xent(nodes.f_l, labels, &w);
    let l_g = g.softmax_xent(nodes.f_g, labels, &w);
    let a = g.scale(l_l, cfg.loss_weight_l);
    let b = g.scale(l_g, cfg.loss_weight_g);
    (g.add(a, b), l_l, l_g)
}
