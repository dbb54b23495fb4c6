//! Projection head, set-level similarity, InfoNCE, and the dictionary
//! utilization regularizer.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which encodings feed the batch-mean relevance of the regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegSource {
    /// Anchor and target encodings (two per user).
    Both,
    /// Anchor encodings only (one per user).
    Anchors,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub beta: f64,
    pub gamma: f64,
    pub reg_source: RegSource,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.1,
            beta: 1.0,
            gamma: 1.0,
            reg_source: RegSource::Both,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::config(format!("temperature must be positive, got {}", self.tau)));
        }
        if !(self.beta >= 0.0) || !(self.gamma >= 0.0) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// How two representation sets are scored against each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetScore {
    /// Sum over anchor vectors of the best cosine match in the target set.
    BestMatch,
    /// Cosine of the concatenated vectors.
    Concat,
}

/// `h = W2 relu(W1 v)` applied to every row of `v`.
pub fn project(g: &mut Graph, w1: Var, w2: Var, v: Var) -> Var {
    let hidden = g.matmul(v, w1);
    let act = g.relu(hidden);
    g.matmul(act, w2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub w1: Tensor,
    pub w2: Tensor,
}

impl ProjectionHead {
    pub fn apply(&self, v: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let w1 = g.constant(self.w1.clone());
        let w2 = g.constant(self.w2.clone());
        let x = g.constant(v.clone());
        let h = project(&mut g, w1, w2, x);
        g.value(h).clone()
    }
}

/// `sum_i max_j cos(a_i, b_j)` for one pair of sets. The first argument is
/// the anchor; the measure is not symmetric.
pub fn set_similarity(g: &mut Graph, a: Var, b: Var) -> Var {
    let an = g.normalize_rows(a);
    let bn = g.normalize_rows(b);
    let bt = g.transpose(bn);
    let cos = g.matmul(an, bt);
    let best = g.max_axis(cos, 1);
    g.sum(best)
}

/// All-pairs set similarity for a batch. `anchors` and `targets` stack `B`
/// sets of `k` rows each; entry `(u, b)` of the `B x B` result is the
/// similarity of anchor set `u` against target set `b`.
pub fn similarity_matrix(g: &mut Graph, anchors: Var, targets: Var, k: usize) -> Var {
    let rows = g.shape(anchors)[0];
    assert_eq!(rows % k, 0, "anchor rows not a multiple of k");
    assert_eq!(g.shape(targets)[0], rows, "anchor and target batches differ");
    let b = rows / k;
    let an = g.normalize_rows(anchors);
    let tn = g.normalize_rows(targets);
    let tt = g.transpose(tn);
    // row (u, i), column (b, j)
    let cos = g.matmul(an, tt);
    let per_target = g.reshape(cos, rows * b, k);
    let best = g.max_axis(per_target, 1);
    let best = g.reshape(best, rows, b);
    let mut group = Tensor::zeros(b, rows);
    for u in 0..b {
        for i in 0..k {
            group.set(u, u * k + i, 1.0);
        }
    }
    let group = g.constant(group);
    g.matmul(group, best)
}

/// Cosine between the flattened `k`-vector sets.
pub fn concat_similarity_matrix(g: &mut Graph, anchors: Var, targets: Var, k: usize) -> Var {
    let [rows, d] = g.shape(anchors);
    assert_eq!(rows % k, 0, "anchor rows not a multiple of k");
    let b = rows / k;
    let a = g.reshape(anchors, b, k * d);
    let t = g.reshape(targets, b, k * d);
    let an = g.normalize_rows(a);
    let tn = g.normalize_rows(t);
    let tt = g.transpose(tn);
    g.matmul(an, tt)
}

pub fn score_matrix(g: &mut Graph, score: SetScore, anchors: Var, targets: Var, k: usize) -> Var {
    match score {
        SetScore::BestMatch => similarity_matrix(g, anchors, targets, k),
        SetScore::Concat => concat_similarity_matrix(g, anchors, targets, k),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct InfoNce {
    /// Sum of the per-anchor terms.
    pub total: Var,
    /// `B x 1` per-anchor terms.
    pub per_anchor: Var,
}

/// Cross-view InfoNCE over a `B x B` similarity matrix whose diagonal holds
/// the positive pairs. The softmax denominator runs over every target in
/// the batch, the positive included.
pub fn info_nce(g: &mut Graph, sim: Var, tau: f64) -> Result<InfoNce> {
    let [b, c] = g.shape(sim);
    if b != c {
        return Err(Error::contract(format!("similarity matrix must be square, got {b}x{c}")));
    }
    if b < 2 {
        return Err(Error::config("InfoNCE needs a batch of at least 2 (no negatives otherwise)"));
    }
    if !(tau > 0.0) {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    let logits = g.scale(sim, 1.0 / tau);
    let log_prob = g.log_softmax(logits, 1);
    let eye = g.constant(Tensor::identity(b));
    let diag = g.mul(log_prob, eye);
    let pos = g.sum_axis(diag, 1);
    let per_anchor = g.scale(pos, -1.0);
    let total = g.sum(per_anchor);
    Ok(InfoNce { total, per_anchor })
}

/// Squared deviation of the batch-mean relevances from their average.
/// `relevance` stacks one `1 x M` row per encoded set.
pub fn interest_regularizer(g: &mut Graph, relevance: Var) -> Var {
    let mean_p = g.mean_axis(relevance, 0);
    let centre = g.mean_axis(mean_p, 1);
    let dev = g.sub(mean_p, centre);
    let sq = g.mul(dev, dev);
    g.sum(sq)
}

/// `beta * contrastive + gamma * reg`. Without a regularizer term the
/// result is `beta * contrastive`.
pub fn total_loss(g: &mut Graph, contrastive: Var, reg: Option<Var>, cfg: &LossConfig) -> Var {
    let c = g.scale(contrastive, cfg.beta);
    match reg {
        Some(r) => {
            let r = g.scale(r, cfg.gamma);
            g.add(c, r)
        }
        None => c,
    }
}

pub fn set_similarity_value(a: &Tensor, b: &Tensor) -> f64 {
    let mut g = Graph::new();
    let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
    let s = set_similarity(&mut g, x, y);
    g.value(s).item()
}

pub fn concat_similarity_value(a: &Tensor, b: &Tensor) -> f64 {
    crate::tensor::cosine(a.data(), b.data())
}

/// Total and per-anchor InfoNCE for a fixed similarity matrix.
pub fn info_nce_value(sim: &Tensor, tau: f64) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let s = g.constant(sim.clone());
    let out = info_nce(&mut g, s, tau)?;
    Ok((g.value(out.total).item(), g.value(out.per_anchor).data().to_vec()))
}

pub fn interest_regularizer_value(relevance: &Tensor) -> f64 {
    let mut g = Graph::new();
    let p = g.constant(relevance.clone());
    let r = interest_regularizer(&mut g, p);
    g.value(r).item()
}
