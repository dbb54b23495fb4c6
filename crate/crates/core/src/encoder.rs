//! Interest-dictionary encoder.
//!
//! A behavior set `S` becomes `K` vectors:
//!
//! 1. each behavior embeds to the mean of its token rows;
//! 2. every dictionary row is scored against every behavior by cosine, and
//!    the scores are summed per row (`P`);
//! 3. the `K` rows with the largest `P` are selected (a hard, non-differentiable choice);
//! 4. each selected row attends over the behaviors with a softmax of raw dot
//!    products, and the attention-weighted behavior mean is one output vector.
//!
//! Step 2 uses cosine while step 4 uses unnormalized dot products; both are
//! kept as is. Everything is order-insensitive in the behaviors.

use std::ops::Range;

use crate::autograd::{Graph, Var};
use crate::data::Behavior;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Output of encoding one behavior set.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodeResult {
    /// `K x D` interest-oriented representations.
    pub v: Tensor,
    /// Selected dictionary rows, strongest first. Empty for pooling encoders.
    pub selected: Vec<usize>,
    /// Accumulated relevance per dictionary row. Empty for pooling encoders.
    pub relevance: Vec<f64>,
    /// `K x |S|` attention weights, when the encoder attends.
    pub attention: Option<Tensor>,
}

/// Graph handles for one encoded set.
#[derive(Debug, Clone)]
pub struct SetEncoding {
    pub v: Var,
    /// `1 x M` accumulated relevance, when a dictionary is used.
    pub relevance: Option<Var>,
    pub selected: Vec<usize>,
    pub attention: Option<Var>,
}

impl SetEncoding {
    pub fn to_result(&self, g: &Graph) -> EncodeResult {
        EncodeResult {
            v: g.value(self.v).clone(),
            selected: self.selected.clone(),
            relevance: self.relevance.map(|p| g.value(p).data().to_vec()).unwrap_or_default(),
            attention: self.attention.map(|a| g.value(a).clone()),
        }
    }
}

/// Embed every behavior of every set in one gather. Returns the stacked
/// behavior embeddings and the row range of each set.
pub fn embed_sets(g: &mut Graph, table: Var, sets: &[&[Behavior]]) -> Result<(Var, Vec<Range<usize>>)> {
    let vocab = g.shape(table)[0];
    let mut ids = Vec::new();
    let mut offsets = vec![0usize];
    let mut ranges = Vec::with_capacity(sets.len());
    let mut row = 0;
    for (s, set) in sets.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::contract(format!("behavior set {s} is empty")));
        }
        for b in set.iter() {
            if b.tokens.is_empty() {
                return Err(Error::contract("cannot embed a behavior with no tokens"));
            }
            for &t in &b.tokens {
                if t as usize >= vocab {
                    return Err(Error::contract(format!("token id {t} outside a table of {vocab} rows")));
                }
                ids.push(t as usize);
            }
            offsets.push(ids.len());
        }
        ranges.push(row..row + set.len());
        row += set.len();
    }
    if ids.is_empty() {
        return Err(Error::contract("no behaviors to embed"));
    }
    let words = g.gather(table, &ids);
    Ok((g.segment_mean(words, &offsets), ranges))
}

/// Indices of the `k` largest entries, largest first; ties go to the lower index.
pub fn select_topk(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::config(format!("top-k of {k} from {} candidates", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Encode the behaviors `e` (`|S| x D`) against `dictionary` (`M x D`).
/// `normalized_dictionary` is the row-normalized dictionary, shared across
/// all sets of a graph.
pub fn dictionary_encode(
    g: &mut Graph,
    dictionary: Var,
    normalized_dictionary: Var,
    e: Var,
    k: usize,
) -> Result<SetEncoding> {
    let en = g.normalize_rows(e);
    let ent = g.transpose(en);
    let p = g.matmul(normalized_dictionary, ent);
    let m = g.shape(p)[0];
    let summed = g.sum_axis(p, 1);
    let relevance = g.reshape(summed, 1, m);
    let selected = select_topk(g.value(relevance).data(), k)?;
    let chosen = g.gather(dictionary, &selected);
    let et = g.transpose(e);
    let dots = g.matmul(chosen, et);
    let attention = g.softmax(dots, 1);
    let v = g.matmul(attention, e);
    Ok(SetEncoding {
        v,
        relevance: Some(relevance),
        selected,
        attention: Some(attention),
    })
}

/// Element-wise max over behavior embeddings; a single output vector.
pub fn maxpool_encode(g: &mut Graph, e: Var) -> SetEncoding {
    SetEncoding {
        v: g.max_axis(e, 0),
        relevance: None,
        selected: Vec::new(),
        attention: None,
    }
}

/// Mean of the table rows of `tokens`; a structured id is a one-token list.
pub fn embed_behavior(tokens: &[u32], table: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let t = g.constant(table.clone());
    let b = Behavior { ts: 0, tokens: tokens.to_vec() };
    let (e, _) = embed_sets(&mut g, t, &[std::slice::from_ref(&b)])?;
    Ok(g.value(e).data().to_vec())
}

/// `M x |S|` cosine scores between dictionary rows and behavior embeddings.
pub fn relevance_scores(dictionary: &Tensor, behaviors: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let c = g.constant(dictionary.clone());
    let e = g.constant(behaviors.clone());
    let cn = g.normalize_rows(c);
    let en = g.normalize_rows(e);
    let ent = g.transpose(en);
    let p = g.matmul(cn, ent);
    g.value(p).clone()
}

/// Row sums of the relevance matrix.
pub fn accumulate(p: &Tensor) -> Vec<f64> {
    (0..p.rows()).map(|i| p.row_slice(i).iter().sum()).collect()
}

/// Attention of each selected row over the behaviors; returns `(V, alpha)`.
pub fn attend_aggregate(selected: &Tensor, behaviors: &Tensor) -> (Tensor, Tensor) {
    let mut g = Graph::new();
    let c = g.constant(selected.clone());
    let e = g.constant(behaviors.clone());
    let et = g.transpose(e);
    let dots = g.matmul(c, et);
    let a = g.softmax(dots, 1);
    let v = g.matmul(a, e);
    (g.value(v).clone(), g.value(a).clone())
}
