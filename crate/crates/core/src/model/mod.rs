//! Parameter set, initialization, and the batch objective that ties the
//! encoder, projection head, and losses together.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamSet, Var};
use crate::data::Behavior;
use crate::encoder::{dictionary_encode, embed_sets, maxpool_encode, EncodeResult, SetEncoding};
use crate::error::{Error, Result};
use crate::objective::{
    info_nce, interest_regularizer, project, score_matrix, total_loss, LossConfig, ProjectionHead, RegSource,
    SetScore,
};
use crate::tensor::Tensor;

mod suite;

pub use suite::{run_grad_suite, GradSuiteCase, GradSuiteConfig, GradSuiteReport};

pub const EMBEDDING: &str = "embedding";
pub const DICTIONARY: &str = "dictionary";
pub const PROJ_W1: &str = "proj_w1";
pub const PROJ_W2: &str = "proj_w2";

/// Encoder + similarity combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Interest dictionary with best-match set similarity (the full method).
    IdIcl,
    /// Element-wise max pooling, one vector, plain cosine.
    MaxpoolCl,
    /// Interest dictionary, cosine of the concatenated vectors.
    IdConcatCl,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::IdIcl, Variant::MaxpoolCl, Variant::IdConcatCl];

    pub fn name(self) -> &'static str {
        match self {
            Variant::IdIcl => "id-icl",
            Variant::MaxpoolCl => "maxpool-cl",
            Variant::IdConcatCl => "id-concat-cl",
        }
    }

    pub fn uses_dictionary(self) -> bool {
        !matches!(self, Variant::MaxpoolCl)
    }

    pub fn score(self) -> SetScore {
        match self {
            Variant::IdConcatCl => SetScore::Concat,
            _ => SetScore::BestMatch,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?} (expected id-icl|maxpool-cl|id-concat-cl)")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub dict_size: usize,
    pub top_k: usize,
    pub proj_hidden: usize,
    pub proj_out: usize,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("dim", self.dim),
            ("proj_hidden", self.proj_hidden),
            ("proj_out", self.proj_out),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.variant.uses_dictionary() {
            if self.top_k == 0 || self.dict_size == 0 {
                return Err(Error::config("dictionary size and K must be positive"));
            }
            if self.top_k > self.dict_size {
                return Err(Error::config(format!(
                    "K = {} exceeds dictionary size M = {}",
                    self.top_k, self.dict_size
                )));
            }
        }
        Ok(())
    }

    /// Vectors per user representation.
    pub fn output_k(&self) -> usize {
        if self.variant.uses_dictionary() {
            self.top_k
        } else {
            1
        }
    }

    pub fn param_shapes(&self) -> BTreeMap<&'static str, [usize; 2]> {
        let mut m = BTreeMap::new();
        m.insert(EMBEDDING, [self.vocab_size, self.dim]);
        if self.variant.uses_dictionary() {
            m.insert(DICTIONARY, [self.dict_size, self.dim]);
        }
        m.insert(PROJ_W1, [self.dim, self.proj_hidden]);
        m.insert(PROJ_W2, [self.proj_hidden, self.proj_out]);
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    /// Scaled-uniform initialization: table and dictionary entries from
    /// `[-1/sqrt(D), 1/sqrt(D)]`, projection weights from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (config.dim as f64).sqrt();
        let mut params = ParamSet::new();
        params.insert(EMBEDDING.into(), Tensor::uniform(config.vocab_size, config.dim, bound, &mut rng));
        if config.variant.uses_dictionary() {
            params.insert(DICTIONARY.into(), Tensor::uniform(config.dict_size, config.dim, bound, &mut rng));
        }
        params.insert(PROJ_W1.into(), Tensor::uniform(config.dim, config.proj_hidden, bound, &mut rng));
        let hb = 1.0 / (config.proj_hidden as f64).sqrt();
        params.insert(PROJ_W2.into(), Tensor::uniform(config.proj_hidden, config.proj_out, hb, &mut rng));
        Ok(Model { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Model> {
        config.validate()?;
        let shapes = config.param_shapes();
        if params.len() != shapes.len() {
            return Err(Error::config(format!(
                "expected parameters {:?}, got {:?}",
                shapes.keys().collect::<Vec<_>>(),
                params.keys().collect::<Vec<_>>()
            )));
        }
        for (name, shape) in shapes {
            let t = params
                .get(name)
                .ok_or_else(|| Error::config(format!("missing parameter {name}")))?;
            if t.shape() != shape {
                return Err(Error::config(format!(
                    "parameter {name} has shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Model { config, params })
    }

    pub fn embedding(&self) -> &Tensor {
        &self.params[EMBEDDING]
    }

    pub fn dictionary(&self) -> Option<&Tensor> {
        self.params.get(DICTIONARY)
    }

    pub fn head(&self) -> ProjectionHead {
        ProjectionHead {
            w1: self.params[PROJ_W1].clone(),
            w2: self.params[PROJ_W2].clone(),
        }
    }

    /// Re-draw dictionary rows whose norm fell below `1e-8`. Returns how many.
    pub fn rescue_dead_rows<R: Rng>(&mut self, rng: &mut R) -> usize {
        let bound = 1.0 / (self.config.dim as f64).sqrt();
        let Some(dict) = self.params.get_mut(DICTIONARY) else {
            return 0;
        };
        let mut rescued = 0;
        for r in 0..dict.rows() {
            if dict.row_norm(r) < 1e-8 {
                for v in dict.row_slice_mut(r) {
                    *v = rng.gen_range(-bound..=bound);
                }
                rescued += 1;
            }
        }
        rescued
    }

    pub fn encode(&self, behaviors: &[Behavior]) -> Result<EncodeResult> {
        Ok(self.encode_many(&[behaviors])?.remove(0))
    }

    /// Encode independent sets with frozen parameters. Work is split into
    /// chunks that run in parallel; the output order follows the input.
    pub fn encode_many(&self, sets: &[&[Behavior]]) -> Result<Vec<EncodeResult>> {
        Ok(self.represent(sets, false)?.into_iter().map(|(e, _)| e).collect())
    }

    /// Encodings plus, when `project` is set, the projected `K x D_p` sets.
    pub fn represent(&self, sets: &[&[Behavior]], project_out: bool) -> Result<Vec<(EncodeResult, Option<Tensor>)>> {
        const CHUNK: usize = 128;
        let chunks: Vec<Result<Vec<(EncodeResult, Option<Tensor>)>>> = sets
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = Graph::new();
                let vars = ModelVars::constants(&mut g, &self.params);
                let encs = encode_sets(&mut g, &vars, &self.config, chunk)?;
                encs.iter()
                    .map(|enc| {
                        let h = if project_out {
                            let h = project(&mut g, vars.w1, vars.w2, enc.v);
                            Some(g.value(h).clone())
                        } else {
                            None
                        };
                        Ok((enc.to_result(&g), h))
                    })
                    .collect()
            })
            .collect();
        let mut out = Vec::with_capacity(sets.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }
}

/// Graph handles for every model parameter.
#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub embedding: Var,
    pub dictionary: Option<Var>,
    pub normalized_dictionary: Option<Var>,
    pub w1: Var,
    pub w2: Var,
}

impl ModelVars {
    fn build(g: &mut Graph, get: impl Fn(&mut Graph, &str) -> Option<Var>) -> Result<Self> {
        let need = |g: &mut Graph, name: &str| {
            get(g, name).ok_or_else(|| Error::contract(format!("missing parameter {name}")))
        };
        let embedding = need(g, EMBEDDING)?;
        let dictionary = get(g, DICTIONARY);
        let w1 = need(g, PROJ_W1)?;
        let w2 = need(g, PROJ_W2)?;
        let normalized_dictionary = dictionary.map(|d| g.normalize_rows(d));
        Ok(ModelVars {
            embedding,
            dictionary,
            normalized_dictionary,
            w1,
            w2,
        })
    }

    /// Register every parameter as a trainable leaf.
    pub fn trainable(g: &mut Graph, params: &ParamSet) -> Self {
        let vars: BTreeMap<String, Var> = params
            .iter()
            .map(|(n, t)| (n.clone(), g.param(n.clone(), t.clone())))
            .collect();
        ModelVars::from_map(g, &vars).expect("parameter set built by Model")
    }

    /// Parameters as constants (inference).
    pub fn constants(g: &mut Graph, params: &ParamSet) -> Self {
        ModelVars::build(g, |g, name| params.get(name).map(|t| g.constant(t.clone())))
            .expect("parameter set built by Model")
    }

    /// Reuse leaves already registered in `g`, e.g. by a gradient check.
    pub fn from_map(g: &mut Graph, vars: &BTreeMap<String, Var>) -> Result<Self> {
        ModelVars::build(g, |_, name| vars.get(name).copied())
    }
}

pub fn encode_sets(
    g: &mut Graph,
    vars: &ModelVars,
    config: &ModelConfig,
    sets: &[&[Behavior]],
) -> Result<Vec<SetEncoding>> {
    let (e_all, ranges) = embed_sets(g, vars.embedding, sets)?;
    ranges
        .into_iter()
        .map(|r| {
            let e = g.slice_rows(e_all, r.start, r.len());
            match (config.variant.uses_dictionary(), vars.dictionary, vars.normalized_dictionary) {
                (true, Some(d), Some(dn)) => dictionary_encode(g, d, dn, e, config.top_k),
                (true, _, _) => Err(Error::contract("variant needs a dictionary parameter")),
                (false, _, _) => Ok(maxpool_encode(g, e)),
            }
        })
        .collect()
}

/// Graph nodes of one batch objective.
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub total: Var,
    /// Sum of per-anchor InfoNCE terms.
    pub contrastive: Var,
    pub regularizer: Option<Var>,
    pub per_anchor: Var,
    /// `B x B` set similarities, anchors by targets.
    pub similarity: Var,
    pub anchors: Vec<SetEncoding>,
    pub targets: Vec<SetEncoding>,
}

/// Encode anchors and targets with the shared encoder, project both with
/// the shared head, and build `beta * InfoNCE + gamma * L_reg`. The
/// regularizer is only built when `gamma > 0` and the variant has a dictionary.
pub fn batch_objective(
    g: &mut Graph,
    vars: &ModelVars,
    config: &ModelConfig,
    loss: &LossConfig,
    anchors: &[&[Behavior]],
    targets: &[&[Behavior]],
) -> Result<BatchObjective> {
    if anchors.len() != targets.len() {
        return Err(Error::contract("anchor and target batches differ in size"));
    }
    let b = anchors.len();
    if b < 2 {
        return Err(Error::config("batch needs at least 2 users"));
    }
    let sets: Vec<&[Behavior]> = anchors.iter().chain(targets).copied().collect();
    let mut encs = encode_sets(g, vars, config, &sets)?;
    let target_encs = encs.split_off(b);
    let anchor_encs = encs;

    let vs: Vec<Var> = anchor_encs.iter().chain(&target_encs).map(|e| e.v).collect();
    let v_all = g.concat_rows(&vs);
    let h_all = project(g, vars.w1, vars.w2, v_all);
    let k = config.output_k();
    let ha = g.slice_rows(h_all, 0, b * k);
    let ht = g.slice_rows(h_all, b * k, b * k);
    let similarity = score_matrix(g, config.variant.score(), ha, ht, k);
    let nce = info_nce(g, similarity, loss.tau)?;

    let regularizer = if config.variant.uses_dictionary() && loss.gamma > 0.0 {
        let feeds: Vec<Var> = match loss.reg_source {
            RegSource::Both => anchor_encs.iter().chain(&target_encs).filter_map(|e| e.relevance).collect(),
            RegSource::Anchors => anchor_encs.iter().filter_map(|e| e.relevance).collect(),
        };
        let p = g.concat_rows(&feeds);
        Some(interest_regularizer(g, p))
    } else {
        None
    };
    let total = total_loss(g, nce.total, regularizer, loss);
    Ok(BatchObjective {
        total,
        contrastive: nce.total,
        regularizer,
        per_anchor: nce.per_anchor,
        similarity,
        anchors: anchor_encs,
        targets: target_encs,
    })
}

#[cfg(test)]
mod tests;
