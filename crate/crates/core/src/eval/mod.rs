//! Frozen-encoder evaluation: representation export, retrieval accuracy,
//! downstream probes, dictionary utilization, and the variant ablation.

mod metrics;
mod probe;
mod store;

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use metrics::{accuracy, auc};
pub use probe::{train_probe, ProbeConfig, ProbeInput, ProbeReport, ProbeTask};
pub use store::EmbeddingStore;

use crate::data::{Behavior, Mode, WindowedUser};
use crate::error::{Error, Result};
use crate::model::{Model, Variant};
use crate::objective::{concat_similarity_value, set_similarity_value, SetScore};
use crate::tensor::Tensor;
use crate::train::{train, TrainConfig, TrainOutcome};

/// Which representation is exported: the pooled interest vectors or
/// their projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    V,
    H,
}

/// Behavior window a representation is inferred from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    History,
    Short,
    Long,
}

impl Window {
    pub fn target(mode: Mode) -> Window {
        match mode {
            Mode::Short => Window::Short,
            Mode::Long => Window::Long,
        }
    }

    fn of(self, u: &WindowedUser) -> &[Behavior] {
        match self {
            Window::History => &u.history,
            Window::Short => &u.short,
            Window::Long => &u.long,
        }
    }
}

/// Encode each user's `window` with frozen parameters. Users with an
/// empty window are skipped with a warning.
pub fn infer_representations(
    model: &Model,
    users: &[&WindowedUser],
    window: Window,
    space: Space,
) -> Result<EmbeddingStore> {
    let kept: Vec<&WindowedUser> = users.iter().copied().filter(|u| !window.of(u).is_empty()).collect();
    if kept.len() < users.len() {
        log::warn!("skipping {} users with an empty {window:?} window", users.len() - kept.len());
    }
    let sets: Vec<&[Behavior]> = kept.iter().map(|u| window.of(u)).collect();
    let reps = model.represent(&sets, space == Space::H)?;
    let (k, d) = (
        model.config.output_k(),
        match space {
            Space::V => model.config.dim,
            Space::H => model.config.proj_out,
        },
    );
    let mut store = EmbeddingStore::new(k, d);
    for (u, (enc, h)) in kept.iter().zip(reps) {
        store.insert(u.user_id.clone(), h.unwrap_or(enc.v))?;
    }
    Ok(store)
}

/// Within consecutive batches of `batch_size` users, the share of anchors
/// whose best-scoring target is their own. A trailing partial batch is
/// left out. Ties go to the lower index.
pub fn retrieval_accuracy(
    anchors: &EmbeddingStore,
    targets: &EmbeddingStore,
    batch_size: usize,
    score: SetScore,
) -> Result<f64> {
    if anchors.ids() != targets.ids() {
        return Err(Error::contract("anchor and target stores must list the same users in the same order"));
    }
    if batch_size < 1 || batch_size > anchors.len() {
        return Err(Error::config(format!(
            "retrieval batch {batch_size} does not fit a population of {}",
            anchors.len()
        )));
    }
    let sim: fn(&Tensor, &Tensor) -> f64 = match score {
        SetScore::BestMatch => set_similarity_value,
        SetScore::Concat => concat_similarity_value,
    };
    let batches = anchors.len() / batch_size;
    let hits: usize = (0..batches)
        .into_par_iter()
        .map(|b| {
            let range = b * batch_size..(b + 1) * batch_size;
            let a = &anchors.matrices()[range.clone()];
            let t = &targets.matrices()[range];
            (0..batch_size)
                .filter(|&i| {
                    let mut best = 0;
                    let mut best_score = f64::NEG_INFINITY;
                    for (j, tj) in t.iter().enumerate() {
                        let s = sim(&a[i], tj);
                        if s > best_score {
                            best = j;
                            best_score = s;
                        }
                    }
                    best == i
                })
                .count()
        })
        .sum();
    Ok(hits as f64 / (batches * batch_size) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Utilization {
    /// Times each dictionary row was among a user's selected interests.
    pub counts: Vec<usize>,
    /// Coefficient of variation of `counts`.
    pub dispersion: f64,
    pub users: usize,
}

pub fn dictionary_utilization(model: &Model, users: &[&WindowedUser], window: Window) -> Result<Utilization> {
    if !model.config.variant.uses_dictionary() {
        return Err(Error::config(format!("variant {} has no interest dictionary", model.config.variant)));
    }
    let sets: Vec<&[Behavior]> = users.iter().map(|u| window.of(u)).filter(|s| !s.is_empty()).collect();
    let encs = model.encode_many(&sets)?;
    let mut counts = vec![0; model.config.dict_size];
    for e in &encs {
        for &i in &e.selected {
            counts[i] += 1;
        }
    }
    let m = counts.len() as f64;
    let mean = counts.iter().sum::<usize>() as f64 / m;
    let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / m;
    let dispersion = if mean > 0.0 { var.sqrt() / mean } else { 0.0 };
    Ok(Utilization {
        counts,
        dispersion,
        users: encs.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub retrieval_batch: usize,
    /// Representation the probe reads.
    pub probe_space: Space,
    pub probe: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            retrieval_batch: 64,
            probe_space: Space::V,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub retrieval_accuracy: f64,
    pub retrieval_users: usize,
    pub probe: Option<ProbeReport>,
    pub utilization: Option<Utilization>,
}

/// Retrieval over `retrieval_users` (history against the mode's target
/// window, projected), a probe over every user's history when labels are
/// given, and dictionary utilization over every history.
pub fn evaluate(
    model: &Model,
    users: &[WindowedUser],
    retrieval_users: &[&WindowedUser],
    labels: Option<&BTreeMap<String, usize>>,
    mode: Mode,
    cfg: &EvalConfig,
) -> Result<Evaluation> {
    let eligible: Vec<&WindowedUser> = retrieval_users.iter().copied().filter(|u| u.eligible(mode)).collect();
    let anchors = infer_representations(model, &eligible, Window::History, Space::H)?;
    let targets = infer_representations(model, &eligible, Window::target(mode), Space::H)?;
    let retrieval = retrieval_accuracy(&anchors, &targets, cfg.retrieval_batch, model.config.variant.score())?;

    let all: Vec<&WindowedUser> = users.iter().collect();
    let probe = match labels {
        Some(labels) => {
            let store = infer_representations(model, &all, Window::History, cfg.probe_space)?;
            Some(train_probe(&store, labels, &cfg.probe)?)
        }
        None => None,
    };
    let utilization = if model.config.variant.uses_dictionary() {
        Some(dictionary_utilization(model, &all, Window::History)?)
    } else {
        None
    };
    Ok(Evaluation {
        retrieval_accuracy: retrieval,
        retrieval_users: eligible.len(),
        probe,
        utilization,
    })
}

/// SHA-256 of the canonical JSON encoding of `value`, hex.
pub fn config_digest<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// One line of metrics output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub variant: Variant,
    pub mode: Mode,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
    pub config_digest: String,
}

impl Evaluation {
    pub fn records(&self, variant: Variant, mode: Mode, seed: u64, digest: &str) -> Vec<MetricRecord> {
        let mut out = vec![("retrieval_accuracy".to_string(), self.retrieval_accuracy)];
        if let Some(p) = &self.probe {
            out.push((format!("probe_{}", p.metric), p.value));
        }
        if let Some(u) = &self.utilization {
            out.push(("utilization_dispersion".to_string(), u.dispersion));
        }
        out.into_iter()
            .map(|(metric, value)| MetricRecord {
                variant,
                mode,
                metric,
                value,
                seed,
                config_digest: digest.to_string(),
            })
            .collect()
    }
}

pub fn records_to_jsonl(records: &[MetricRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    pub mode: Mode,
    pub evaluation: Evaluation,
    pub validation_loss: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub outcome: TrainOutcome,
}

/// Train `variant` under `train_cfg` (all other settings shared) and
/// evaluate it. Retrieval runs on the held-out validation users.
pub fn run_ablation(
    users: &[WindowedUser],
    labels: Option<&BTreeMap<String, usize>>,
    vocab_size: usize,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    variant: Variant,
) -> Result<AblationRow> {
    let cfg = TrainConfig { variant, ..train_cfg.clone() };
    let outcome = train(users, &cfg, vocab_size)?;
    let model = outcome.checkpoint.model()?;
    let held_out: HashSet<&str> = outcome.history.validation_users.iter().map(String::as_str).collect();
    let retrieval_users: Vec<&WindowedUser> = if held_out.is_empty() {
        users.iter().collect()
    } else {
        users.iter().filter(|u| held_out.contains(u.user_id.as_str())).collect()
    };
    let evaluation = evaluate(&model, users, &retrieval_users, labels, cfg.mode, eval_cfg)?;
    Ok(AblationRow {
        variant,
        mode: cfg.mode,
        evaluation,
        validation_loss: outcome.checkpoint.header.validation_loss,
        best_epoch: outcome.history.best_epoch,
        epochs_run: outcome.history.epochs.len(),
        outcome,
    })
}

/// Plain-text comparison table, one row per variant.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<14} {:<6} {:>10} {:>10} {:>11} {:>10} {:>6}\n",
        "variant", "mode", "retrieval", "probe", "dispersion", "val_loss", "epoch"
    );
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    for r in rows {
        let e = &r.evaluation;
        let _ = writeln!(
            s,
            "{:<14} {:<6} {:>10.4} {:>10} {:>11} {:>10.4} {:>6}",
            r.variant.name(),
            r.mode.to_string(),
            e.retrieval_accuracy,
            opt(e.probe.as_ref().map(|p| p.value)),
            opt(e.utilization.as_ref().map(|u| u.dispersion)),
            r.validation_loss,
            r.best_epoch
        );
    }
    s
}
