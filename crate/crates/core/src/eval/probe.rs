//! One-hidden-layer MLP trained on frozen representations.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, auc};
use super::store::EmbeddingStore;
use crate::autograd::{Graph, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::{adam_step, AdamState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeTask {
    /// Two classes, scored by AUC.
    Binary,
    /// Two or more classes, scored by accuracy.
    Multiclass,
}

/// How the `K` vectors of a user become one probe input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeInput {
    Concat,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub task: ProbeTask,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub test_fraction: f64,
    pub input: ProbeInput,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 128,
            task: ProbeTask::Multiclass,
            learning_rate: 0.001,
            batch_size: 256,
            epochs: 100,
            test_fraction: 0.2,
            input: ProbeInput::Concat,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("probe hidden size, batch size and epochs must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("probe learning rate must be positive"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("probe test fraction must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    /// `"auc"` or `"accuracy"`.
    pub metric: &'static str,
    pub value: f64,
    pub classes: Vec<usize>,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

fn features(m: &Tensor, input: ProbeInput) -> Vec<f64> {
    match input {
        ProbeInput::Concat => m.data().to_vec(),
        ProbeInput::Mean => (0..m.cols())
            .map(|c| (0..m.rows()).map(|r| m.get(r, c)).sum::<f64>() / m.rows() as f64)
            .collect(),
    }
}

/// Per-column mean and standard deviation of the training rows.
fn standardizer(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows() as f64;
    let mut mean = vec![0.0; x.cols()];
    let mut sd = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (c, v) in x.row_slice(r).iter().enumerate() {
            mean[c] += v / n;
        }
    }
    for r in 0..x.rows() {
        for (c, v) in x.row_slice(r).iter().enumerate() {
            sd[c] += (v - mean[c]).powi(2) / n;
        }
    }
    let sd = sd.into_iter().map(|s| if s.sqrt() > 1e-12 { s.sqrt() } else { 1.0 }).collect();
    (mean, sd)
}

fn apply_standardizer(x: &mut Tensor, mean: &[f64], sd: &[f64]) {
    for r in 0..x.rows() {
        for (c, v) in x.row_slice_mut(r).iter_mut().enumerate() {
            *v = (*v - mean[c]) / sd[c];
        }
    }
}

struct Mlp {
    params: ParamSet,
}

impl Mlp {
    fn logits(&self, x: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let p: BTreeMap<&str, _> = self.params.iter().map(|(k, t)| (k.as_str(), g.constant(t.clone()))).collect();
        let out = forward(&mut g, xv, &p);
        g.value(out).clone()
    }
}

fn forward(g: &mut Graph, x: crate::autograd::Var, p: &BTreeMap<&str, crate::autograd::Var>) -> crate::autograd::Var {
    let h = g.matmul(x, p["w1"]);
    let h = g.add(h, p["b1"]);
    let h = g.relu(h);
    let o = g.matmul(h, p["w2"]);
    g.add(o, p["b2"])
}

/// Fit on training rows only; class indices in `y` are dense `0..classes`.
fn fit(x: &Tensor, y: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<Mlp> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let inputs = x.cols();
    let mut params = ParamSet::new();
    params.insert("w1".into(), Tensor::uniform(inputs, cfg.hidden, 1.0 / (inputs as f64).sqrt(), &mut rng));
    params.insert("b1".into(), Tensor::zeros(1, cfg.hidden));
    params.insert("w2".into(), Tensor::uniform(cfg.hidden, classes, 1.0 / (cfg.hidden as f64).sqrt(), &mut rng));
    params.insert("b2".into(), Tensor::zeros(1, classes));
    let mut adam = AdamState::new(&params);
    let mut order: Vec<usize> = (0..x.rows()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let xb = x.gather_rows(batch);
            let mut onehot = Tensor::zeros(batch.len(), classes);
            for (r, &i) in batch.iter().enumerate() {
                onehot.set(r, y[i], 1.0);
            }
            let mut g = Graph::new();
            let xv = g.constant(xb);
            let yv = g.constant(onehot);
            let p: BTreeMap<&str, _> =
                params.iter().map(|(k, t)| (k.as_str(), g.param(k.clone(), t.clone()))).collect();
            let logits = forward(&mut g, xv, &p);
            let logp = g.log_softmax(logits, 1);
            let picked = g.mul(logp, yv);
            let s = g.sum(picked);
            let loss = g.scale(s, -1.0 / batch.len() as f64);
            let grads = g.backward(loss)?;
            adam_step(&mut params, &grads, &mut adam, cfg.learning_rate)?;
        }
    }
    Ok(Mlp { params })
}

/// Train a probe on a seeded 80/20 (by default) split of the labeled users
/// in `store` and report the held-out metric. Labels of held-out users are
/// only read when scoring.
pub fn train_probe(store: &EmbeddingStore, labels: &BTreeMap<String, usize>, cfg: &ProbeConfig) -> Result<ProbeReport> {
    cfg.validate()?;
    let mut ids: Vec<&String> = store.ids().iter().filter(|id| labels.contains_key(*id)).collect();
    let skipped = labels.len() - ids.len();
    if skipped > 0 {
        log::warn!("{skipped} labeled users have no representation and are ignored");
    }
    let classes: Vec<usize> = ids.iter().map(|id| labels[*id]).collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::data(format!("probe needs at least 2 classes, found {}", classes.len())));
    }
    if cfg.task == ProbeTask::Binary && classes.len() != 2 {
        return Err(Error::config(format!("binary probe given {} classes", classes.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    ids.shuffle(&mut rng);
    let n_test = ((ids.len() as f64 * cfg.test_fraction).round() as usize).clamp(1, ids.len() - 1);
    let (test, train) = ids.split_at(n_test);
    let train_set: BTreeSet<&String> = train.iter().copied().collect();
    if test.iter().any(|id| train_set.contains(id)) {
        return Err(Error::contract("probe train and test users overlap"));
    }

    let class_index = |id: &String| classes.binary_search(&labels[id]).expect("class collected above");
    let rows = |part: &[&String]| {
        let v: Vec<Vec<f64>> = part.iter().map(|id| features(store.get(id).unwrap(), cfg.input)).collect();
        Tensor::from_rows(&v)
    };
    let mut x_train = rows(train);
    let y_train: Vec<usize> = train.iter().map(|id| class_index(id)).collect();
    if y_train.iter().collect::<BTreeSet<_>>().len() < 2 {
        return Err(Error::data("probe training split holds a single class"));
    }
    let (mean, sd) = standardizer(&x_train);
    apply_standardizer(&mut x_train, &mean, &sd);
    let mlp = fit(&x_train, &y_train, classes.len(), cfg)?;

    let mut x_test = rows(test);
    apply_standardizer(&mut x_test, &mean, &sd);
    let logits = mlp.logits(&x_test);
    let y_test: Vec<usize> = test.iter().map(|id| class_index(id)).collect();
    let (metric, value) = match cfg.task {
        ProbeTask::Binary => {
            // Logit margin is monotone in the class-1 probability.
            let scores: Vec<f64> = (0..logits.rows()).map(|r| logits.get(r, 1) - logits.get(r, 0)).collect();
            let truth: Vec<bool> = y_test.iter().map(|&c| c == 1).collect();
            ("auc", auc(&scores, &truth)?)
        }
        ProbeTask::Multiclass => {
            let pred: Vec<usize> = (0..logits.rows())
                .map(|r| {
                    let row = logits.row_slice(r);
                    (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
                })
                .collect();
            ("accuracy", accuracy(&pred, &y_test)?)
        }
    };
    Ok(ProbeReport {
        metric,
        value,
        classes,
        train_ids: train.iter().map(|s| s.to_string()).collect(),
        test_ids: test.iter().map(|s| s.to_string()).collect(),
    })
}
