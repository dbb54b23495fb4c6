//! Mini-batch training with Adam, validation-loss early stopping, and
//! checkpoints.

mod adam;
mod checkpoint;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, round_to_f32, AdamState};
pub use checkpoint::{Checkpoint, CheckpointHeader, OptimizerMeta, FORMAT_VERSION, MAGIC};

use crate::autograd::Graph;
use crate::data::{Behavior, Mode, WindowedUser};
use crate::error::{Error, Result};
use crate::model::{batch_objective, Model, ModelConfig, ModelVars, Variant};
use crate::objective::{LossConfig, RegSource};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub variant: Variant,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub dim: usize,
    pub dict_size: usize,
    pub top_k: usize,
    /// Projection widths; `None` means `dim`.
    pub proj_hidden: Option<usize>,
    pub proj_out: Option<usize>,
    pub tau: f64,
    pub beta: f64,
    pub gamma: f64,
    pub reg_source: RegSource,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Short,
            variant: Variant::IdIcl,
            batch_size: 256,
            learning_rate: 0.001,
            max_epochs: 50,
            patience: 5,
            min_delta: 1e-4,
            dim: 256,
            dict_size: 20,
            top_k: 2,
            proj_hidden: None,
            proj_out: None,
            tau: 0.1,
            beta: 1.0,
            gamma: 1.0,
            reg_source: RegSource::Both,
            seed: 0,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config(format!(
                "validation fraction must lie in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::config("min_delta must be non-negative"));
        }
        if self.variant.uses_dictionary() && self.top_k >= self.dict_size {
            return Err(Error::config(format!(
                "K = {} must be smaller than the dictionary size M = {}",
                self.top_k, self.dict_size
            )));
        }
        self.loss().validate()?;
        self.model_config(1).validate()
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            beta: self.beta,
            gamma: self.gamma,
            reg_source: self.reg_source,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            dim: self.dim,
            dict_size: self.dict_size,
            top_k: self.top_k,
            proj_hidden: self.proj_hidden.unwrap_or(self.dim),
            proj_out: self.proj_out.unwrap_or(self.dim),
            variant: self.variant,
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// True when the user id hashes into the validation share.
pub fn is_validation_user(user_id: &str, fraction: f64) -> bool {
    const SCALE: u64 = 1_000_000;
    ((fnv1a(user_id) % SCALE) as f64) < fraction * SCALE as f64
}

/// Eligible users for `mode`, split into (train, validation) by id hash.
pub fn split_users(users: &[WindowedUser], mode: Mode, fraction: f64) -> (Vec<&WindowedUser>, Vec<&WindowedUser>) {
    users
        .iter()
        .filter(|u| u.eligible(mode))
        .partition(|u| !is_validation_user(&u.user_id, fraction))
}

fn pairs<'a>(batch: &[&'a WindowedUser], mode: Mode) -> (Vec<&'a [Behavior]>, Vec<&'a [Behavior]>) {
    batch.iter().map(|u| (u.history.as_slice(), u.target(mode))).unzip()
}

/// Total loss of one batch under frozen parameters.
pub fn batch_loss(model: &Model, mode: Mode, loss: &LossConfig, batch: &[&WindowedUser]) -> Result<f64> {
    let (anchors, targets) = pairs(batch, mode);
    let mut g = Graph::new();
    let vars = ModelVars::constants(&mut g, &model.params);
    let obj = batch_objective(&mut g, &vars, &model.config, loss, &anchors, &targets)?;
    Ok(g.value(obj.total).item())
}

/// Mean batch loss over consecutive chunks of `batch_size` users. A short
/// remainder is dropped unless it is the only chunk.
pub fn mean_loss(
    model: &Model,
    users: &[&WindowedUser],
    mode: Mode,
    loss: &LossConfig,
    batch_size: usize,
) -> Result<f64> {
    if users.len() < 2 {
        return Err(Error::data("need at least 2 users to evaluate the loss"));
    }
    let size = batch_size.min(users.len());
    let chunks: Vec<&[&WindowedUser]> = users.chunks(size).filter(|c| c.len() == size).collect();
    let losses: Vec<f64> = chunks
        .par_iter()
        .map(|c| batch_loss(model, mode, loss, c))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Model plus optimizer state, advanced one batch at a time.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
}

impl Trainer {
    pub fn new(config: TrainConfig, vocab_size: usize) -> Result<Trainer> {
        config.validate()?;
        let mut model = Model::init(config.model_config(vocab_size), config.seed)?;
        round_to_f32(&mut model.params);
        let adam = AdamState::new(&model.params);
        Ok(Trainer { config, model, adam })
    }

    /// One Adam update on `batch`. Returns the loss before the update.
    pub fn step(&mut self, batch: &[&WindowedUser]) -> Result<f64> {
        let (anchors, targets) = pairs(batch, self.config.mode);
        let mut g = Graph::new();
        let vars = ModelVars::trainable(&mut g, &self.model.params);
        let obj = batch_objective(&mut g, &vars, &self.model.config, &self.config.loss(), &anchors, &targets)?;
        let loss = g.value(obj.total).item();
        if !loss.is_finite() {
            return Err(Error::Numeric {
                node: "total_loss".into(),
                message: format!("loss is {loss} at optimizer step {}", self.adam.step + 1),
            });
        }
        let grads = g.backward(obj.total)?;
        adam_step(&mut self.model.params, &grads, &mut self.adam, self.config.learning_rate)?;
        round_to_f32(&mut self.model.params);
        round_to_f32(&mut self.adam.m);
        round_to_f32(&mut self.adam.v);
        Ok(loss)
    }

    pub fn checkpoint(&self, epoch: usize, validation_loss: f64) -> Checkpoint {
        Checkpoint::new(&self.model, &self.config, &self.adam, epoch, validation_loss)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub rescued_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainHistory {
    pub initial_validation_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// Loss of every optimizer step, before its update.
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub train_users: usize,
    pub validation_users: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot at the best validation loss.
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
}

/// Train on the eligible users of `config.mode`. Validation users are
/// chosen by id hash and never enter a training batch; when that share
/// has fewer than 2 users, the training users stand in for it.
pub fn train(users: &[WindowedUser], config: &TrainConfig, vocab_size: usize) -> Result<TrainOutcome> {
    config.validate()?;
    let mode = config.mode;
    let (train_users, mut val_users) = split_users(users, mode, config.validation_fraction);
    if train_users.len() < config.batch_size {
        return Err(Error::data(format!(
            "{} eligible training users for {mode} mode, batch size needs {}",
            train_users.len(),
            config.batch_size
        )));
    }
    let fallback = val_users.len() < 2;
    if fallback {
        log::warn!("fewer than 2 validation users, monitoring the training loss instead");
        val_users = train_users.clone();
    }
    let loss_cfg = config.loss();
    let mut trainer = Trainer::new(config.clone(), vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));

    let initial = mean_loss(&trainer.model, &val_users, mode, &loss_cfg, config.batch_size)?;
    log::info!("epoch 0: validation loss {initial:.6}");
    let mut best = trainer.checkpoint(0, initial);
    let mut history = TrainHistory {
        initial_validation_loss: initial,
        epochs: Vec::new(),
        step_losses: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
        train_users: train_users.len(),
        validation_users: if fallback {
            Vec::new()
        } else {
            val_users.iter().map(|u| u.user_id.clone()).collect()
        },
    };
    let mut since_best = 0;
    let mut order = train_users.clone();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for batch in order.chunks(config.batch_size).filter(|b| b.len() >= 2) {
            let l = trainer.step(batch)?;
            history.step_losses.push(l);
            sum += l;
            steps += 1;
        }
        let rescued_rows = trainer.model.rescue_dead_rows(&mut rng);
        let validation_loss = mean_loss(&trainer.model, &val_users, mode, &loss_cfg, config.batch_size)?;
        if !validation_loss.is_finite() {
            return Err(Error::Numeric {
                node: "validation_loss".into(),
                message: format!("validation loss is {validation_loss} after epoch {epoch}"),
            });
        }
        let train_loss = sum / steps as f64;
        log::info!("epoch {epoch}: train loss {train_loss:.6}, validation loss {validation_loss:.6}");
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            validation_loss,
            rescued_rows,
        });
        if validation_loss < best.header.validation_loss - config.min_delta {
            best = trainer.checkpoint(epoch, validation_loss);
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        checkpoint: best,
        history,
    })
}

#[cfg(test)]
mod tests;
