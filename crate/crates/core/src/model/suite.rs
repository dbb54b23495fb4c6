//! End-to-end finite-difference check of the batch objective over many
//! small random configurations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_objective, Model, ModelConfig, ModelVars, Variant, PROJ_W1};
use crate::autograd::grad_check;
use crate::encoder::embed_behavior;
use crate::objective::SetScore;
use crate::tensor::{cosine, Tensor};
use crate::data::{Behavior, Mode, WindowedUser};
use crate::error::{Error, Result};
use crate::objective::{LossConfig, RegSource};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradSuiteConfig {
    pub cases: usize,
    pub vocab: usize,
    pub max_dim: usize,
    pub max_dict: usize,
    pub max_k: usize,
    pub max_batch: usize,
    pub max_set: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradSuiteConfig {
    fn default() -> Self {
        GradSuiteConfig {
            cases: 20,
            vocab: 15,
            max_dim: 8,
            max_dict: 6,
            max_k: 2,
            max_batch: 4,
            max_set: 5,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

impl GradSuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cases == 0 || self.vocab == 0 {
            return Err(Error::config("gradient suite needs cases and a vocabulary"));
        }
        if self.max_dim < 1 || self.max_dict < 2 || self.max_k < 1 || self.max_batch < 2 || self.max_set < 1 {
            return Err(Error::config(
                "gradient suite bounds: dim >= 1, dictionary >= 2, K >= 1, batch >= 2, set >= 1",
            ));
        }
        if !(self.step > 0.0) || !(self.tolerance > 0.0) {
            return Err(Error::config("step and tolerance must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradSuiteCase {
    pub case: usize,
    pub mode: Mode,
    pub variant: Variant,
    pub dim: usize,
    pub dict_size: usize,
    pub top_k: usize,
    pub batch: usize,
    pub gamma: f64,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub kink_margin: f64,
    pub min_projection_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradSuiteReport {
    pub cases: Vec<GradSuiteCase>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradSuiteReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn random_window(rng: &mut ChaCha8Rng, vocab: usize, max_set: usize, t0: i64) -> Vec<Behavior> {
    (0..rng.gen_range(1..=max_set))
        .map(|i| Behavior {
            ts: t0 + i as i64,
            tokens: (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(0..vocab as u32)).collect(),
        })
        .collect()
}

/// Below this, a gap counts as an exact tie. Such ties come from identical
/// inputs (repeated behaviors, `D = 1` cosines of +-1) and survive any
/// perturbation, so they are not kinks.
const TIE: f64 = 1e-12;

/// Gap between the `rank`-th largest value and the next value below it.
fn top_gap(values: &mut [f64], rank: usize) -> f64 {
    values.sort_by(|a, b| b.total_cmp(a));
    let Some(&kth) = values.get(rank - 1) else {
        return f64::INFINITY;
    };
    values[rank..]
        .iter()
        .find(|v| kth - **v > TIE)
        .map_or(f64::INFINITY, |next| kth - next)
}

/// Distance of the batch from the nearest non-differentiable point the
/// objective passes through (ReLU hinges, Top-K boundaries, max ties), and
/// the smallest projected-vector norm.
fn smoothness(model: &Model, anchors: &[&[Behavior]], targets: &[&[Behavior]]) -> Result<(f64, f64)> {
    let sets: Vec<&[Behavior]> = anchors.iter().chain(targets).copied().collect();
    let reps = model.represent(&sets, true)?;
    let w1 = &model.params[PROJ_W1];
    let k = model.config.output_k();
    let mut margin = f64::INFINITY;
    let mut min_norm = f64::INFINITY;
    for (set, (enc, h)) in sets.iter().zip(&reps) {
        if model.config.variant.uses_dictionary() {
            margin = margin.min(top_gap(&mut enc.relevance.clone(), k));
        } else {
            let rows: Vec<Vec<f64>> =
                set.iter().map(|b| embed_behavior(&b.tokens, model.embedding())).collect::<Result<_>>()?;
            for c in 0..model.config.dim {
                let mut col: Vec<f64> = rows.iter().map(|r| r[c]).collect();
                margin = margin.min(top_gap(&mut col, 1));
            }
        }
        let hinge = enc.v.matmul(w1).data().iter().map(|z| z.abs()).filter(|z| *z > TIE).fold(f64::INFINITY, f64::min);
        margin = margin.min(hinge);
        let h = h.as_ref().expect("projection requested");
        for r in 0..h.rows() {
            min_norm = min_norm.min(h.row_norm(r));
        }
    }
    if model.config.variant.score() == SetScore::BestMatch && k > 1 {
        let hs: Vec<&Tensor> = reps.iter().map(|(_, h)| h.as_ref().unwrap()).collect();
        let (ha, ht) = hs.split_at(anchors.len());
        for a in ha {
            for t in ht {
                for i in 0..k {
                    let mut cos: Vec<f64> = (0..k).map(|j| cosine(a.row_slice(i), t.row_slice(j))).collect();
                    margin = margin.min(top_gap(&mut cos, 1));
                }
            }
        }
    }
    Ok((margin, min_norm))
}

const MAX_DRAWS: usize = 100;
/// Required distance from a kink, in units of the finite-difference step.
const KINK_CLEARANCE: f64 = 10.0;

struct Draw {
    model: Model,
    loss: LossConfig,
    users: Vec<WindowedUser>,
}

impl Draw {
    fn batch(&self, mode: Mode) -> (Vec<&[Behavior]>, Vec<&[Behavior]>) {
        self.users.iter().map(|u| (u.history.as_slice(), u.target(mode))).unzip()
    }
}

fn draw(rng: &mut ChaCha8Rng, cfg: &GradSuiteConfig, variant: Variant) -> Result<Draw> {
    let dim = rng.gen_range(1..=cfg.max_dim);
    let dict_size = rng.gen_range(2..=cfg.max_dict);
    let top_k = rng.gen_range(1..=cfg.max_k.min(dict_size - 1));
    let batch = rng.gen_range(2..=cfg.max_batch);
    let model_cfg = ModelConfig {
        vocab_size: cfg.vocab,
        dim,
        dict_size,
        top_k,
        proj_hidden: dim,
        proj_out: dim,
        variant,
    };
    let model = Model::init(model_cfg, rng.gen())?;
    let loss = LossConfig {
        tau: rng.gen_range(0.1..1.0),
        beta: 1.0,
        gamma: if rng.gen_bool(0.25) { 0.0 } else { rng.gen_range(0.1..1.0) },
        reg_source: if rng.gen_bool(0.5) { RegSource::Both } else { RegSource::Anchors },
    };
    let users = (0..batch)
        .map(|i| WindowedUser {
            user_id: format!("g{i}"),
            history: random_window(rng, cfg.vocab, cfg.max_set, 0),
            short: random_window(rng, cfg.vocab, cfg.max_set, 100),
            long: random_window(rng, cfg.vocab, cfg.max_set, 100),
        })
        .collect();
    Ok(Draw { model, loss, users })
}

/// Every case is checked in both modes; variants rotate through all three.
pub fn run_grad_suite(cfg: &GradSuiteConfig) -> Result<GradSuiteReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cases = Vec::new();
    for case in 0..cfg.cases {
        let variant = Variant::ALL[case % Variant::ALL.len()];
        // Redraw until both modes sit well clear of every kink; a central
        // difference straddling one measures nothing.
        let mut drawn = None;
        for _ in 0..MAX_DRAWS {
            let d = draw(&mut rng, cfg, variant)?;
            let margins: Vec<(f64, f64)> = [Mode::Short, Mode::Long]
                .iter()
                .map(|&mode| {
                    let (a, t) = d.batch(mode);
                    smoothness(&d.model, &a, &t)
                })
                .collect::<Result<_>>()?;
            if margins.iter().all(|(m, _)| *m >= KINK_CLEARANCE * cfg.step) {
                drawn = Some((d, margins));
                break;
            }
        }
        let (d, margins) = drawn.ok_or_else(|| Error::Numeric {
            node: "gradient suite".into(),
            message: format!("case {case}: no draw clear of kinks after {MAX_DRAWS} attempts"),
        })?;
        let Draw { model, loss, .. } = &d;
        let c = model.config;
        for (mode, (kink_margin, min_projection_norm)) in [Mode::Short, Mode::Long].into_iter().zip(margins) {
            let (anchors, targets) = d.batch(mode);
            let r = grad_check(&model.params, cfg.step, |g, vars| {
                let mv = ModelVars::from_map(g, vars)?;
                Ok(batch_objective(g, &mv, &model.config, loss, &anchors, &targets)?.total)
            })?;
            cases.push(GradSuiteCase {
                case,
                mode,
                variant,
                dim: c.dim,
                dict_size: c.dict_size,
                top_k: c.top_k,
                batch: d.users.len(),
                gamma: loss.gamma,
                max_rel_error: r.max_rel_error,
                worst: r.worst,
                kink_margin,
                min_projection_norm,
            });
        }
    }
    let max_rel_error = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradSuiteReport {
        cases,
        max_rel_error,
        tolerance: cfg.tolerance,
    })
}
