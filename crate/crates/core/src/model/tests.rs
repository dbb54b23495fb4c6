use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::grad_check;
use crate::encoder::select_topk;

fn cfg(vocab: usize, dim: usize, m: usize, k: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        dim,
        dict_size: m,
        top_k: k,
        proj_hidden: dim,
        proj_out: dim,
        variant: Variant::IdIcl,
    }
}

fn random_set(rng: &mut ChaCha8Rng, vocab: usize, n: usize) -> Vec<Behavior> {
    (0..n)
        .map(|i| Behavior {
            ts: i as i64,
            tokens: (0..rng.gen_range(1..=4)).map(|_| rng.gen_range(0..vocab as u32)).collect(),
        })
        .collect()
}

#[test]
fn degenerate_single_interest() {
    let model = Model::init(cfg(10, 4, 1, 1), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = random_set(&mut rng, 10, 5);
    let r = model.encode(&s).unwrap();
    assert_eq!(r.selected, vec![0]);
    assert_eq!(r.v.shape(), &[1, 4]);
    let a = r.attention.unwrap();
    assert!((a.sum() - 1.0).abs() < 1e-12);
}

#[test]
fn full_scale_shapes() {
    let model = Model::init(cfg(50, 256, 100, 5), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r = model.encode(&random_set(&mut rng, 50, 25)).unwrap();
    assert_eq!(r.v.shape(), &[5, 256]);
    assert_eq!(r.relevance.len(), 100);
    assert_eq!(r.attention.unwrap().shape(), &[5, 25]);
}

#[test]
fn permutation_invariant_and_deterministic() {
    let model = Model::init(cfg(30, 8, 6, 2), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let s = random_set(&mut rng, 30, 7);
        let mut p = s.clone();
        p.shuffle(&mut rng);
        let a = model.encode(&s).unwrap();
        let b = model.encode(&p).unwrap();
        assert_eq!(a.selected, b.selected);
        for (x, y) in a.v.data().iter().zip(b.v.data()) {
            assert!((x - y).abs() < 1e-6);
        }
        assert_eq!(a, model.encode(&s).unwrap());
    }
}

#[test]
fn encoding_invariants() {
    let model = Model::init(cfg(30, 8, 6, 3), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let n = rng.gen_range(1..10);
        let s = random_set(&mut rng, 30, n);
        let r = model.encode(&s).unwrap();
        let a = r.attention.as_ref().unwrap();
        for i in 0..a.rows() {
            assert!((a.row_slice(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let mut sel = r.selected.clone();
        sel.sort();
        sel.dedup();
        assert_eq!(sel.len(), 3);
        assert!(r.relevance.iter().all(|p| p.abs() <= n as f64 + 1e-12));
        // convex combination: bounded by the largest behavior max-norm
        let e_max = s
            .iter()
            .map(|b| crate::encoder::embed_behavior(&b.tokens, model.embedding()).unwrap())
            .map(|e| e.iter().fold(0.0f64, |m, x| m.max(x.abs())))
            .fold(0.0, f64::max);
        assert!(r.v.max_abs() <= e_max + 1e-12);
    }
}

#[test]
fn topk_matches_sort_oracle_with_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..1000 {
        let m = rng.gen_range(1..12);
        let k = rng.gen_range(1..=m);
        // small integer grid forces ties
        let p: Vec<f64> = (0..m).map(|_| rng.gen_range(0..4) as f64 * 0.5).collect();
        let mut oracle: Vec<(f64, usize)> = p.iter().copied().zip(0..).collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let want: Vec<usize> = oracle.iter().take(k).map(|x| x.1).collect();
        assert_eq!(select_topk(&p, k).unwrap(), want);
    }
}

#[test]
fn selection_invariant_to_row_rescaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..50 {
        let model = Model::init(cfg(30, 8, 6, 2), trial).unwrap();
        let s = random_set(&mut rng, 30, 6);
        let before = model.encode(&s).unwrap().selected;
        let mut scaled = model.clone();
        let row = rng.gen_range(0..6);
        let factor = rng.gen_range(0.1..10.0);
        let d = scaled.params.get_mut(DICTIONARY).unwrap();
        d.row_slice_mut(row).iter_mut().for_each(|v| *v *= factor);
        assert_eq!(scaled.encode(&s).unwrap().selected, before);
    }
}

fn objective_on(model: &Model, loss: &LossConfig, anchors: &[Vec<Behavior>], targets: &[Vec<Behavior>]) -> (f64, Gradients, Vec<usize>) {
    let mut g = Graph::new();
    let vars = ModelVars::trainable(&mut g, &model.params);
    let a: Vec<&[Behavior]> = anchors.iter().map(Vec::as_slice).collect();
    let t: Vec<&[Behavior]> = targets.iter().map(Vec::as_slice).collect();
    let obj = batch_objective(&mut g, &vars, &model.config, loss, &a, &t).unwrap();
    let mut selected: Vec<usize> = obj.anchors.iter().chain(&obj.targets).flat_map(|e| e.selected.clone()).collect();
    selected.sort();
    selected.dedup();
    (g.value(obj.total).item(), g.backward(obj.total).unwrap(), selected)
}

use crate::autograd::Gradients;

#[test]
fn gradient_sparsity_on_dictionary() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let model = Model::init(cfg(20, 6, 12, 2), 11).unwrap();
    let anchors: Vec<_> = (0..2).map(|_| random_set(&mut rng, 20, 4)).collect();
    let targets: Vec<_> = (0..2).map(|_| random_set(&mut rng, 20, 4)).collect();

    let off = LossConfig { gamma: 0.0, ..LossConfig::default() };
    let (_, grads, selected) = objective_on(&model, &off, &anchors, &targets);
    assert!(selected.len() < 12);
    let gd = &grads[DICTIONARY];
    for r in 0..12 {
        let zero = gd.row_slice(r).iter().all(|&v| v == 0.0);
        if !selected.contains(&r) {
            assert!(zero, "unselected row {r} got gradient");
        }
    }
    assert!(selected.iter().any(|&r| gd.row_slice(r).iter().any(|&v| v != 0.0)));

    let on = LossConfig::default();
    let (_, grads, _) = objective_on(&model, &on, &anchors, &targets);
    for r in 0..12 {
        assert!(grads[DICTIONARY].row_slice(r).iter().any(|&v| v != 0.0), "row {r}");
    }
}

#[test]
fn loss_weight_switches() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model = Model::init(cfg(20, 6, 5, 2), 13).unwrap();
    let anchors: Vec<_> = (0..3).map(|_| random_set(&mut rng, 20, 4)).collect();
    let targets: Vec<_> = (0..3).map(|_| random_set(&mut rng, 20, 4)).collect();
    let a: Vec<&[Behavior]> = anchors.iter().map(Vec::as_slice).collect();
    let t: Vec<&[Behavior]> = targets.iter().map(Vec::as_slice).collect();
    let mut g = Graph::new();
    let vars = ModelVars::constants(&mut g, &model.params);
    let both = batch_objective(&mut g, &vars, &model.config, &LossConfig::default(), &a, &t).unwrap();
    let (c, r) = (g.value(both.contrastive).item(), g.value(both.regularizer.unwrap()).item());
    assert_eq!(g.value(both.total).item(), c + r);
    let no_beta = LossConfig { beta: 0.0, ..LossConfig::default() };
    let o = batch_objective(&mut g, &vars, &model.config, &no_beta, &a, &t).unwrap();
    assert_eq!(g.value(o.total).item(), r);
    // per-anchor terms are non-negative
    assert!(g.value(o.per_anchor).data().iter().all(|&x| x >= 0.0));
}

#[test]
fn end_to_end_gradients_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for trial in 0..4 {
        let model = Model::init(cfg(12, 4, 6, 2), 100 + trial).unwrap();
        let anchors: Vec<_> = (0..3).map(|_| random_set(&mut rng, 12, 4)).collect();
        let targets: Vec<_> = (0..3).map(|_| random_set(&mut rng, 12, 5)).collect();
        let loss = LossConfig::default();
        let r = grad_check(&model.params, 1e-5, |g, vars| {
            let mv = ModelVars::from_map(g, vars)?;
            let a: Vec<&[Behavior]> = anchors.iter().map(Vec::as_slice).collect();
            let t: Vec<&[Behavior]> = targets.iter().map(Vec::as_slice).collect();
            Ok(batch_objective(g, &mv, &model.config, &loss, &a, &t)?.total)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "trial {trial}: {} at {:?}", r.max_rel_error, r.worst);
    }
}

#[test]
fn concat_equals_best_match_for_single_interest() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut c = cfg(20, 6, 5, 1);
    let icl = Model::init(c, 3).unwrap();
    c.variant = Variant::IdConcatCl;
    let concat = Model::init(c, 3).unwrap();
    assert_eq!(icl.params, concat.params);
    let anchors: Vec<_> = (0..4).map(|_| random_set(&mut rng, 20, 4)).collect();
    let targets: Vec<_> = (0..4).map(|_| random_set(&mut rng, 20, 4)).collect();
    let (l1, g1, _) = objective_on(&icl, &LossConfig::default(), &anchors, &targets);
    let (l2, g2, _) = objective_on(&concat, &LossConfig::default(), &anchors, &targets);
    assert!((l1 - l2).abs() < 1e-12);
    for (k, v) in &g1 {
        for (a, b) in v.data().iter().zip(g2[k].data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn maxpool_single_behavior_is_its_embedding() {
    let mut c = cfg(20, 6, 5, 2);
    c.variant = Variant::MaxpoolCl;
    let model = Model::init(c, 3).unwrap();
    assert!(model.dictionary().is_none());
    let b = Behavior { ts: 0, tokens: vec![3, 7] };
    let r = model.encode(std::slice::from_ref(&b)).unwrap();
    let e = crate::encoder::embed_behavior(&b.tokens, model.embedding()).unwrap();
    assert_eq!(r.v.data(), e.as_slice());
    assert!(r.selected.is_empty());
}

#[test]
fn rescue_and_shape_checks() {
    let mut model = Model::init(cfg(20, 6, 5, 2), 3).unwrap();
    model.params.get_mut(DICTIONARY).unwrap().row_slice_mut(2).iter_mut().for_each(|v| *v = 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(model.rescue_dead_rows(&mut rng), 1);
    assert!(model.dictionary().unwrap().row_norm(2) > 1e-8);

    let wrong = cfg(20, 8, 5, 2);
    assert!(matches!(Model::from_params(wrong, model.params.clone()), Err(Error::Config(_))));
    assert!(Model::init(cfg(20, 6, 2, 3), 0).is_err());
}

#[test]
fn empty_set_is_rejected() {
    let model = Model::init(cfg(20, 6, 5, 2), 3).unwrap();
    assert!(matches!(model.encode(&[]), Err(Error::Contract(_))));
}

#[test]
fn random_config_suite_passes() {
    let r = run_grad_suite(&GradSuiteConfig { cases: 6, seed: 3, ..GradSuiteConfig::default() }).unwrap();
    assert_eq!(r.cases.len(), 12);
    assert!(r.passed(), "{:?}", r.cases.iter().map(|c| c.max_rel_error).collect::<Vec<_>>());
}

#[test]
fn suite_rejects_bad_bounds() {
    let r = run_grad_suite(&GradSuiteConfig { max_dict: 1, ..GradSuiteConfig::default() });
    assert!(matches!(r, Err(Error::Config(_))));
}
