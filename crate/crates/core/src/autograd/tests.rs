use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::uniform(r, c, 1.0, rng)
}

/// Contract a tensor-valued node against fixed random weights so every
/// output entry contributes a distinct coefficient.
fn contract(g: &mut Graph, y: Var, rng: &mut ChaCha8Rng) -> Var {
    let [r, c] = g.shape(y);
    let w = g.constant(rand_tensor(rng, r, c));
    let p = g.mul(y, w);
    g.sum(p)
}

type Build = fn(&mut Graph, &BTreeMap<String, Var>) -> Var;

fn check_primitive(name: &str, shapes: &[(&str, usize, usize)], positive: bool, build: Build) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA11CE ^ name.len() as u64);
    for trial in 0..100 {
        let mut point = ParamSet::new();
        for &(leaf, r, c) in shapes {
            let mut t = rand_tensor(&mut rng, r, c);
            if positive {
                t = t.map(|v| v.abs() + 0.5);
            }
            point.insert(leaf.to_string(), t);
        }
        let seed: u64 = rng.gen();
        let report = grad_check(&point, 1e-5, |g, vars| {
            let y = build(g, vars);
            let mut wrng = ChaCha8Rng::seed_from_u64(seed);
            Ok(contract(g, y, &mut wrng))
        })
        .unwrap();
        assert!(
            report.max_rel_error < 1e-6,
            "{name} trial {trial}: rel error {} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }
}

#[test]
fn sum_gives_ones() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::new(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads["x"], Tensor::ones(2, 3));
}

#[test]
fn half_squared_norm() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::row(vec![3.0, 4.0]));
    let sq = g.mul(x, x);
    let s = g.sum(sq);
    let root = g.scale(s, 0.5);
    assert_eq!(g.value(root).item(), 12.5);
    let grads = g.backward(root).unwrap();
    assert_eq!(grads["x"].data(), &[3.0, 4.0]);
}

#[test]
fn non_scalar_root_is_contract_error() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::ones(2, 2));
    let y = g.exp(x);
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));
}

#[test]
fn nan_names_the_node() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::row(vec![-1.0, 2.0]));
    let y = g.ln(x);
    let s = g.sum(y);
    match g.backward(s) {
        Err(Error::Numeric { node, .. }) => assert!(node.contains("ln"), "{node}"),
        other => panic!("expected numeric error, got {other:?}"),
    }
}

#[test]
fn unreachable_leaf_gets_zeros() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::ones(1, 2));
    let _unused = g.param("w", Tensor::ones(3, 3));
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads["w"], Tensor::zeros(3, 3));
}

#[test]
fn x_squared_grad_check() {
    let mut point = ParamSet::new();
    point.insert("x".into(), Tensor::scalar(2.0));
    let r = grad_check(&point, 1e-5, |g, v| Ok(g.mul(v["x"], v["x"]))).unwrap();
    assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
    assert!((r.analytic["x"].item() - 4.0).abs() < 1e-15);
}

#[test]
fn grad_check_rejects_bad_step() {
    let point = ParamSet::new();
    assert!(grad_check(&point, 0.0, |g, _| Ok(g.constant(Tensor::scalar(1.0)))).is_err());
}

#[test]
fn grad_check_reports_non_finite() {
    let mut point = ParamSet::new();
    point.insert("x".into(), Tensor::scalar(1e-6));
    // ln(x) is finite at x but not at x - h
    let r = grad_check(&point, 1e-5, |g, v| Ok(g.ln(v["x"])));
    assert!(matches!(r, Err(Error::Numeric { .. })));
}

#[test]
fn gather_scatters_only_to_selected_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let x = g.param("x", rand_tensor(&mut rng, 6, 3));
    let y = g.gather(x, &[4, 1, 4]);
    let root = contract(&mut g, y, &mut rng);
    let grads = g.backward(root).unwrap();
    for r in [0, 2, 3, 5] {
        assert!(grads["x"].row_slice(r).iter().all(|&v| v == 0.0));
    }
    assert!(grads["x"].row_slice(4).iter().all(|&v| v != 0.0));
}

#[test]
fn max_tie_routes_to_lowest_index() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::from_rows(&[vec![1.0, 5.0, 5.0], vec![2.0, 2.0, 2.0]]));
    let m = g.max_axis(x, 1);
    assert_eq!(g.value(m).data(), &[5.0, 2.0]);
    let s = g.sum(m);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads["x"].data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);

    let mut g = Graph::new();
    let x = g.param("x", Tensor::from_rows(&[vec![3.0, 1.0], vec![3.0, 0.0]]));
    let m = g.max_axis(x, 0);
    assert_eq!(g.value(m).data(), &[3.0, 1.0]);
    let s = g.sum(m);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads["x"].data(), &[1.0, 1.0, 0.0, 0.0]);
}

#[test]
fn backward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let a = rand_tensor(&mut rng, 4, 5);
    let b = rand_tensor(&mut rng, 5, 3);
    let run = || {
        let mut g = Graph::new();
        let x = g.param("a", a.clone());
        let y = g.param("b", b.clone());
        let m = g.matmul(x, y);
        let s = g.softmax(m, 1);
        let n = g.normalize_rows(s);
        let l = g.log_softmax(n, 0);
        let root = g.sum(l);
        g.backward(root).unwrap()
    };
    let first = run();
    for _ in 0..5 {
        let again = run();
        for (k, v) in &first {
            let bits: Vec<u64> = v.data().iter().map(|x| x.to_bits()).collect();
            let bits2: Vec<u64> = again[k].data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits, bits2);
        }
    }
}

#[test]
fn broadcast_forward() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let col = g.constant(Tensor::from_rows(&[vec![10.0], vec![20.0]]));
    let row = g.constant(Tensor::row(vec![1.0, -1.0]));
    let s = g.add(a, col);
    assert_eq!(g.value(s).data(), &[11.0, 12.0, 23.0, 24.0]);
    let m = g.mul(a, row);
    assert_eq!(g.value(m).data(), &[1.0, -2.0, 3.0, -4.0]);
}

#[test]
fn segment_mean_forward() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![2.0, 4.0], vec![4.0, 2.0], vec![0.0, 0.0], vec![1.0, 0.0]]));
    let m = g.segment_mean(x, &[0, 3, 4]);
    assert_eq!(g.value(m).data(), &[2.0, 2.0, 1.0, 0.0]);
}

#[test]
fn fd_add_sub_broadcast() {
    check_primitive("add", &[("a", 3, 4), ("b", 1, 4)], false, |g, v| g.add(v["a"], v["b"]));
    check_primitive("sub", &[("a", 3, 1), ("b", 3, 4)], false, |g, v| g.sub(v["a"], v["b"]));
}

#[test]
fn fd_mul_div() {
    check_primitive("mul", &[("a", 3, 4), ("b", 3, 1)], false, |g, v| g.mul(v["a"], v["b"]));
    check_primitive("div", &[("a", 2, 3), ("b", 1, 3)], true, |g, v| g.div(v["a"], v["b"]));
    check_primitive("div_scalar", &[("a", 2, 3), ("b", 1, 1)], true, |g, v| g.div(v["a"], v["b"]));
}

#[test]
fn fd_matmul_transpose_reshape() {
    check_primitive("matmul", &[("a", 3, 4), ("b", 4, 2)], false, |g, v| g.matmul(v["a"], v["b"]));
    check_primitive("transpose", &[("a", 3, 4)], false, |g, v| g.transpose(v["a"]));
    check_primitive("reshape", &[("a", 3, 4)], false, |g, v| g.reshape(v["a"], 2, 6));
}

#[test]
fn fd_reductions() {
    check_primitive("sum_axis0", &[("a", 3, 4)], false, |g, v| g.sum_axis(v["a"], 0));
    check_primitive("sum_axis1", &[("a", 3, 4)], false, |g, v| g.sum_axis(v["a"], 1));
    check_primitive("mean_axis0", &[("a", 3, 4)], false, |g, v| g.mean_axis(v["a"], 0));
    check_primitive("mean_axis1", &[("a", 3, 4)], false, |g, v| g.mean_axis(v["a"], 1));
    check_primitive("max_axis0", &[("a", 4, 3)], false, |g, v| g.max_axis(v["a"], 0));
    check_primitive("max_axis1", &[("a", 4, 3)], false, |g, v| g.max_axis(v["a"], 1));
    check_primitive("scale", &[("a", 2, 2)], false, |g, v| g.scale(v["a"], -2.5));
}

#[test]
fn fd_elementwise() {
    check_primitive("exp", &[("a", 3, 3)], false, |g, v| g.exp(v["a"]));
    check_primitive("ln", &[("a", 3, 3)], true, |g, v| g.ln(v["a"]));
    check_primitive("relu", &[("a", 4, 4)], false, |g, v| g.relu(v["a"]));
}

#[test]
fn fd_norms() {
    check_primitive("norm_axis0", &[("a", 3, 4)], false, |g, v| g.norm_axis(v["a"], 0));
    check_primitive("norm_axis1", &[("a", 3, 4)], false, |g, v| g.norm_axis(v["a"], 1));
    check_primitive("normalize_rows", &[("a", 3, 4)], false, |g, v| g.normalize_rows(v["a"]));
}

#[test]
fn fd_softmax() {
    check_primitive("softmax0", &[("a", 3, 4)], false, |g, v| g.softmax(v["a"], 0));
    check_primitive("softmax1", &[("a", 3, 4)], false, |g, v| g.softmax(v["a"], 1));
    check_primitive("log_softmax0", &[("a", 3, 4)], false, |g, v| g.log_softmax(v["a"], 0));
    check_primitive("log_softmax1", &[("a", 3, 4)], false, |g, v| g.log_softmax(v["a"], 1));
}

#[test]
fn fd_indexing() {
    check_primitive("gather", &[("a", 5, 3)], false, |g, v| g.gather(v["a"], &[3, 0, 3, 4]));
    check_primitive("segment_mean", &[("a", 6, 2)], false, |g, v| g.segment_mean(v["a"], &[0, 1, 4, 6]));
    check_primitive("concat", &[("a", 2, 3), ("b", 1, 3)], false, |g, v| g.concat_rows(&[v["a"], v["b"], v["a"]]));
}

#[test]
fn fd_cosine_similarity() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut point = ParamSet::new();
    point.insert("a".into(), rand_tensor(&mut rng, 1, 6));
    point.insert("b".into(), rand_tensor(&mut rng, 1, 6));
    let r = grad_check(&point, 1e-5, |g, v| {
        let na = g.normalize_rows(v["a"]);
        let nb = g.normalize_rows(v["b"]);
        let p = g.mul(na, nb);
        Ok(g.sum(p))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
}
