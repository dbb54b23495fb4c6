use crate::autograd::{Gradients, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bias-corrected Adam moments for a parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.rows(), t.cols());
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|(k, t)| (k.clone(), zeros(t))).collect(),
            v: params.iter().map(|(k, t)| (k.clone(), zeros(t))).collect(),
        }
    }
}

pub fn adam_step(params: &mut ParamSet, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::contract(format!("no gradient for parameter {name}")))?;
        let m = state
            .m
            .get(name)
            .ok_or_else(|| Error::contract(format!("no optimizer state for {name}")))?;
        if g.shape() != p.shape() || m.shape() != p.shape() || state.v[name].shape() != p.shape() {
            return Err(Error::contract(format!(
                "shape mismatch for {name}: param {:?}, grad {:?}, moment {:?}",
                p.shape(),
                g.shape(),
                m.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state.m.get_mut(name).unwrap().data_mut();
        let v = state.v.get_mut(name).unwrap().data_mut();
        for (((pi, mi), vi), gi) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *pi -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Snap every value to the nearest `f32`, so snapshots survive 32-bit storage exactly.
pub fn round_to_f32(set: &mut ParamSet) {
    for t in set.values_mut() {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn single(name: &str, t: Tensor) -> ParamSet {
        [(name.to_string(), t)].into()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single("x", Tensor::row(vec![1.0, -2.0]));
        let before = p.clone();
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &single("x", Tensor::zeros(1, 2)), &mut s, 0.1).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.02, 1e3] {
            let mut p = single("x", Tensor::scalar(0.5));
            let mut s = AdamState::new(&p);
            adam_step(&mut p, &single("x", Tensor::scalar(g)), &mut s, 0.001).unwrap();
            let moved = (p["x"].item() - 0.5).abs();
            assert!((moved - 0.001).abs() < 1e-8, "g={g}: moved {moved}");
        }
    }

    #[test]
    fn minimizes_a_parabola() {
        let mut p = single("x", Tensor::scalar(1.0));
        let mut s = AdamState::new(&p);
        for _ in 0..100 {
            let g = 2.0 * p["x"].item();
            adam_step(&mut p, &single("x", Tensor::scalar(g)), &mut s, 0.1).unwrap();
        }
        assert!(p["x"].item().abs() < 0.05, "{}", p["x"].item());
    }

    /// Scalar textbook Adam, written out independently.
    fn reference(x0: f64, grads: &[f64], lr: f64) -> f64 {
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        for (t, g) in grads.iter().enumerate() {
            let t = t as f64 + 1.0;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powf(t));
            let vh = v / (1.0 - 0.999f64.powf(t));
            x -= lr * mh / (vh.sqrt() + 1e-8);
        }
        x
    }

    #[test]
    fn matches_reference_adam() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x0 = rng.gen_range(-2.0..2.0);
            let grads: Vec<f64> = (0..30).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let mut p = single("x", Tensor::scalar(x0));
            let mut s = AdamState::new(&p);
            for g in &grads {
                adam_step(&mut p, &single("x", Tensor::scalar(*g)), &mut s, 0.01).unwrap();
            }
            assert!((p["x"].item() - reference(x0, &grads, 0.01)).abs() < 1e-10);
        }
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut p = single("x", Tensor::row(vec![1.0, 2.0]));
        let mut s = AdamState::new(&p);
        let r = adam_step(&mut p, &single("x", Tensor::scalar(1.0)), &mut s, 0.1);
        assert!(matches!(r, Err(Error::Contract(_))));
        assert_eq!(s.step, 0);
    }
}
