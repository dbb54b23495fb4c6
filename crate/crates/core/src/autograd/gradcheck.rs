use std::collections::BTreeMap;

use super::{Gradients, Graph, ParamSet, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over entries of |analytic - numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    /// Leaf name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries: usize,
    pub analytic: Gradients,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

fn evaluate<F>(point: &ParamSet, f: &F) -> Result<(Graph, Var)>
where
    F: Fn(&mut Graph, &BTreeMap<String, Var>) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: BTreeMap<String, Var> = point
        .iter()
        .map(|(name, t)| (name.clone(), g.param(name.clone(), t.clone())))
        .collect();
    let root = f(&mut g, &vars)?;
    Ok((g, root))
}

fn scalar_value(g: &Graph, root: Var, what: &str) -> Result<f64> {
    let t = g.value(root);
    if !t.is_scalar() {
        return Err(Error::contract("grad_check function must return a scalar"));
    }
    let v = t.item();
    if !v.is_finite() {
        return Err(Error::Numeric {
            node: what.to_string(),
            message: format!("function value {v} is not finite"),
        });
    }
    Ok(v)
}

/// Compare reverse-mode gradients of `f` at `point` against central
/// differences with step `h`.
pub fn grad_check<F>(point: &ParamSet, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &BTreeMap<String, Var>) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::config(format!("finite-difference step must be positive, got {h}")));
    }
    let (g, root) = evaluate(point, &f)?;
    scalar_value(&g, root, "unperturbed point")?;
    let analytic = g.backward(root)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries: 0,
        analytic,
    };
    let mut probe = point.clone();
    for (name, base) in point {
        for i in 0..base.len() {
            let x = base.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = x + h;
            let (gp, rp) = evaluate(&probe, &f)?;
            let fp = scalar_value(&gp, rp, &format!("{name}[{i}] + h"))?;
            probe.get_mut(name).unwrap().data_mut()[i] = x - h;
            let (gm, rm) = evaluate(&probe, &f)?;
            let fm = scalar_value(&gm, rm, &format!("{name}[{i}] - h"))?;
            probe.get_mut(name).unwrap().data_mut()[i] = x;

            let numeric = (fp - fm) / (2.0 * h);
            let a = report.analytic[name].data()[i];
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            report.entries += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((name.clone(), i));
                }
            }
        }
    }
    Ok(report)
}
