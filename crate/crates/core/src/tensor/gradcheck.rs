//! Central-difference verification of reverse-mode gradients.

use super::{Graph, Mode, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Seed used for every graph built during a check, so dropout masks agree
/// between the analytic pass and all finite-difference probes.
const CHECK_SEED: u64 = 0x5eed;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(analytic, numeric, relative error)` per checked coordinate.
    pub per_coord: Vec<(f64, f64, f64)>,
}

impl GradCheckReport {
    fn from_pairs(per_coord: Vec<(f64, f64, f64)>) -> Self {
        let max_rel_err = per_coord.iter().map(|c| c.2).fold(0.0, f64::max);
        Self {
            max_rel_err,
            per_coord,
        }
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval_scalar(g: &Graph<f64>, out: Var) -> Result<f64> {
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::Invalid(format!(
            "grad_check: function returned shape {:?}",
            v.shape()
        )));
    }
    let x = v.data()[0];
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(x)
}

/// Compares the gradient of scalar `f` at `point` with central differences
/// `(f(x+h) − f(x−h)) / 2h`, coordinate by coordinate.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let run = |p: &Tensor<f64>| -> Result<(Graph<f64>, Var, Var)> {
        let mut g = Graph::new(Mode::Train, CHECK_SEED);
        let x = g.leaf(p.clone(), true);
        let out = f(&mut g, x)?;
        Ok((g, x, out))
    };
    let (g, x, out) = run(point)?;
    eval_scalar(&g, out)?;
    let analytic = g.backward(out)?.wrt(x, point.shape());
    let mut pairs = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let (gp, _, op) = run(&plus)?;
        let (gm, _, om) = run(&minus)?;
        let numeric = (eval_scalar(&gp, op)? - eval_scalar(&gm, om)?) / (2.0 * h);
        let a = analytic.data()[i];
        pairs.push((a, numeric, rel_err(a, numeric)));
    }
    Ok(GradCheckReport::from_pairs(pairs))
}

/// Same check over the trainable parameters of a model. `f` must build the
/// full computation from `store` on the supplied graph. `names` selects
/// parameters (all trainable ones when empty); `stride` checks every
/// `stride`-th coordinate of each.
pub fn grad_check_params<F>(
    store: &ParamStore<f64>,
    names: &[&str],
    f: F,
    h: f64,
    stride: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let stride = stride.max(1);
    let run = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(Mode::Train, CHECK_SEED);
        let out = f(&mut g, s)?;
        eval_scalar(&g, out)
    };
    let mut g = Graph::new(Mode::Train, CHECK_SEED);
    let out = f(&mut g, store)?;
    eval_scalar(&g, out)?;
    let grads = g.backward(out)?.param_grads(&g);

    let selected: Vec<String> = store
        .iter()
        .filter(|p| p.trainable && (names.is_empty() || names.contains(&p.name.as_str())))
        .map(|p| p.name.clone())
        .collect();
    let mut pairs = Vec::new();
    let mut probe = store.clone();
    for name in &selected {
        let len = store.get(name)?.len();
        let zero = Tensor::zeros(store.get(name)?.shape());
        let analytic = grads.get(name).unwrap_or(&zero);
        for i in (0..len).step_by(stride) {
            let orig = store.get(name)?.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + h;
            let fp = run(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig - h;
            let fm = run(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[i];
            pairs.push((a, numeric, rel_err(a, numeric)));
        }
    }
    Ok(GradCheckReport::from_pairs(pairs))
}
