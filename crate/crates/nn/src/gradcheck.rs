//! Central finite-difference gradient checks.
//!
//! The comparison is norm-wise: `|analytic - numeric| / max(|analytic| +
//! |numeric|, 1e-6)`. The floor covers gradients that are identically zero
//! (attention key biases, for one), where both sides are rounding noise.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

const FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / (na + nn).max(FLOOR)
}

/// A tracked input matrix for [`check_inputs`].
#[derive(Clone, Debug)]
pub struct Input {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Input {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }
}

fn eval(inputs: &[Input], build: &impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|i| g.input(i.rows, i.cols, i.data.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut g, &vars)?;
    Ok(g.scalar(loss))
}

/// Largest relative error over all inputs between the tape gradient of the
/// scalar built by `build` and central differences with step `h`.
pub fn check_inputs(inputs: &[Input], h: f64, build: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|i| g.variable(i.rows, i.cols, i.data.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (k, inp) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inp.data.len()]);
        let mut numeric = vec![0.0; inp.data.len()];
        let mut probe = inputs.to_vec();
        for e in 0..inp.data.len() {
            let x0 = inp.data[e];
            probe[k].data[e] = x0 + h;
            let fp = eval(&probe, &build)?;
            probe[k].data[e] = x0 - h;
            let fm = eval(&probe, &build)?;
            probe[k].data[e] = x0;
            numeric[e] = (fp - fm) / (2.0 * h);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Same as [`check_inputs`] but differentiates with respect to every
/// unfrozen parameter in `store`.
pub fn check_params(store: &ParamStore, h: f64, build: impl Fn(&mut Graph, &ParamStore) -> Result<Var>) -> Result<f64> {
    let mut work = store.clone();
    work.zero_grad();
    let mut g = Graph::new();
    let loss = build(&mut g, &work)?;
    let grads = g.backward(loss)?;
    g.accumulate_param_grads(&grads, &mut work);
    let names: Vec<String> = store.iter().filter(|p| !p.frozen).map(|p| p.name.clone()).collect();
    let mut worst: f64 = 0.0;
    for name in names {
        let p = work.get(&name)?;
        let analytic = p.grad.clone().unwrap_or_else(|| vec![0.0; p.value.len()]);
        let mut numeric = vec![0.0; analytic.len()];
        let mut probe = store.clone();
        for e in 0..analytic.len() {
            let x0 = probe.get(&name)?.value.data()[e];
            probe.get_mut(&name)?.value.data_mut()[e] = x0 + h;
            let mut gp = Graph::new();
            let lp = build(&mut gp, &probe)?;
            let fp = gp.scalar(lp);
            probe.get_mut(&name)?.value.data_mut()[e] = x0 - h;
            let mut gm = Graph::new();
            let lm = build(&mut gm, &probe)?;
            let fm = gm.scalar(lm);
            probe.get_mut(&name)?.value.data_mut()[e] = x0;
            numeric[e] = (fp - fm) / (2.0 * h);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Reduces a node to a scalar via a fixed pseudo-random weighting so that
/// every output entry contributes a distinct amount.
pub fn weighted_scalar(g: &mut Graph, x: Var) -> Result<Var> {
    let (r, c) = g.dims(x);
    let w: Vec<f64> = (0..r * c).map(|i| ((i as f64 * 0.618_033_988_7).fract() - 0.5) * 2.0).collect();
    let wv = g.input(r, c, w)?;
    let p = g.mul(x, wv)?;
    Ok(g.sum(p))
}
