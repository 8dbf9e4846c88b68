//! Central finite-difference checks of reverse-mode gradients.

use crate::nn::{ParamStore, Session};
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

/// Step for central differences.
pub const STEP: f64 = 1e-6;

/// Worst agreement between analytic and numeric partial derivatives.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// `max |a − n| / max(|a| + |n|, 1e-3)` over all checked entries;
    /// tiny derivatives are effectively compared absolutely.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Location of the worst entry, `input[index]` or the parameter name.
    pub worst: String,
}

impl GradReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            checked: 0,
            worst: String::new(),
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-3);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = err;
            self.worst = at();
        }
    }

    /// Combine two reports.
    pub fn merge(mut self, other: GradReport) -> Self {
        if other.max_rel_error > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self
    }
}

/// Reduce any tensor to a scalar with fixed, irregular weights so every
/// output entry contributes a distinct amount.
pub fn probe(g: &mut Graph, v: Var) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let n = g.value(v).len();
    let w = (0..n)
        .map(|k| ((k as f64) * 0.7 + 0.3).sin() + 0.1)
        .collect();
    let w = g.constant(shape, w)?;
    let y = g.mul(v, w)?;
    g.sum_all(y)
}

fn scalar(g: &Graph, v: Var) -> Result<f64> {
    match g.value(v) {
        [x] => Ok(*x),
        _ => Err(TensorError::NonScalarRoot(g.shape(v).to_vec())),
    }
}

/// Check `d f / d inputs` for a function of leaf tensors.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(&t.clone().with_grad()))
        .collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
        })
        .collect();
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
        let out = f(&mut g, &vars)?;
        scalar(&g, out)
    };
    let mut report = GradReport::new();
    let mut work = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        for (i, &a) in analytic[k].iter().enumerate() {
            let x = t.data()[i];
            work[k].data_mut()[i] = x + STEP;
            let up = eval(&work)?;
            work[k].data_mut()[i] = x - STEP;
            let down = eval(&work)?;
            work[k].data_mut()[i] = x;
            report.record(a, (up - down) / (2.0 * STEP), || {
                format!("input{k}[{i}]")
            });
        }
    }
    Ok(report)
}

/// Check `d f / d θ` for every parameter in `store`.
pub fn check_params<F>(store: &ParamStore, f: F) -> Result<GradReport>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let analytic = {
        let mut s = Session::new(store, true);
        let out = f(&mut s)?;
        s.g.backward(out)?;
        s.param_grads()
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut s = Session::new(store, false);
        let out = f(&mut s)?;
        scalar(&s.g, out)
    };
    let mut report = GradReport::new();
    let mut work = store.clone();
    let ids: Vec<_> = store.ids().collect();
    for (k, &id) in ids.iter().enumerate() {
        for (i, &a) in analytic[k].iter().enumerate() {
            let x = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = x + STEP;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = x - STEP;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = x;
            report.record(a, (up - down) / (2.0 * STEP), || {
                format!("{}[{i}]", store.name(id))
            });
        }
    }
    Ok(report)
}
