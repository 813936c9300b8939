//! Central finite-difference gradient verification (64-bit only).
//!
//! Values detached during the analytic pass are replayed unchanged during
//! the perturbed passes, so the numeric side differentiates exactly the
//! paths backward declares differentiable.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Relative error is `|a − n| / max(|a|, |n|, floor)`.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// (input index, element index, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            checked: 0,
            worst: None,
        }
    }

    fn record(&mut self, input: usize, elem: usize, analytic: f64, numeric: f64, floor: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        let rel = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if self.worst.is_none() || rel > self.max_rel_error {
            self.max_rel_error = rel;
            self.worst = Some((input, elem, analytic, numeric));
        }
    }
}

/// Checks `f` with respect to every element of every input tensor.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.input(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let frozen = g.frozen_values().to_vec();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::replaying(frozen.clone());
        let vars = perturbed
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheckReport::new();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[i].shape());
        let analytic = grads.get(*v).unwrap_or(&zeros).clone();
        for e in 0..inputs[i].numel() {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + opts.step;
            let up = eval(&work)?;
            work[i].data_mut()[e] = orig - opts.step;
            let down = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            report.record(i, e, analytic.data()[e], numeric, opts.floor);
        }
    }
    Ok(report)
}

/// Checks a loss built from stored parameters with respect to every
/// parameter element (or the first `limit` elements of each parameter).
pub fn grad_check_params<F>(
    store: &mut ParamStore<f64>,
    f: F,
    opts: GradCheckOptions,
    limit: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    let frozen = g.frozen_values().to_vec();
    let mut analytic: Vec<Tensor<f64>> = store
        .iter()
        .map(|(_, p)| Tensor::zeros(p.value.shape()))
        .collect();
    for (id, var) in g.bound_params() {
        if let Some(t) = grads.get(var) {
            analytic[id.index()] = t.clone();
        }
    }
    drop(g);

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::replaying(frozen.clone());
        let loss = f(&mut g, store)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheckReport::new();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = store.get(id).value.numel();
        for e in 0..limit.map_or(n, |l| l.min(n)) {
            let orig = store.get(id).value.data()[e];
            store.get_mut(id).value.data_mut()[e] = orig + opts.step;
            let up = eval(store)?;
            store.get_mut(id).value.data_mut()[e] = orig - opts.step;
            let down = eval(store)?;
            store.get_mut(id).value.data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            report.record(id.index(), e, analytic[id.index()].data()[e], numeric, opts.floor);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::from_f64(&[1], &[3.0]).unwrap();
        let report = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.sum(sq)
            },
            &[x],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        let (_, _, analytic, numeric) = report.worst.unwrap();
        assert_eq!(analytic, 6.0);
        assert!((numeric - 6.0).abs() < 1e-8);
    }

    #[test]
    fn detached_path_is_excluded_on_both_sides() {
        // f(x) = sum(x * detach(x)): analytic gradient is detach(x) = x only.
        let x = Tensor::from_f64(&[3], &[0.5, -1.5, 2.0]).unwrap();
        let mut g = Graph::new();
        let v = g.input(x.clone()).unwrap();
        let d = g.detach(v).unwrap();
        let p = g.mul(v, d).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(v).unwrap().data(), x.data());
        assert!(grads.get(d).is_none());

        let report = grad_check(
            |g, v| {
                let d = g.detach(v[0])?;
                let p = g.mul(v[0], d)?;
                g.sum(p)
            },
            &[x],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }
}
