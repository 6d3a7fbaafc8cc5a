//! Central finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

/// Worst disagreement for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst entry with its analytic and numeric values.
    pub worst: (usize, f64, f64),
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn param(&self, name: &str) -> Option<&ParamCheck> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of `loss_fn` against central differences
/// `(f(θ+eps) − f(θ−eps)) / 2eps`, entry by entry, over every parameter.
///
/// `loss_fn` must build a scalar loss on the graph it is handed, reading
/// parameters through [`Graph::param`].
pub fn grad_check<F>(store: &ParamStore, eps: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    grad_check_subset(store, eps, store.ids(), loss_fn)
}

/// As [`grad_check`], restricted to the listed parameters.
pub fn grad_check_subset<F>(
    store: &ParamStore,
    eps: f64,
    ids: impl IntoIterator<Item = ParamId>,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::with_params(store);
        let loss = loss_fn(&mut g)?;
        let grads = g.backward(loss)?;
        g.param_grads(&grads)
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let loss = loss_fn(&mut g)?;
        g.value(loss).item()
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        params: Vec::new(),
    };
    for id in ids {
        let mut check = ParamCheck {
            name: store.name(id).to_string(),
            max_rel_error: 0.0,
            worst: (0, 0.0, 0.0),
        };
        for k in 0..store.get(id).numel() {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).data()[k];
            let err = relative_error(a, numeric);
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst = (k, a, numeric);
            }
        }
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::vector(vec![3.0])).unwrap();
        let report = grad_check(&store, 1e-5, |g| {
            let v = g.param(x);
            let sq = g.mul(v, v)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::vector(vec![0.3, -0.4])).unwrap();
        let report = grad_check(&store, 1e-5, |g| {
            let _ = g.param(x);
            let c = g.constant(Tensor::scalar(2.5));
            g.sum(c)
        })
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }
}
