use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_FD_EPSILON: f64 = 1e-5;

/// Compares the recorded gradient of a scalar function with central finite
/// differences at `point`.
///
/// `build` receives a fresh graph and the leaf holding the point, and must
/// return the scalar output node. The result is
/// `max_i |analytic_i - numeric_i| / max(1, |analytic_i|, |numeric_i|)`.
pub fn grad_check<F>(build: F, point: &Tensor, fd_epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, NodeId) -> Result<NodeId>,
{
    let eval = |x: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.input(x);
        let out = build(&mut g, leaf)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::numeric("non-finite function value during gradient check"));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let leaf = g.input(point.clone());
    let out = build(&mut g, leaf)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .get(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));
    analytic.check_finite("analytic gradient")?;

    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += fd_epsilon;
        let mut minus = point.clone();
        minus.data_mut()[i] -= fd_epsilon;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * fd_epsilon);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
