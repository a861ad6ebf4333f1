//! Central finite-difference validation of analytic gradients.

use super::graph::{Graph, GraphError, GraphResult, Var};
use super::tensor::Tensor;
use crate::scalar::Scalar;

/// Outcome of checking one leaf tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafCheck {
    /// Max over coordinates of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// Coordinate that produced the maximum.
    pub worst_index: usize,
    pub analytic_norm: f64,
    pub coordinates: usize,
}

impl<T: Scalar> Graph<T> {
    pub(crate) fn set_leaf_value(&mut self, v: Var, value: Tensor<T>) {
        self.set_value_unchecked(v, value);
    }
}

/// Compares the gradient of `loss` w.r.t. the leaf `leaf` against central
/// differences with step `step`.
///
/// Detached nodes keep their values while the leaf is perturbed, so the
/// check measures exactly the derivative that `backward` computes. The graph
/// is restored to its original values on return.
pub fn check_gradient<T: Scalar>(graph: &mut Graph<T>, loss: Var, leaf: Var, step: f64) -> GraphResult<LeafCheck> {
    if step <= 0.0 || !step.is_finite() {
        return Err(GraphError::Invalid { node: leaf.index(), op: "check_gradient", detail: format!("step {step}") });
    }
    let original = graph.value(leaf).clone();
    if original.is_empty() {
        return Err(GraphError::Degenerate);
    }
    if !original.all_finite() {
        return Err(GraphError::NonFinite { node: leaf.index(), op: "leaf" });
    }
    graph.recompute(true)?;
    graph.backward(loss)?;
    let analytic = graph.grad(leaf);
    let h = T::of(step);

    let mut worst = (0.0f64, 0usize);
    let mut result = Ok(());
    for i in 0..original.len() {
        let mut eval_at = |delta: T| -> GraphResult<f64> {
            let mut t = original.clone();
            t.data_mut()[i] += delta;
            graph.set_leaf_value(leaf, t);
            graph.recompute(true)?;
            Ok(graph.scalar_value(loss).map(Scalar::as_f64).unwrap_or(f64::NAN))
        };
        let plus = eval_at(h);
        let minus = eval_at(-h);
        let (plus, minus) = match (plus, minus) {
            (Ok(p), Ok(m)) => (p, m),
            (Err(e), _) | (_, Err(e)) => {
                result = Err(e);
                break;
            }
        };
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[i].as_f64();
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if err > worst.0 || err.is_nan() {
            worst = (err, i);
        }
    }
    graph.set_leaf_value(leaf, original);
    graph.recompute(true)?;
    result?;
    Ok(LeafCheck {
        max_rel_error: worst.0,
        worst_index: worst.1,
        analytic_norm: analytic.l2_norm().as_f64(),
        coordinates: analytic.len(),
    })
}

/// Checks every named trainable leaf whose name starts with `prefix`, and
/// returns the worst error over the group.
pub fn check_group<T: Scalar>(graph: &mut Graph<T>, loss: Var, prefix: &str, step: f64) -> GraphResult<Option<f64>> {
    let mut leaves: Vec<(String, Var)> = graph
        .input_names()
        .filter(|(name, v)| name.starts_with(prefix) && graph.requires_grad(*v))
        .map(|(n, v)| (n.to_string(), v))
        .collect();
    leaves.sort();
    let mut worst: Option<f64> = None;
    for (_, v) in leaves {
        let r = check_gradient(graph, loss, v, step)?;
        worst = Some(worst.map_or(r.max_rel_error, |w| w.max(r.max_rel_error)));
    }
    Ok(worst)
}
