//! Named parameter access shared by every trainable module.

use std::collections::HashMap;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A module that owns named trainable tensors.
pub trait Parameters<T: Scalar> {
    /// Parameters in a fixed order with names unique within the module.
    fn parameters(&self) -> Vec<(String, &Tensor<T>)>;
    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Graph handles for one module's parameters, keyed by unprefixed name.
#[derive(Clone, Debug)]
pub struct Bound {
    prefix: String,
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter `{}{name}` was not bound", self.prefix))
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn full_name(&self, name: &str) -> String {
        format!("{}{name}", self.prefix)
    }
}

/// Inserts every parameter of `module` into `g` as a named leaf
/// `prefix + name`.
pub fn bind<T: Scalar, P: Parameters<T> + ?Sized>(
    module: &P,
    g: &mut Graph<T>,
    prefix: &str,
    trainable: bool,
) -> Result<Bound> {
    let mut vars = HashMap::new();
    for (name, t) in module.parameters() {
        let v = g.input(&format!("{prefix}{name}"), t.clone(), trainable)?;
        vars.insert(name, v);
    }
    Ok(Bound { prefix: prefix.to_string(), vars })
}

/// Copies the gradients of a bound module out of `g`, in parameter order.
pub fn gradients<T: Scalar, P: Parameters<T> + ?Sized>(module: &P, g: &Graph<T>, bound: &Bound) -> Vec<Tensor<T>> {
    module.parameters().into_iter().map(|(name, _)| g.grad(bound.get(&name))).collect()
}

/// Plain gradient descent `p <- p - lr * g` over matching tensors.
pub fn sgd_update<T: Scalar, P: Parameters<T> + ?Sized>(module: &mut P, grads: &[Tensor<T>], lr: f64) -> Result<()> {
    let params = module.parameters_mut();
    if params.len() != grads.len() {
        return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for ((name, p), g) in params.into_iter().zip(grads) {
        sgd_step(p, g, lr).map_err(|e| Error::Shape(format!("{name}: {e}")))?;
    }
    Ok(())
}

/// Elementwise `p <- p - lr * g`.
pub fn sgd_step<T: Scalar>(param: &mut Tensor<T>, grad: &Tensor<T>, lr: f64) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::Shape(format!("parameter {:?} vs gradient {:?}", param.shape(), grad.shape())));
    }
    if !(lr >= 0.0) {
        return Err(Error::Config(format!("learning rate must be non-negative, got {lr}")));
    }
    let lr = T::of(lr);
    for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= lr * g;
    }
    Ok(())
}
