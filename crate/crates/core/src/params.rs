//! Uniform named access to model parameters.
//!
//! Every parameter struct exposes its tensors through [`ParamVisit`] under
//! stable dotted names (documented in `docs/formats.md`). The optimizer,
//! checkpoints, the stage-1 freeze assertion, and the gradient checker all
//! walk parameters through this trait, so the names are the single source of
//! parameter identity.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub trait ParamVisit<S: Scalar> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<S>));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>));
}

pub fn collect_params<S: Scalar>(
    p: &dyn ParamVisit<S>,
    prefix: &str,
) -> Vec<(String, Tensor<S>)> {
    let mut out = Vec::new();
    p.visit_params(prefix, &mut |name, t| out.push((name, t.clone())));
    out
}

pub fn param_names<S: Scalar>(p: &dyn ParamVisit<S>, prefix: &str) -> Vec<String> {
    let mut out = Vec::new();
    p.visit_params(prefix, &mut |name, _| out.push(name));
    out
}

/// Total scalar count across all tensors.
pub fn param_count<S: Scalar>(p: &dyn ParamVisit<S>) -> usize {
    let mut n = 0;
    p.visit_params("", &mut |_, t| n += t.len());
    n
}

/// Join a prefix and a leaf name with a dot, tolerating an empty prefix.
pub fn join(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}

/// Ad-hoc named parameter bag; handy for gradient-checking small graphs that
/// do not belong to a model struct.
#[derive(Clone, Debug, Default)]
pub struct FlatParams<S: Scalar> {
    entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> FlatParams<S> {
    pub fn new() -> Self {
        FlatParams {
            entries: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<S>) -> &mut Self {
        self.entries.push((name.to_string(), t));
        self
    }

    pub fn get(&self, name: &str) -> &Tensor<S> {
        &self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("no parameter '{name}'"))
            .1
    }
}

impl<S: Scalar> ParamVisit<S> for FlatParams<S> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<S>)) {
        for (name, t) in &self.entries {
            f(join(prefix, name), t);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        for (name, t) in &mut self.entries {
            f(join(prefix, name), t);
        }
    }
}
