use std::collections::HashMap;

use crate::error::{DiffError, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::rng::{standard_normal, SeededRng};
use crate::tensor::Tensor;

/// A named trainable array with its Adam moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Self {
            name: name.into(),
            value,
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            step: 0,
        }
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        self.push(Param::new(name, value))
    }

    pub fn push(&mut self, param: Param) -> Result<()> {
        if self.index.contains_key(&param.name) {
            return Err(DiffError::DuplicateParam(param.name));
        }
        if param.m.shape() != param.value.shape() || param.v.shape() != param.value.shape() {
            return Err(DiffError::shape(
                "param",
                format!(
                    "adam state for `{}` does not match {:?}",
                    param.name,
                    param.value.shape()
                ),
            ));
        }
        self.index.insert(param.name.clone(), self.params.len());
        self.params.push(param);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Places every parameter on `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| graph.leaf(p.value.clone(), trainable))
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Names existing graph nodes after the parameters, in parameter order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.params.len() {
            return Err(DiffError::shape(
                "bind_vars",
                format!("{} vars for {} parameters", vars.len(), self.params.len()),
            ));
        }
        Ok(Bound {
            vars: vars.to_vec(),
            index: self.index.clone(),
        })
    }

    /// Current values in parameter order.
    pub fn values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Bias-corrected Adam update. `grads` follows parameter order.
    ///
    /// Nothing is modified when any gradient is non-finite.
    pub fn adam_step(&mut self, grads: &[Tensor], cfg: &AdamConfig) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(DiffError::shape(
                "adam",
                format!(
                    "{} gradients for {} parameters",
                    grads.len(),
                    self.params.len()
                ),
            ));
        }
        for (p, g) in self.params.iter().zip(grads) {
            if g.shape() != p.value.shape() {
                return Err(DiffError::shape(
                    "adam",
                    format!(
                        "gradient {:?} for `{}` {:?}",
                        g.shape(),
                        p.name,
                        p.value.shape()
                    ),
                ));
            }
            if !g.all_finite() {
                return Err(DiffError::NonFiniteGradient(p.name.clone()));
            }
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.step += 1;
            let t = p.step as i32;
            let c1 = 1.0 - cfg.beta1.powi(t);
            let c2 = 1.0 - cfg.beta2.powi(t);
            let value = p.value.data_mut();
            let m = p.m.data_mut();
            let v = p.v.data_mut();
            for i in 0..value.len() {
                let gi = g.data()[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                value[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// A [`ParamSet`] placed on a graph.
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in parameter order; parameters the sweep never reached get zeros.
    pub fn collect(&self, graph: &Graph, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| grads.get_or_zeros(v, graph.shape(v)))
            .collect()
    }
}

/// He-normal initialisation scaled by `gain`.
pub fn he_normal(shape: &[usize], fan_in: usize, gain: f64, rng: &mut SeededRng) -> Tensor {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| std * standard_normal(rng)).collect();
    Tensor::new(shape, data).expect("shape matches length")
}
