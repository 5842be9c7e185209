use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named trainable tensors, ordered by name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Params(BTreeMap<String, Tensor>);

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.0.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.0
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    /// Registers every parameter as a named leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams(
            self.0
                .iter()
                .map(|(k, t)| (k.clone(), g.param(k.clone(), t.clone())))
                .collect(),
        )
    }

    /// Registers every parameter as a constant of `g` (no gradient).
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        BoundParams(
            self.0
                .iter()
                .map(|(k, t)| (k.clone(), g.constant(t.clone())))
                .collect(),
        )
    }

    /// Checks names and shapes against a reference set.
    pub fn check_layout(&self, expected: &Params) -> Result<()> {
        for (name, t) in &expected.0 {
            let got = self.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if let Some(extra) = self.0.keys().find(|k| !expected.0.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}

/// Graph handles for a bound [`Params`] set.
#[derive(Debug, Clone)]
pub struct BoundParams(BTreeMap<String, Var>);

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        match self.0.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` was not bound"),
        }
    }
}

fn check_grads(params: &Params, grads: &Gradients) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for `{name}`")));
        }
    }
    Ok(())
}

/// Update rule applied to a parameter set from a gradient map.
pub trait Optimizer {
    /// Applies one update and consumes (zeroes) the gradients. On error no
    /// parameter is modified.
    fn step(&mut self, params: &mut Params, grads: &mut Gradients) -> Result<()>;
}

/// Plain gradient descent: `p <- p - lr * grad`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self { lr }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut Params, grads: &mut Gradients) -> Result<()> {
        check_grads(params, grads)?;
        for (name, g) in grads.iter() {
            let p = params.get_mut(name).expect("checked above");
            for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= self.lr * gv;
            }
        }
        grads.clear();
        Ok(())
    }
}

pub fn sgd_step(params: &mut Params, grads: &mut Gradients, lr: f64) -> Result<()> {
    Sgd::new(lr).step(params, grads)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut Params, grads: &mut Gradients) -> Result<()> {
        check_grads(params, grads)?;
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name).expect("checked above");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        grads.clear();
        Ok(())
    }
}

/// Optimizer selector used in configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl OptimizerKind {
    pub fn build(self, lr: f64) -> Box<dyn Optimizer> {
        match self {
            OptimizerKind::Sgd => Box::new(Sgd::new(lr)),
            OptimizerKind::Adam => Box::new(Adam::new(lr)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Params {
        let mut p = Params::new();
        p.insert("p", Tensor::vector(vec![v]).unwrap());
        p
    }

    fn grad(v: f64) -> Gradients {
        let mut g = Gradients::new();
        g.insert("p".into(), Tensor::vector(vec![v]).unwrap());
        g
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = one(1.0);
        let mut g = grad(2.0);
        sgd_step(&mut p, &mut g, 0.1).unwrap();
        assert!((p.get("p").unwrap().data()[0] - 0.8).abs() < 1e-15);
        assert!(g.is_empty(), "gradients are consumed");
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let mut p = one(1.25);
        sgd_step(&mut p, &mut grad(3.0), 0.0).unwrap();
        assert_eq!(p.get("p").unwrap().data()[0], 1.25);
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        // f(p) = (p - 5)^2, so p_k - 5 = -5 (1 - 2 lr)^k.
        let mut params = one(0.0);
        for _ in 0..100 {
            let mut g = Graph::new();
            let b = params.bind(&mut g);
            let five = g.constant(Tensor::scalar(5.0).unwrap());
            let d = g.sub(b.var("p"), five).unwrap();
            let sq = g.square(d).unwrap();
            let loss = g.sum(sq).unwrap();
            let mut grads = g.backward(loss).unwrap();
            sgd_step(&mut params, &mut grads, 0.1).unwrap();
        }
        let p = params.get("p").unwrap().data()[0];
        let closed_form = 5.0 - 5.0 * 0.8f64.powi(100);
        assert!((p - 5.0).abs() < 1e-6);
        assert!((p - closed_form).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut p = one(1.0);
        let mut g = Gradients::new();
        g.insert(
            "p".into(),
            Tensor::from_parts(vec![1], vec![f64::NAN]),
        );
        let err = sgd_step(&mut p, &mut g, 0.1).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(p.get("p").unwrap().data()[0], 1.0);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = one(1.0);
        let mut opt = Adam::new(0.01);
        opt.step(&mut p, &mut grad(4.0)).unwrap();
        // First bias-corrected Adam step has magnitude lr.
        assert!((p.get("p").unwrap().data()[0] - 0.99).abs() < 1e-9);
        assert_eq!(opt.steps_taken(), 1);
    }
}
