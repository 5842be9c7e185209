use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Params, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed;

pub const TIME_DIM: usize = 8;
const TIME_BASE: f64 = 100.0;

/// Sinusoidal embedding of a step: `[sin(t w_i), cos(t w_i)]` for
/// `w_i = TIME_BASE^(-i / (TIME_DIM / 2))`.
pub fn time_embedding(t: usize) -> [f64; TIME_DIM] {
    let half = TIME_DIM / 2;
    let mut out = [0.0; TIME_DIM];
    for i in 0..half {
        let w = TIME_BASE.powf(-(i as f64) / half as f64);
        out[i] = (t as f64 * w).sin();
        out[half + i] = (t as f64 * w).cos();
    }
    out
}

/// Predicts the noise in `z` `[B, m]` given conditions `c` `[B, m]` and one
/// step per row.
pub trait Denoiser {
    fn predict(&self, g: &mut Graph, z: Var, c: Var, ts: &[usize]) -> Result<Var>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsArch {
    pub dim: usize,
    pub hidden: usize,
}

/// Three-layer SiLU MLP on `[z ‖ c ‖ τ(t)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsNet {
    pub arch: EpsArch,
    pub params: Params,
}

impl EpsArch {
    pub fn layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (m, h) = (self.dim, self.hidden);
        vec![
            ("w1", vec![2 * m + TIME_DIM, h]),
            ("b1", vec![h]),
            ("w2", vec![h, h]),
            ("b2", vec![h]),
            ("w3", vec![h, m]),
            ("b3", vec![m]),
        ]
    }
}

impl EpsNet {
    /// N(0, 1/fan_in) weights, zero biases.
    pub fn init(arch: EpsArch, seed_: u64) -> Result<Self> {
        if arch.dim == 0 || arch.hidden == 0 {
            return Err(Error::Shape(format!("eps net {arch:?}")));
        }
        let mut rng = seed::derived_rng(seed_, &[0xe95]);
        let mut params = Params::new();
        for (name, shape) in arch.layout() {
            let n: usize = shape.iter().product();
            let data = if shape.len() == 1 {
                vec![0.0; n]
            } else {
                let d = Normal::new(0.0, 1.0 / (shape[0] as f64).sqrt()).expect("valid std");
                (0..n).map(|_| d.sample(&mut rng)).collect()
            };
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: EpsArch, params: Params) -> Result<Self> {
        let mut expected = Params::new();
        for (name, shape) in arch.layout() {
            expected.insert(name, Tensor::zeros(&shape));
        }
        params.check_layout(&expected)?;
        Ok(Self { arch, params })
    }
}

impl Denoiser for EpsNet {
    fn predict(&self, g: &mut Graph, z: Var, c: Var, ts: &[usize]) -> Result<Var> {
        let rows = g.value(z).rows();
        if ts.len() != rows {
            return Err(Error::Shape(format!("{} steps for {rows} rows", ts.len())));
        }
        let mut tau = Vec::with_capacity(rows * TIME_DIM);
        for &t in ts {
            tau.extend_from_slice(&time_embedding(t));
        }
        let tau = g.constant(Tensor::new(vec![rows, TIME_DIM], tau)?);
        let p = self.params.bind(g);
        let x = g.concat(&[z, c, tau])?;
        let h = g.matmul(x, p.var("w1"))?;
        let h = g.add(h, p.var("b1"))?;
        let h = g.silu(h)?;
        let h = g.matmul(h, p.var("w2"))?;
        let h = g.add(h, p.var("b2"))?;
        let h = g.silu(h)?;
        let o = g.matmul(h, p.var("w3"))?;
        g.add(o, p.var("b3"))
    }
}
