use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, Graph, Params, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed;
use crate::textworld::{Vocabulary, BOS_ID, EOS_ID, SEP_ID};

const MASK_NEG: f64 = -1e9;

/// Shape-determining hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlmArch {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
}

impl PlmArch {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Shape(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= EOS_ID || self.max_len < 2 {
            return Err(Error::Shape(format!(
                "vocab_size {} / max_len {} too small",
                self.vocab_size, self.max_len
            )));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameter names and shapes in creation order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, v) = (self.d_model, self.vocab_size);
        let dh = self.head_dim();
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![self.max_len, d]),
        ];
        for l in 0..self.n_layers {
            for h in 0..self.n_heads {
                for w in ["wq", "wk", "wv"] {
                    out.push((format!("l{l}.h{h}.{w}"), vec![d, dh]));
                }
            }
            out.push((format!("l{l}.wo"), vec![d, d]));
            out.push((format!("l{l}.w1"), vec![d, 4 * d]));
            out.push((format!("l{l}.b1"), vec![4 * d]));
            out.push((format!("l{l}.w2"), vec![4 * d, d]));
            out.push((format!("l{l}.b2"), vec![d]));
        }
        out.push(("head".to_string(), vec![d, v]));
        out.push(("head_b".to_string(), vec![v]));
        out
    }
}

/// A sequence in the PLM input format with its loss mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Formatted {
    pub tokens: Vec<usize>,
    pub mask: Vec<u8>,
}

impl Formatted {
    pub fn masked_positions(&self) -> usize {
        self.mask.iter().map(|&m| m as usize).sum()
    }
}

/// `[BOS] source [SEP] target [EOS]`, masked to the target and EOS.
pub fn format_pair<S: AsRef<str>>(
    vocab: &Vocabulary,
    source: &[S],
    target: &[S],
    max_len: usize,
) -> Result<Formatted> {
    let src = vocab.encode(source)?;
    let tgt = vocab.encode(target)?;
    let len = src.len() + tgt.len() + 3;
    if len > max_len {
        return Err(Error::Length { len, max_len });
    }
    let mut tokens = Vec::with_capacity(len);
    tokens.push(BOS_ID);
    tokens.extend(&src);
    tokens.push(SEP_ID);
    tokens.extend(&tgt);
    tokens.push(EOS_ID);
    let prefix = src.len() + 2;
    let mask = (0..len).map(|i| u8::from(i >= prefix)).collect();
    Ok(Formatted { tokens, mask })
}

/// Drops the mask-0 prefix and the final EOS, recovering the target ids.
pub fn strip_prefix(f: &Formatted) -> Vec<usize> {
    let start = f.mask.iter().position(|&m| m == 1).unwrap_or(f.tokens.len());
    let mut out = f.tokens[start..].to_vec();
    if out.last() == Some(&EOS_ID) {
        out.pop();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlmModel {
    pub arch: PlmArch,
    pub params: Params,
}

impl PlmModel {
    /// Seeded random initialization: N(0, 1/fan_in) for weight matrices,
    /// N(0, 0.3^2) for embeddings, zero biases.
    pub fn init(arch: PlmArch, seed_: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seed::derived_rng(seed_, &[0x91]);
        let mut params = Params::new();
        for (name, shape) in arch.layout() {
            let n: usize = shape.iter().product();
            let std = if name.ends_with("emb") {
                0.3
            } else if shape.len() == 1 {
                0.0
            } else {
                1.0 / (shape[0] as f64).sqrt()
            };
            let data = if std == 0.0 {
                vec![0.0; n]
            } else {
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            };
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { arch, params })
    }

    /// Wraps externally supplied parameters after checking names and shapes.
    pub fn from_params(arch: PlmArch, params: Params) -> Result<Self> {
        arch.validate()?;
        let mut expected = Params::new();
        for (name, shape) in arch.layout() {
            expected.insert(name, Tensor::zeros(&shape));
        }
        params.check_layout(&expected)?;
        Ok(Self { arch, params })
    }

    /// Logits `[L, V]` for every position of `ids`.
    pub fn logits(&self, g: &mut Graph, p: &BoundParams, ids: &[usize]) -> Result<Var> {
        let a = &self.arch;
        let len = ids.len();
        if len == 0 || len > a.max_len {
            return Err(Error::Length {
                len,
                max_len: a.max_len,
            });
        }
        let positions: Vec<usize> = (0..len).collect();
        let tok = g.gather(p.var("tok_emb"), ids)?;
        let pos = g.gather(p.var("pos_emb"), &positions)?;
        let mut x = g.add(tok, pos)?;

        let mut mask = vec![0.0; len * len];
        for i in 0..len {
            for j in i + 1..len {
                mask[i * len + j] = MASK_NEG;
            }
        }
        let mask = g.constant(Tensor::new(vec![len, len], mask)?);
        let inv_sqrt = 1.0 / (a.head_dim() as f64).sqrt();

        for l in 0..a.n_layers {
            let h = rms_norm(g, x, a.d_model)?;
            let mut heads = Vec::with_capacity(a.n_heads);
            for hd in 0..a.n_heads {
                let q = g.matmul(h, p.var(&format!("l{l}.h{hd}.wq")))?;
                let k = g.matmul(h, p.var(&format!("l{l}.h{hd}.wk")))?;
                let v = g.matmul(h, p.var(&format!("l{l}.h{hd}.wv")))?;
                let kt = g.transpose(k)?;
                let s = g.matmul(q, kt)?;
                let s = g.scale(s, inv_sqrt)?;
                let s = g.add(s, mask)?;
                let att = g.softmax(s)?;
                heads.push(g.matmul(att, v)?);
            }
            let cat = g.concat(&heads)?;
            let o = g.matmul(cat, p.var(&format!("l{l}.wo")))?;
            x = g.add(x, o)?;

            let h = rms_norm(g, x, a.d_model)?;
            let u = g.matmul(h, p.var(&format!("l{l}.w1")))?;
            let u = g.add(u, p.var(&format!("l{l}.b1")))?;
            let u = g.silu(u)?;
            let u = g.matmul(u, p.var(&format!("l{l}.w2")))?;
            let u = g.add(u, p.var(&format!("l{l}.b2")))?;
            x = g.add(x, u)?;
        }
        let h = rms_norm(g, x, a.d_model)?;
        let out = g.matmul(h, p.var("head"))?;
        g.add(out, p.var("head_b"))
    }

    /// Next-token log-probabilities after `prefix` (plain values).
    pub fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let logits = self.logits(&mut g, &p, prefix)?;
        let lp = g.log_softmax(logits)?;
        Ok(g.value(lp).row(prefix.len() - 1).to_vec())
    }
}

/// Unit-RMS normalization without a learned gain.
fn rms_norm(g: &mut Graph, x: Var, d: usize) -> Result<Var> {
    let n = g.l2_normalize(x)?;
    g.scale(n, (d as f64).sqrt())
}
