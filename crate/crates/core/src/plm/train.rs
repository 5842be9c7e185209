use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::model::{format_pair, Formatted, PlmArch, PlmModel};
use crate::autodiff::{BoundParams, Graph, OptimizerKind, Tensor, Var};
use crate::error::{Error, Result};
use crate::lexicon::PromptPair;
use crate::seed;
use crate::textworld::{Partition, Vocabulary, BOS_ID, EOS_ID, SEP_ID};

/// Learning rate the reference setup uses for a 124M-parameter model.
pub const PAPER_LR: f64 = 5e-5;
/// The same rate scaled by 100 for the desk-scale model.
pub const DESK_LR: f64 = 5e-3;
pub const PAPER_MAX_LEN: usize = 512;
pub const PAPER_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epoch interval between checkpoint callbacks; 0 disables them.
    pub checkpoint_every: usize,
    pub optimizer: OptimizerKind,
}

impl Default for PlmConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            max_len: 64,
            lr: DESK_LR,
            batch_size: 16,
            epochs: 60,
            checkpoint_every: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl PlmConfig {
    pub fn arch(&self, vocab_size: usize) -> PlmArch {
        PlmArch {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_len: self.max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch(EOS_ID + 1).validate()?;
        if self.batch_size == 0 || !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Domain(format!(
                "batch_size {} / lr {} invalid",
                self.batch_size, self.lr
            )));
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of the next token over mask-1 positions of
/// the whole batch.
pub fn sft_loss(g: &mut Graph, model: &PlmModel, p: &BoundParams, batch: &[Formatted]) -> Result<Var> {
    let count: usize = batch.iter().map(|f| f.mask[1..].iter().map(|&m| m as usize).sum::<usize>()).sum();
    if count == 0 {
        return Err(Error::Mask);
    }
    let mut total: Option<Var> = None;
    for f in batch {
        let len = f.tokens.len();
        let logits = model.logits(g, p, &f.tokens)?;
        let lp = g.log_softmax(logits)?;
        // Row i predicts token i + 1; the last row predicts nothing.
        let mut next: Vec<usize> = f.tokens[1..].to_vec();
        next.push(0);
        let picked = g.pick(lp, &next)?;
        let mut w: Vec<f64> = f.mask[1..].iter().map(|&m| m as f64).collect();
        w.push(0.0);
        let w = g.constant(Tensor::new(vec![len], w)?);
        let weighted = g.mul(picked, w)?;
        let s = g.sum(weighted)?;
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    g.scale(total.expect("non-empty batch"), -1.0 / count as f64)
}

/// Sorts formatted pairs by token ids so the training order depends only on
/// the corpus contents and the seed.
pub fn canonical_order(mut data: Vec<Formatted>) -> Vec<Formatted> {
    data.sort_by(|a, b| a.tokens.cmp(&b.tokens).then(a.mask.cmp(&b.mask)));
    data
}

fn masked_count(batch: &[Formatted]) -> usize {
    batch.iter().map(|f| f.mask[1..].iter().map(|&m| m as usize).sum::<usize>()).sum()
}

fn batch_loss(model: &PlmModel, batch: &[Formatted]) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.params.bind_frozen(&mut g);
    let l = sft_loss(&mut g, model, &p, batch)?;
    g.value(l).item()
}

/// Token-weighted mean loss over a corpus.
pub fn corpus_loss(model: &PlmModel, data: &[Formatted], chunk: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0;
    for b in data.chunks(chunk.max(1)) {
        let c = masked_count(b);
        sum += batch_loss(model, b)? * c as f64;
        n += c;
    }
    if n == 0 {
        return Err(Error::Mask);
    }
    Ok(sum / n as f64)
}

/// Supervised fine-tuning. Returns the per-epoch loss curve whose entry 0 is
/// the loss of the incoming model on the whole corpus and entry `e` the
/// token-weighted mean training loss during epoch `e`.
///
/// On a non-finite loss the run stops with a numeric error; `model` then
/// holds the parameters after the last successful update.
pub fn sft_train(
    model: &mut PlmModel,
    vocab: &Vocabulary,
    corpus: &[PromptPair],
    cfg: &PlmConfig,
    seed_: u64,
    on_checkpoint: &mut dyn FnMut(usize, &PlmModel) -> Result<()>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let data = corpus
        .iter()
        .map(|p| format_pair(vocab, &p.source, &p.target, model.arch.max_len))
        .collect::<Result<Vec<_>>>()?;
    let data = canonical_order(data);
    if data.is_empty() {
        return Err(Error::Mask);
    }
    let mut curve = vec![corpus_loss(model, &data, cfg.batch_size)?];
    let mut opt = cfg.optimizer.build(cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::derived_rng(seed_, &[0x5f7, epoch as u64]));
        let (mut sum, mut n) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<Formatted> = idx.iter().map(|&i| data[i].clone()).collect();
            let mut g = Graph::new();
            let p = model.params.bind(&mut g);
            let loss = sft_loss(&mut g, model, &p, &batch)?;
            let value = g.value(loss).item()?;
            let mut grads = g.backward(loss)?;
            opt.step(&mut model.params, &mut grads)?;
            let c = masked_count(&batch);
            sum += value * c as f64;
            n += c;
        }
        let mean = sum / n as f64;
        log::info!("plm epoch {epoch}: loss {mean:.5}");
        curve.push(mean);
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            on_checkpoint(epoch, model)?;
        }
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Decode {
    /// Argmax with ties broken by the lowest token id.
    #[default]
    Greedy,
    /// Sampling among the `k` most likely tokens.
    TopK { k: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rewrite {
    pub tokens: Vec<String>,
    /// Set when `max_len` was reached before EOS.
    pub truncated: bool,
}

fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Decodes a target from `[BOS] source [SEP]` until EOS or `max_len`.
pub fn rewrite<S: AsRef<str>>(model: &PlmModel, vocab: &Vocabulary, source: &[S], decode: Decode) -> Result<Rewrite> {
    let mut seq = vec![BOS_ID];
    seq.extend(vocab.encode(source)?);
    seq.push(SEP_ID);
    let max_len = model.arch.max_len;
    if seq.len() > max_len {
        return Err(Error::Length {
            len: seq.len(),
            max_len,
        });
    }
    let prefix = seq.len();
    let mut rng = match decode {
        Decode::TopK { seed, .. } => Some(seed::rng(seed)),
        Decode::Greedy => None,
    };
    let mut finished = false;
    while seq.len() < max_len {
        let lp = model.next_log_probs(&seq)?;
        let next = match (decode, rng.as_mut()) {
            (Decode::TopK { k, .. }, Some(r)) => {
                let mut ids: Vec<usize> = (0..lp.len()).collect();
                ids.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
                ids.truncate(k.max(1));
                let top = lp[ids[0]];
                let w: Vec<f64> = ids.iter().map(|&i| (lp[i] - top).exp()).collect();
                let mut u = r.random::<f64>() * w.iter().sum::<f64>();
                let mut pick = ids[ids.len() - 1];
                for (&i, &wi) in ids.iter().zip(&w) {
                    if u < wi {
                        pick = i;
                        break;
                    }
                    u -= wi;
                }
                pick
            }
            _ => argmax_lowest(&lp),
        };
        if next == EOS_ID {
            finished = true;
            break;
        }
        seq.push(next);
    }
    if !finished {
        log::warn!("rewrite reached max_len {max_len} without EOS");
    }
    let tokens = seq[prefix..]
        .iter()
        .filter(|&&i| vocab.partition(i) != Partition::Special)
        .map(|&i| vocab.token(i).to_string())
        .collect();
    Ok(Rewrite {
        tokens,
        truncated: !finished,
    })
}
