//! Reward feedback fine-tuning of the denoiser through one live step.

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, OptimizerKind, Tensor, Var};
use crate::diffusion::{pretrain_loss, predict_x0, run_chain, EpsNet, NoiseSchedule, PretrainSet};
use crate::error::{Error, Result};
use crate::lexicon::PromptPair;
use crate::reward::GraphReward;
use crate::seed::{self, Rng};
use crate::textworld::WorldEmbedding;

pub const PAPER_LAMBDA: f64 = 1e-3;
pub const PAPER_LR: f64 = 1e-5;
pub const DESK_LR: f64 = 1e-3;
pub const DESK_LAMBDA: f64 = 1.0;

/// Maps the batch reward to a loss term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phi {
    /// `−r`
    #[default]
    Negate,
    /// `log(1 + e^{−r})`
    Softplus,
}

impl Phi {
    pub fn apply(self, g: &mut Graph, r: Var) -> Result<Var> {
        let neg = g.scale(r, -1.0)?;
        match self {
            Phi::Negate => Ok(neg),
            Phi::Softplus => {
                let e = g.exp(neg)?;
                let one = g.constant(Tensor::scalar(1.0)?);
                let s = g.add(e, one)?;
                g.log(s)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReflConfig {
    pub t1: usize,
    pub t2: usize,
    pub lambda: f64,
    pub phi: Phi,
    pub lr: f64,
    pub steps: usize,
    /// Prompts per step; each is sampled `n_samples` times.
    pub batch_size: usize,
    pub n_samples: usize,
    /// Rows of the pretraining batch used by the regularizer.
    pub pre_batch: usize,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub optimizer: OptimizerKind,
}

impl Default for ReflConfig {
    fn default() -> Self {
        Self {
            t1: 1,
            t2: 10,
            lambda: DESK_LAMBDA,
            phi: Phi::Negate,
            lr: DESK_LR,
            steps: 400,
            batch_size: 4,
            n_samples: 8,
            pre_batch: 64,
            log_every: 50,
            checkpoint_every: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl ReflConfig {
    pub fn validate(&self, s: &NoiseSchedule) -> Result<()> {
        if !(1 <= self.t1 && self.t1 <= self.t2 && self.t2 <= s.steps()) {
            return Err(Error::Domain(format!(
                "step range [{}, {}] must lie in [1, {}]",
                self.t1,
                self.t2,
                s.steps()
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Domain(format!("lambda {} must be non-negative", self.lambda)));
        }
        if self.batch_size == 0 || self.n_samples == 0 || self.pre_batch == 0 {
            return Err(Error::Domain("refl batch sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Original and optimized prompt embeddings for one training prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflPrompt {
    pub x_emb: Vec<f64>,
    pub y_emb: Vec<f64>,
}

impl ReflPrompt {
    pub fn from_pair(world: &WorldEmbedding, pair: &PromptPair) -> Result<Self> {
        Ok(Self {
            x_emb: world.embed_text(&pair.source)?,
            y_emb: world.embed_text(&pair.target)?,
        })
    }
}

/// Loss components of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReflStep {
    pub step: usize,
    pub t: usize,
    pub reward: f64,
    pub l_pre: f64,
    pub l_r: f64,
    pub total: f64,
}

/// The noisy latents and conditions a step's live computation starts from.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub t: usize,
    pub z_t: Tensor,
    pub x_emb: Tensor,
    pub y_emb: Tensor,
}

/// Draws `t ~ U{t1..t2}` and runs the chain from `T` down to `z_t` without
/// recording gradients. Rows are prompt-major, `n_samples` per prompt.
pub fn draw_chain_state(
    net: &EpsNet,
    s: &NoiseSchedule,
    prompts: &[&ReflPrompt],
    cfg: &ReflConfig,
    rng: &mut Rng,
) -> Result<ChainState> {
    let m = net.arch.dim;
    let rows = prompts.len() * cfg.n_samples;
    let t = rng.random_range(cfg.t1..=cfg.t2);
    let mut x = Vec::with_capacity(rows * m);
    let mut y = Vec::with_capacity(rows * m);
    for p in prompts {
        for _ in 0..cfg.n_samples {
            x.extend_from_slice(&p.x_emb);
            y.extend_from_slice(&p.y_emb);
        }
    }
    let y_emb = Tensor::new(vec![rows, m], y)?;
    let z_t = run_chain(net, s, &y_emb, rng, t)?;
    Ok(ChainState {
        t,
        z_t,
        x_emb: Tensor::new(vec![rows, m], x)?,
        y_emb,
    })
}

/// `λ φ(R(x̂0))` with `x̂0` predicted from the state at its step, as a graph
/// node. The chain state enters as a constant, so only this step carries
/// gradient to the parameters.
pub fn reward_loss(
    g: &mut Graph,
    net: &EpsNet,
    s: &NoiseSchedule,
    st: &ChainState,
    reward: &dyn GraphReward,
    cfg: &ReflConfig,
) -> Result<(Var, Var)> {
    let z = g.constant(st.z_t.clone());
    let c = g.constant(st.y_emb.clone());
    let ts = vec![st.t; st.z_t.rows()];
    let x0 = predict_x0(g, net, s, z, c, &ts)?;
    let r = reward.reward(g, x0, &st.x_emb, &st.y_emb)?;
    let phi = cfg.phi.apply(g, r)?;
    let l_r = g.scale(phi, cfg.lambda)?;
    Ok((r, l_r))
}

/// One step's losses and gradients. The reward path uses `chain_rng`; the
/// regularizer batch and its noise use `pre_rng`.
#[allow(clippy::too_many_arguments)]
pub fn refl_step(
    net: &EpsNet,
    s: &NoiseSchedule,
    prompts: &[&ReflPrompt],
    data: &PretrainSet,
    reward: &dyn GraphReward,
    cfg: &ReflConfig,
    chain_rng: &mut Rng,
    pre_rng: &mut Rng,
) -> Result<(ReflStep, Gradients)> {
    let st = draw_chain_state(net, s, prompts, cfg, chain_rng)?;
    let mut g = Graph::new();
    let (r, l_r) = reward_loss(&mut g, net, s, &st, reward, cfg)?;
    let idx = data.draw_batch(cfg.pre_batch, pre_rng);
    let (x0, c) = data.batch(&idx);
    let l_pre = pretrain_loss(&mut g, net, s, &x0, &c, pre_rng)?;
    let total = g.add(l_r, l_pre)?;
    let out = ReflStep {
        step: 0,
        t: st.t,
        reward: g.value(r).item()?,
        l_pre: g.value(l_pre).item()?,
        l_r: g.value(l_r).item()?,
        total: g.value(total).item()?,
    };
    if ![out.reward, out.l_pre, out.l_r, out.total].iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite refl loss at t={}", st.t)));
    }
    let grads = g.backward(total)?;
    if grads.iter().any(|(_, t)| !t.all_finite()) {
        return Err(Error::Numeric(format!("non-finite refl gradient at t={}", st.t)));
    }
    Ok((out, grads))
}

/// Fine-tunes `net` for `cfg.steps` steps and returns the per-step curve.
/// A step that fails numerically leaves the parameters untouched; three in
/// a row abort the run.
#[allow(clippy::too_many_arguments)]
pub fn refl_finetune(
    net: &mut EpsNet,
    s: &NoiseSchedule,
    prompts: &[ReflPrompt],
    data: &PretrainSet,
    reward: &dyn GraphReward,
    cfg: &ReflConfig,
    seed_: u64,
    on_checkpoint: &mut dyn FnMut(usize, &EpsNet) -> Result<()>,
) -> Result<Vec<ReflStep>> {
    cfg.validate(s)?;
    if prompts.is_empty() || data.is_empty() {
        return Err(Error::Domain("refl needs prompts and pretraining data".into()));
    }
    let mut opt = cfg.optimizer.build(cfg.lr);
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut failures = 0;
    for step in 1..=cfg.steps {
        let mut chain_rng = seed::derived_rng(seed_, &[0xef1, step as u64]);
        let mut pre_rng = seed::derived_rng(seed_, &[0xef2, step as u64]);
        let k = cfg.batch_size.min(prompts.len());
        let batch: Vec<&ReflPrompt> = sample_indices(&mut chain_rng, prompts.len(), k)
            .into_iter()
            .map(|i| &prompts[i])
            .collect();
        match refl_step(net, s, &batch, data, reward, cfg, &mut chain_rng, &mut pre_rng) {
            Ok((mut out, mut grads)) => {
                failures = 0;
                opt.step(&mut net.params, &mut grads)?;
                out.step = step;
                if cfg.log_every > 0 && step % cfg.log_every == 0 {
                    log::info!(
                        "refl step {step}: reward {:.4} l_pre {:.4} l_r {:.3e}",
                        out.reward,
                        out.l_pre,
                        out.l_r
                    );
                }
                curve.push(out);
            }
            Err(Error::Numeric(msg)) => {
                failures += 1;
                log::warn!("refl step {step} skipped: {msg}");
                if failures == 3 {
                    return Err(Error::Numeric(format!("three consecutive failed steps, last: {msg}")));
                }
            }
            Err(e) => return Err(e),
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            on_checkpoint(step, net)?;
        }
    }
    Ok(curve)
}

/// CSV with header `step,t,reward,l_pre,l_r`.
pub fn curve_csv(curve: &[ReflStep]) -> String {
    let mut out = String::from("step,t,reward,l_pre,l_r\n");
    for c in curve {
        out.push_str(&format!("{},{},{:.6},{:.6},{:.6e}\n", c.step, c.t, c.reward, c.l_pre, c.l_r));
    }
    out
}
