//! Conditional DDPM over the synthetic image space.

mod net;
mod schedule;

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use net::{time_embedding, Denoiser, EpsArch, EpsNet, TIME_DIM};
pub use schedule::{
    NoiseSchedule, ScheduleConfig, DEFAULT_STEPS, MAX_FINAL_ALPHA_BAR, REFERENCE_BETA_END,
    REFERENCE_BETA_START, REFERENCE_STEPS,
};

use crate::autodiff::{Graph, OptimizerKind, Tensor, Var};
use crate::error::{Error, Result};
use crate::lexicon::PromptPair;
use crate::seed::{self, Rng};
use crate::textworld::{Partition, WorldEmbedding};

/// `rows x dim` standard normal draws, row-major from `rng`.
pub fn gaussian(rng: &mut Rng, rows: usize, dim: usize) -> Tensor {
    let data: Vec<f64> = (0..rows * dim).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_rows_unchecked(rows, dim, data)
}

/// `z_t = √ᾱ_t x0 + √(1 − ᾱ_t) ε`. Step 0 is accepted and returns `x0`.
pub fn q_sample(s: &NoiseSchedule, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
    if t > s.steps() {
        return Err(Error::Step { t, max: s.steps() });
    }
    if x0.len() != eps.len() {
        return Err(Error::Shape(format!("x0 of {} vs noise of {}", x0.len(), eps.len())));
    }
    let (a, b) = (s.alpha_bar(t).sqrt(), (1.0 - s.alpha_bar(t)).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

fn q_sample_rows(s: &NoiseSchedule, x0: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Tensor> {
    let m = x0.last_dim();
    let mut data = Vec::with_capacity(x0.len());
    for (i, &t) in ts.iter().enumerate() {
        data.extend(q_sample(s, x0.row(i), t, eps.row(i))?);
    }
    Ok(Tensor::from_rows_unchecked(ts.len(), m, data))
}

/// `[rows, m]` tensor whose row `i` is filled with `f(ts[i])`.
fn per_row(ts: &[usize], m: usize, f: impl Fn(usize) -> f64) -> Tensor {
    let data = ts.iter().flat_map(|&t| std::iter::repeat_n(f(t), m)).collect();
    Tensor::from_rows_unchecked(ts.len(), m, data)
}

/// `x̂0 = (z_t − √(1 − ᾱ_t) ε̂) / √ᾱ_t`, differentiable through the denoiser
/// and through `z`.
pub fn predict_x0(
    g: &mut Graph,
    den: &dyn Denoiser,
    s: &NoiseSchedule,
    z: Var,
    c: Var,
    ts: &[usize],
) -> Result<Var> {
    for &t in ts {
        s.check_step(t)?;
    }
    let m = g.value(z).last_dim();
    let eps = den.predict(g, z, c, ts)?;
    let k_eps = g.constant(per_row(ts, m, |t| (1.0 - s.alpha_bar(t)).sqrt()));
    let k_z = g.constant(per_row(ts, m, |t| 1.0 / s.alpha_bar(t).sqrt()));
    let scaled = g.mul(eps, k_eps)?;
    let d = g.sub(z, scaled)?;
    g.mul(d, k_z)
}

/// Noise prediction outside of any training graph.
pub fn predict_eps(den: &dyn Denoiser, z: &Tensor, c: &Tensor, ts: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let cv = g.constant(c.clone());
    let e = den.predict(&mut g, zv, cv, ts)?;
    Ok(g.value(e).clone())
}

/// Runs the ancestral chain from `z_T ~ N(0, I)` down to `z_stop`, taking
/// `T − stop` posterior steps with σ_t² = β̃_t. No noise is added on the
/// final step to `x0`.
pub fn run_chain(den: &dyn Denoiser, s: &NoiseSchedule, conds: &Tensor, rng: &mut Rng, stop: usize) -> Result<Tensor> {
    if stop > s.steps() {
        return Err(Error::Step { t: stop, max: s.steps() });
    }
    let (rows, m) = (conds.rows(), conds.last_dim());
    let mut z = gaussian(rng, rows, m);
    for t in (stop + 1..=s.steps()).rev() {
        let ts = vec![t; rows];
        let eps = predict_eps(den, &z, conds, &ts)?;
        let k = s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt();
        let inv = 1.0 / s.alpha(t).sqrt();
        let mut next: Vec<f64> = z
            .data()
            .iter()
            .zip(eps.data())
            .map(|(zv, ev)| inv * (zv - k * ev))
            .collect();
        if t > 1 {
            let sigma = s.posterior_variance(t).sqrt();
            let noise = gaussian(rng, rows, m);
            for (x, n) in next.iter_mut().zip(noise.data()) {
                *x += sigma * n;
            }
        }
        z = Tensor::new(vec![rows, m], next)?;
    }
    Ok(z)
}

/// One sample per condition row.
pub fn sample_batch(den: &dyn Denoiser, s: &NoiseSchedule, conds: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    run_chain(den, s, conds, rng, 0)
}

/// `n` samples for one condition.
pub fn sample_n(den: &dyn Denoiser, s: &NoiseSchedule, cond: &[f64], n: usize, rng: &mut Rng) -> Result<Tensor> {
    let conds = Tensor::from_rows_unchecked(n, cond.len(), cond.repeat(n));
    sample_batch(den, s, &conds, rng)
}

/// A single sample as a pure function of the seed.
pub fn sample(den: &dyn Denoiser, s: &NoiseSchedule, cond: &[f64], seed_: u64) -> Result<Vec<f64>> {
    Ok(sample_n(den, s, cond, 1, &mut seed::rng(seed_))?.into_data())
}

/// Denoising loss `mean_i ‖ε_i − ε̂(z_i, t_i, c_i)‖²` for given draws.
pub fn pretrain_loss_with(
    g: &mut Graph,
    den: &dyn Denoiser,
    s: &NoiseSchedule,
    x0: &Tensor,
    conds: &Tensor,
    ts: &[usize],
    eps: &Tensor,
) -> Result<Var> {
    if x0.rows() == 0 || x0.rows() != ts.len() || conds.rows() != ts.len() {
        return Err(Error::Shape(format!(
            "pretrain batch of {} images, {} conditions, {} steps",
            x0.rows(),
            conds.rows(),
            ts.len()
        )));
    }
    for &t in ts {
        s.check_step(t)?;
    }
    let z = g.constant(q_sample_rows(s, x0, ts, eps)?);
    let c = g.constant(conds.clone());
    let target = g.constant(eps.clone());
    let pred = den.predict(g, z, c, ts)?;
    let d = g.sub(target, pred)?;
    let sq = g.square(d)?;
    let total = g.sum(sq)?;
    let loss = g.scale(total, 1.0 / ts.len() as f64)?;
    if !g.value(loss).all_finite() {
        return Err(Error::Numeric("non-finite pretrain loss".into()));
    }
    Ok(loss)
}

/// Draws `t ~ U{1..T}` then `ε ~ N(0, I)` per row from `rng`.
pub fn draw_noise(s: &NoiseSchedule, rows: usize, dim: usize, rng: &mut Rng) -> (Vec<usize>, Tensor) {
    let ts: Vec<usize> = (0..rows).map(|_| rng.random_range(1..=s.steps())).collect();
    let eps = gaussian(rng, rows, dim);
    (ts, eps)
}

/// [`pretrain_loss_with`] on freshly drawn steps and noise.
pub fn pretrain_loss(
    g: &mut Graph,
    den: &dyn Denoiser,
    s: &NoiseSchedule,
    x0: &Tensor,
    conds: &Tensor,
    rng: &mut Rng,
) -> Result<Var> {
    let (ts, eps) = draw_noise(s, x0.rows(), x0.last_dim(), rng);
    pretrain_loss_with(g, den, s, x0, conds, &ts, &eps)
}

/// Fixed (image, condition) pairs standing in for the aesthetic-filtered
/// pretraining corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSet {
    pub x0: Vec<Vec<f64>>,
    pub conds: Vec<Vec<f64>>,
}

impl PretrainSet {
    /// One noisy render of each pair's target objects, conditioned on the
    /// target prompt embedding.
    pub fn build(world: &WorldEmbedding, corpus: &[PromptPair], sigma: f64, seed_: u64) -> Result<Self> {
        let vocab = world.vocab();
        let mut x0 = Vec::with_capacity(corpus.len());
        let mut conds = Vec::with_capacity(corpus.len());
        for (i, p) in corpus.iter().enumerate() {
            let objects: Vec<&String> = p
                .target
                .iter()
                .filter(|t| vocab.partition_of(t).ok() == Some(Partition::Concrete))
                .collect();
            let mut rng = seed::derived_rng(seed_, &[0xda7a, i as u64]);
            x0.push(world.render(&objects, sigma, &mut rng)?);
            conds.push(world.embed_text(&p.target)?);
        }
        Ok(Self { x0, conds })
    }

    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x0.first().map_or(0, Vec::len)
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor, Tensor) {
        let m = self.dim();
        let x = idx.iter().flat_map(|&i| self.x0[i].iter().copied()).collect();
        let c = idx.iter().flat_map(|&i| self.conds[i].iter().copied()).collect();
        (
            Tensor::from_rows_unchecked(idx.len(), m, x),
            Tensor::from_rows_unchecked(idx.len(), m, c),
        )
    }

    /// Seeded minibatch indices without replacement.
    pub fn draw_batch(&self, size: usize, rng: &mut Rng) -> Vec<usize> {
        sample_indices(rng, self.len(), size.min(self.len())).into_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub render_sigma: f64,
    /// Step interval between checkpoint callbacks; 0 disables them.
    pub checkpoint_every: usize,
    pub optimizer: OptimizerKind,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            lr: 1e-3,
            batch_size: 64,
            steps: 4000,
            render_sigma: crate::textworld::DEFAULT_RENDER_SIGMA,
            checkpoint_every: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

/// Trains `net` on the denoising loss. Returns the loss of every step.
pub fn pretrain(
    net: &mut EpsNet,
    s: &NoiseSchedule,
    data: &PretrainSet,
    cfg: &DiffusionConfig,
    seed_: u64,
    on_checkpoint: &mut dyn FnMut(usize, &EpsNet) -> Result<()>,
) -> Result<Vec<f64>> {
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Shape("empty pretraining set or batch".into()));
    }
    let mut opt = cfg.optimizer.build(cfg.lr);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut rng = seed::derived_rng(seed_, &[0x9e7, step as u64]);
        let idx = data.draw_batch(cfg.batch_size, &mut rng);
        let (x0, c) = data.batch(&idx);
        let mut g = Graph::new();
        let loss = pretrain_loss(&mut g, net, s, &x0, &c, &mut rng)?;
        curve.push(g.value(loss).item()?);
        let mut grads = g.backward(loss)?;
        opt.step(&mut net.params, &mut grads)?;
        if step % 500 == 0 {
            log::info!("diffusion step {step}: loss {:.4}", curve[step - 1]);
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            on_checkpoint(step, net)?;
        }
    }
    Ok(curve)
}

/// Denoising loss over the whole set, repeated `repeats` times with draws
/// fixed by `seed_` so two nets can be compared on identical noise.
pub fn dataset_loss(den: &dyn Denoiser, s: &NoiseSchedule, data: &PretrainSet, repeats: usize, seed_: u64) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let (x0, c) = data.batch(&idx);
    let mut total = 0.0;
    for r in 0..repeats.max(1) {
        let mut rng = seed::derived_rng(seed_, &[0x1055, r as u64]);
        let mut g = Graph::new();
        let l = pretrain_loss(&mut g, den, s, &x0, &c, &mut rng)?;
        total += g.value(l).item()?;
    }
    Ok(total / repeats.max(1) as f64)
}
