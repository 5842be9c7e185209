//! Weighted relevance, aesthetic expectation and total reward.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::diffusion::{sample_n, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};
use crate::textworld::{aes_score, aes_score_var, clip_score, clip_score_var, WorldEmbedding, DEFAULT_GAMMA};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Weight of the original prompt's relevance.
    pub w_orig: f64,
    /// Weight of the optimized prompt's relevance.
    pub w_opt: f64,
    pub n_samples: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            w_orig: 0.3,
            w_opt: 0.7,
            n_samples: 8,
            gamma: DEFAULT_GAMMA,
            seed: 0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if (self.w_orig + self.w_opt - 1.0).abs() > 1e-12 || self.w_orig < 0.0 || self.w_opt < 0.0 {
            return Err(Error::Domain(format!(
                "relevance weights {} + {} must be a convex combination",
                self.w_orig, self.w_opt
            )));
        }
        if self.n_samples == 0 {
            return Err(Error::Domain("n_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// Text-image relevance and image aesthetics.
pub trait Scorer {
    fn clip(&self, prompt: &[String], image: &[f64]) -> Result<f64>;
    fn aes(&self, image: &[f64]) -> Result<f64>;
}

/// Scores with the synthetic world's cosine relevance and sphere-distance
/// aesthetics.
pub struct WorldScorer<'a> {
    pub world: &'a WorldEmbedding,
    pub gamma: f64,
}

impl Scorer for WorldScorer<'_> {
    fn clip(&self, prompt: &[String], image: &[f64]) -> Result<f64> {
        clip_score(&self.world.embed_text(prompt)?, image)
    }

    fn aes(&self, image: &[f64]) -> Result<f64> {
        aes_score(image, self.gamma)
    }
}

/// Produces `n` images for a prompt from `rng`.
pub trait Generator {
    fn generate(&self, prompt: &[String], n: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>>;
}

/// Ancestral sampling conditioned on the prompt embedding.
pub struct DiffusionGenerator<'a> {
    pub net: &'a dyn Denoiser,
    pub schedule: &'a NoiseSchedule,
    pub world: &'a WorldEmbedding,
}

impl Generator for DiffusionGenerator<'_> {
    fn generate(&self, prompt: &[String], n: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        let c = self.world.embed_text(prompt)?;
        let t = sample_n(self.net, self.schedule, &c, n, rng)?;
        Ok((0..n).map(|i| t.row(i).to_vec()).collect())
    }
}

/// `w_orig · g(x, i) + w_opt · g(y, i)`.
pub fn f_rel(scorer: &dyn Scorer, cfg: &RewardConfig, x: &[String], y: &[String], image: &[f64]) -> Result<f64> {
    Ok(cfg.w_orig * scorer.clip(x, image)? + cfg.w_opt * scorer.clip(y, image)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub rel: f64,
    pub aes: f64,
    pub total: f64,
    pub rel_samples: Vec<f64>,
    pub aes_samples: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Scores a fixed set of images; both expectations share the set.
pub fn score_images(
    scorer: &dyn Scorer,
    cfg: &RewardConfig,
    x: &[String],
    y: &[String],
    images: &[Vec<f64>],
) -> Result<RewardBreakdown> {
    if images.is_empty() {
        return Err(Error::Domain("no images to score".into()));
    }
    let rel_samples = images
        .iter()
        .map(|i| f_rel(scorer, cfg, x, y, i))
        .collect::<Result<Vec<_>>>()?;
    let aes_samples = images.iter().map(|i| scorer.aes(i)).collect::<Result<Vec<_>>>()?;
    let (rel, aes) = (mean(&rel_samples), mean(&aes_samples));
    Ok(RewardBreakdown {
        rel,
        aes,
        total: rel + aes,
        rel_samples,
        aes_samples,
    })
}

fn generate(gen: &dyn Generator, y: &[String], cfg: &RewardConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    gen.generate(y, cfg.n_samples, &mut seed::rng(cfg.seed))
}

/// Mean `f_rel` over `n_samples` generations conditioned on `y`.
pub fn reward_rel(scorer: &dyn Scorer, gen: &dyn Generator, x: &[String], y: &[String], cfg: &RewardConfig) -> Result<f64> {
    let images = generate(gen, y, cfg)?;
    let v = images
        .iter()
        .map(|i| f_rel(scorer, cfg, x, y, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&v))
}

/// Mean aesthetic score over `n_samples` generations conditioned on `y`.
pub fn reward_aes(scorer: &dyn Scorer, gen: &dyn Generator, y: &[String], cfg: &RewardConfig) -> Result<f64> {
    let images = generate(gen, y, cfg)?;
    let v = images.iter().map(|i| scorer.aes(i)).collect::<Result<Vec<_>>>()?;
    Ok(mean(&v))
}

/// Relevance plus aesthetics over one shared generation batch.
pub fn total_reward(
    scorer: &dyn Scorer,
    gen: &dyn Generator,
    x: &[String],
    y: &[String],
    cfg: &RewardConfig,
) -> Result<RewardBreakdown> {
    let images = generate(gen, y, cfg)?;
    score_images(scorer, cfg, x, y, &images)
}

/// Differentiable reward over the rows of `images` `[B, m]`, given per-row
/// embeddings of the original and optimized prompts. Returns
/// `(mean rel, mean aes)` as scalar nodes.
pub fn reward_vars(
    g: &mut Graph,
    cfg: &RewardConfig,
    x_emb: &Tensor,
    y_emb: &Tensor,
    images: Var,
) -> Result<(Var, Var)> {
    let xe = g.constant(x_emb.clone());
    let ye = g.constant(y_emb.clone());
    let cx = clip_score_var(g, xe, images)?;
    let cy = clip_score_var(g, ye, images)?;
    let cx = g.scale(cx, cfg.w_orig)?;
    let cy = g.scale(cy, cfg.w_opt)?;
    let rel = g.add(cx, cy)?;
    let rel = g.mean(rel)?;
    let aes = aes_score_var(g, images, cfg.gamma)?;
    let aes = g.mean(aes)?;
    Ok((rel, aes))
}

/// A scalar reward node over a batch of images.
pub trait GraphReward {
    fn reward(&self, g: &mut Graph, images: Var, x_emb: &Tensor, y_emb: &Tensor) -> Result<Var>;
}

impl GraphReward for RewardConfig {
    fn reward(&self, g: &mut Graph, images: Var, x_emb: &Tensor, y_emb: &Tensor) -> Result<Var> {
        let (rel, aes) = reward_vars(g, self, x_emb, y_emb, images)?;
        g.add(rel, aes)
    }
}
