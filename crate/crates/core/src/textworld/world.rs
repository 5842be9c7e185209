use std::collections::{BTreeMap, BTreeSet};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::vocab::{Partition, VocabRecord, Vocabulary};
use crate::autodiff::{Graph, Tensor, Var, MIN_NORM};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

pub const DEFAULT_DIM: usize = 16;
pub const DEFAULT_RHO: f64 = 1.0;
pub const DEFAULT_GAMMA: f64 = 4.0;
pub const DEFAULT_RENDER_SIGMA: f64 = 0.05;

const TOKEN_STREAM: u64 = 1;
const OFFSET_STREAM: u64 = 2;

/// Scene signatures below this norm are treated as cancelling out.
const SCENE_MIN_NORM: f64 = 1e-9;

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v.iter_mut() {
        *x /= n;
    }
    n
}

fn gaussian(rng: &mut Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Seeded token embeddings over a [`Vocabulary`].
///
/// Every non-special token gets a unit vector. Concrete, scene and modifier
/// tokens draw theirs i.i.d.; an abstract concept `c` sits at angle
/// `atan(rho)` from the normalized sum of its objects' signatures.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldEmbedding {
    vocab: Vocabulary,
    seed: u64,
    dim: usize,
    rho: f64,
    concept_objects: BTreeMap<String, Vec<String>>,
    vectors: Vec<Vec<f64>>,
}

/// On-disk form. Vectors are regenerated from the seed, never stored.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldRecord {
    pub seed: u64,
    pub dim: usize,
    pub rho: f64,
    pub tokens: Vec<String>,
    pub partitions: BTreeMap<Partition, Vec<String>>,
    pub concept_objects: BTreeMap<String, Vec<String>>,
}

impl WorldEmbedding {
    /// `concept_objects` must list at least one concrete object for every
    /// abstract token of `vocab`.
    pub fn new(
        vocab: Vocabulary,
        concept_objects: BTreeMap<String, Vec<String>>,
        dim: usize,
        rho: f64,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("world dimension must be positive".into()));
        }
        if !(rho.is_finite() && rho >= 0.0) {
            return Err(Error::Domain(format!("rho must be finite and >= 0, got {rho}")));
        }
        let mut vectors = vec![Vec::new(); vocab.len()];
        for (id, slot) in vectors.iter_mut().enumerate() {
            match vocab.partition(id) {
                Partition::Special => *slot = vec![0.0; dim],
                Partition::Abstract => {}
                _ => {
                    let mut v = gaussian(&mut seed::derived_rng(seed, &[TOKEN_STREAM, id as u64]), dim);
                    normalize(&mut v);
                    *slot = v;
                }
            }
        }
        for (concept, objs) in &concept_objects {
            if vocab.partition_of(concept)? != Partition::Abstract {
                return Err(Error::Vocab(format!("`{concept}` is not an abstract concept")));
            }
            for o in objs {
                if vocab.partition_of(o)? != Partition::Concrete {
                    return Err(Error::Vocab(format!("`{o}` is not a concrete object")));
                }
            }
        }
        for id in vocab.ids_in(Partition::Abstract).collect::<Vec<_>>() {
            let concept = vocab.token(id);
            let objs = concept_objects
                .get(concept)
                .filter(|o| !o.is_empty())
                .ok_or_else(|| Error::Lexicon(format!("concept `{concept}` has no objects")))?;
            let ids: BTreeSet<usize> = objs.iter().map(|o| vocab.id(o)).collect::<Result<_>>()?;
            let mut d = vec![0.0; dim];
            for o in ids {
                for (x, s) in d.iter_mut().zip(&vectors[o]) {
                    *x += s;
                }
            }
            let n = normalize(&mut d);
            if n < SCENE_MIN_NORM {
                return Err(Error::DegenerateScene(n));
            }
            let mut orng = seed::derived_rng(seed, &[OFFSET_STREAM, id as u64]);
            let mut u = gaussian(&mut orng, dim);
            let p = dot(&u, &d);
            for (x, dx) in u.iter_mut().zip(&d) {
                *x -= p * dx;
            }
            if dim > 1 {
                normalize(&mut u);
            } else {
                u = vec![0.0];
            }
            let mut a: Vec<f64> = d.iter().zip(&u).map(|(x, y)| x + rho * y).collect();
            normalize(&mut a);
            vectors[id] = a;
        }
        Ok(Self {
            vocab,
            seed,
            dim,
            rho,
            concept_objects,
            vectors,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn concept_objects(&self) -> &BTreeMap<String, Vec<String>> {
        &self.concept_objects
    }

    /// Unit vector of a non-special token (zero for specials).
    pub fn vector(&self, id: usize) -> &[f64] {
        &self.vectors[id]
    }

    pub fn token_vector(&self, token: &str) -> Result<&[f64]> {
        Ok(&self.vectors[self.vocab.id(token)?])
    }

    /// Normalized sum over the distinct non-special tokens of `ids`.
    ///
    /// Summing over the token set (in id order) makes the result exactly
    /// invariant to permutation and repetition.
    pub fn embed_ids(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let mut set = BTreeSet::new();
        for &id in ids {
            if id >= self.vocab.len() {
                return Err(Error::Vocab(format!("token id {id}")));
            }
            if self.vocab.partition(id) != Partition::Special {
                set.insert(id);
            }
        }
        if set.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let mut sum = vec![0.0; self.dim];
        for id in set {
            for (x, v) in sum.iter_mut().zip(&self.vectors[id]) {
                *x += v;
            }
        }
        let n = normalize(&mut sum);
        if n < MIN_NORM {
            return Err(Error::Domain(format!("prompt embedding has norm {n:e}")));
        }
        Ok(sum)
    }

    pub fn embed_text<S: AsRef<str>>(&self, prompt: &[S]) -> Result<Vec<f64>> {
        self.embed_ids(&self.vocab.encode(prompt)?)
    }

    /// `normalize(sum of signatures) + noise_sigma * g` with `g ~ N(0, I)`
    /// drawn from `rng`. Noise is drawn even when `noise_sigma` is zero so the
    /// stream advances identically.
    pub fn render<S: AsRef<str>>(&self, objects: &[S], noise_sigma: f64, rng: &mut Rng) -> Result<Vec<f64>> {
        let mut set = BTreeSet::new();
        for o in objects {
            let id = self.vocab.id(o.as_ref())?;
            if self.vocab.partition(id) != Partition::Concrete {
                return Err(Error::Vocab(format!("`{}` is not a concrete object", o.as_ref())));
            }
            set.insert(id);
        }
        if set.is_empty() {
            return Err(Error::EmptyScene);
        }
        let mut x = vec![0.0; self.dim];
        for id in set {
            for (a, s) in x.iter_mut().zip(&self.vectors[id]) {
                *a += s;
            }
        }
        let n = normalize(&mut x);
        if n <= SCENE_MIN_NORM {
            return Err(Error::DegenerateScene(n));
        }
        let g = gaussian(rng, self.dim);
        for (a, e) in x.iter_mut().zip(g) {
            *a += noise_sigma * e;
        }
        Ok(x)
    }

    /// Noise-free render.
    pub fn ideal_render<S: AsRef<str>>(&self, objects: &[S]) -> Result<Vec<f64>> {
        self.render(objects, 0.0, &mut seed::rng(0))
    }

    pub fn record(&self) -> WorldRecord {
        let VocabRecord { tokens, partitions } = self.vocab.record();
        WorldRecord {
            seed: self.seed,
            dim: self.dim,
            rho: self.rho,
            tokens,
            partitions,
            concept_objects: self.concept_objects.clone(),
        }
    }

    pub fn from_record(rec: WorldRecord) -> Result<Self> {
        let vocab = Vocabulary::from_record(&VocabRecord {
            tokens: rec.tokens,
            partitions: rec.partitions,
        })?;
        Self::new(vocab, rec.concept_objects, rec.dim, rec.rho, rec.seed)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.record())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_record(serde_json::from_str(s)?)
    }
}

/// Cosine between a text embedding and an image.
pub fn clip_score(text_emb: &[f64], image: &[f64]) -> Result<f64> {
    if text_emb.len() != image.len() {
        return Err(Error::Shape(format!(
            "text embedding of {} vs image of {}",
            text_emb.len(),
            image.len()
        )));
    }
    let ni = dot(image, image).sqrt();
    let nt = dot(text_emb, text_emb).sqrt();
    if ni < MIN_NORM || nt < MIN_NORM {
        return Err(Error::Domain(format!("clip score with zero vector ({nt:e}, {ni:e})")));
    }
    Ok(dot(text_emb, image) / (nt * ni))
}

/// `exp(-gamma * (|image| - 1)^2)`.
pub fn aes_score(image: &[f64], gamma: f64) -> Result<f64> {
    if !image.iter().all(|x| x.is_finite()) {
        return Err(Error::Numeric("non-finite image".into()));
    }
    let n = dot(image, image).sqrt();
    Ok((-gamma * (n - 1.0).powi(2)).exp())
}

/// Differentiable [`clip_score`] over rows: `text` and `image` are `[m]` or
/// `[n, m]`; the result has one entry per row.
pub fn clip_score_var(g: &mut Graph, text: Var, image: Var) -> Result<Var> {
    g.cosine(text, image)
}

/// Differentiable [`aes_score`] over rows.
pub fn aes_score_var(g: &mut Graph, image: Var, gamma: f64) -> Result<Var> {
    let n = g.norm(image)?;
    let one = g.constant(Tensor::scalar(1.0)?);
    let d = g.sub(n, one)?;
    let sq = g.square(d)?;
    let e = g.scale(sq, -gamma)?;
    g.exp(e)
}
