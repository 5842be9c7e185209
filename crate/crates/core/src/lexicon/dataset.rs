use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::rewrite::{inject_modifiers, OracleRewriter, Rewriter, K_MAX, K_MIN};
use super::Lexicon;
use crate::error::{Error, Result};
use crate::seed;
use crate::textworld::{Partition, Vocabulary};

pub const SOURCES_PER_CONCEPT: usize = 3;
pub const TARGETS_PER_SOURCE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Oracle,
    Remote,
}

/// One SFT example. `target` already ends with `modifiers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptPair {
    pub concept: String,
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub modifiers: Vec<String>,
    pub provenance: Provenance,
}

impl PromptPair {
    /// Target with the appended modifiers stripped.
    pub fn scene_part(&self) -> &[String] {
        &self.target[..self.target.len().saturating_sub(self.modifiers.len())]
    }

    /// Distinct concrete objects in the target.
    pub fn objects<'a>(&'a self, vocab: &Vocabulary) -> Vec<&'a str> {
        let set: BTreeSet<&str> = self
            .target
            .iter()
            .map(String::as_str)
            .filter(|t| vocab.partition_of(t).ok() == Some(Partition::Concrete))
            .collect();
        set.into_iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<PromptPair>,
    /// Pairs that reused a scene because the concept had fewer than three.
    pub recycled_scenes: usize,
    /// Remote rewrites rejected by the invariant gate (pairs skipped).
    pub rejected: Vec<String>,
}

/// Independent re-scan of the corpus invariants against a vocabulary.
pub fn validate_pair(pair: &PromptPair, vocab: &Vocabulary) -> Result<()> {
    let reject = |m: String| Err(Error::RejectedRewrite(format!("`{}`: {m}", pair.concept)));
    if vocab.partition_of(&pair.concept)? != Partition::Abstract {
        return reject("concept is not an abstract token".into());
    }
    if !pair.source.contains(&pair.concept) {
        return reject("source lacks the concept".into());
    }
    for t in pair.source.iter().chain(&pair.target) {
        if !vocab.contains(t) {
            return reject(format!("out-of-vocabulary token `{t}`"));
        }
    }
    let mut abstract_hits = pair
        .target
        .iter()
        .filter(|t| vocab.partition_of(t).ok() == Some(Partition::Abstract));
    if let Some(t) = abstract_hits.next() {
        return reject(format!("target contains abstract token `{t}`"));
    }
    let n = pair.objects(vocab).len();
    if !(2..=3).contains(&n) {
        return reject(format!("target has {n} concrete objects"));
    }
    let k = pair.modifiers.len();
    if !(K_MIN..=K_MAX).contains(&k) || pair.target.len() < k {
        return reject(format!("{k} modifiers"));
    }
    if pair.target[pair.target.len() - k..] != pair.modifiers[..] {
        return reject("modifiers are not the target suffix".into());
    }
    for m in &pair.modifiers {
        if vocab.partition_of(m)? != Partition::Modifier {
            return reject(format!("`{m}` is not a modifier"));
        }
    }
    if pair
        .scene_part()
        .iter()
        .any(|t| vocab.partition_of(t).ok() == Some(Partition::Modifier))
    {
        return reject("modifier inside the scene text".into());
    }
    Ok(())
}

/// Offline corpus: every source prompt crossed with every scene.
pub fn build_dataset(lexicon: &Lexicon, pool: &[String], rng_seed: u64) -> Result<Dataset> {
    build_dataset_with(lexicon, pool, rng_seed, &OracleRewriter)
}

/// Builds the corpus with an arbitrary rewriter. Pairs are ordered by
/// (concept, source index, scene rotation); the scene for source `s`,
/// variant `v` is `(s + v) mod n_scenes`. Rejected rewrites are skipped and
/// listed in the result.
pub fn build_dataset_with(
    lexicon: &Lexicon,
    pool: &[String],
    rng_seed: u64,
    rewriter: &dyn Rewriter,
) -> Result<Dataset> {
    lexicon.validate()?;
    let mut out = Dataset {
        pairs: Vec::new(),
        recycled_scenes: 0,
        rejected: Vec::new(),
    };
    for (ci, entry) in lexicon.entries.iter().enumerate() {
        let n_scenes = entry.scenes.len();
        if n_scenes < TARGETS_PER_SOURCE {
            log::warn!(
                "`{}` has {n_scenes} scenes; recycling to reach {TARGETS_PER_SOURCE}",
                entry.concept
            );
        }
        for si in 0..SOURCES_PER_CONCEPT {
            for vi in 0..TARGETS_PER_SOURCE {
                if vi >= n_scenes {
                    out.recycled_scenes += 1;
                }
                let scene = (si + vi) % n_scenes;
                let target = match rewriter.rewrite(entry, si, scene) {
                    Ok(t) => t,
                    Err(Error::RejectedRewrite(reason)) => {
                        log::warn!("skipping ({}, {si}, {vi}): {reason}", entry.concept);
                        out.rejected.push(format!("{}/{si}/{vi}: {reason}", entry.concept));
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let (text, provenance) = target;
                let mseed = seed::derive(rng_seed, &[ci as u64, si as u64, vi as u64]);
                let (full, modifiers) = inject_modifiers(&text, pool, mseed, K_MIN, K_MAX)?;
                out.pairs.push(PromptPair {
                    concept: entry.concept.clone(),
                    source: entry.source_prompts[si].clone(),
                    target: full,
                    modifiers,
                    provenance,
                });
            }
        }
    }
    Ok(out)
}

pub fn to_jsonl(pairs: &[PromptPair]) -> Result<String> {
    let mut s = String::new();
    for p in pairs {
        s.push_str(&serde_json::to_string(p)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn from_jsonl(text: &str) -> Result<Vec<PromptPair>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
