//! Concept lexicon, rewrite oracle, modifier injection and the prompt-pair
//! corpus builder.

mod dataset;
mod remote;
mod rewrite;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textworld::{Vocabulary, WorldEmbedding};

pub use dataset::{
    build_dataset, build_dataset_with, from_jsonl, to_jsonl, validate_pair, Dataset, PromptPair,
    Provenance, SOURCES_PER_CONCEPT, TARGETS_PER_SOURCE,
};
pub use remote::{rewrite_request_text, validate_rewrite, RemoteConfig, RemoteRewriter};
pub use rewrite::{inject_modifiers, oracle_rewrite, OracleRewriter, Rewriter, K_MAX, K_MIN};

/// Placeholder token replaced by one scene object in a template.
pub const SLOT: &str = "<obj>";

const BUILTIN_LEXICON: &str = include_str!("../../data/lexicon.json");
const BUILTIN_MODIFIERS: &str = include_str!("../../data/modifiers.txt");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub template: Vec<String>,
    pub objects: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptEntry {
    pub concept: String,
    pub source_prompts: Vec<Vec<String>>,
    pub scenes: Vec<Scene>,
}

impl ConceptEntry {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Lexicon(format!("`{}`: {m}", self.concept)));
        if self.source_prompts.len() != SOURCES_PER_CONCEPT {
            return bad(format!(
                "{} source prompts, expected {SOURCES_PER_CONCEPT}",
                self.source_prompts.len()
            ));
        }
        for p in &self.source_prompts {
            if !p.contains(&self.concept) {
                return bad(format!("source prompt {p:?} lacks the concept"));
            }
        }
        if self.scenes.is_empty() {
            return bad("no scenes".into());
        }
        for sc in &self.scenes {
            let distinct: BTreeSet<_> = sc.objects.iter().collect();
            if !(2..=3).contains(&sc.objects.len()) || distinct.len() != sc.objects.len() {
                return bad(format!("scene needs 2-3 distinct objects, got {:?}", sc.objects));
            }
            let slots = sc.template.iter().filter(|t| *t == SLOT).count();
            if slots != sc.objects.len() {
                return bad(format!("template has {slots} slots for {} objects", sc.objects.len()));
            }
            if sc.template.contains(&self.concept) {
                return bad("template mentions the concept".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Lexicon {
    pub entries: Vec<ConceptEntry>,
}

impl Lexicon {
    /// The curated 40-concept lexicon shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_LEXICON).expect("shipped lexicon is valid")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let lex: Lexicon = serde_json::from_str(s)?;
        lex.validate()?;
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The first `n` concepts.
    pub fn take(&self, n: usize) -> Self {
        Lexicon {
            entries: self.entries.iter().take(n).cloned().collect(),
        }
    }

    pub fn entry(&self, concept: &str) -> Option<&ConceptEntry> {
        self.entries.iter().find(|e| e.concept == concept)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Lexicon("lexicon is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.concept.as_str()) {
                return Err(Error::Lexicon(format!("duplicate concept `{}`", e.concept)));
            }
            e.validate()?;
        }
        let objects = self.objects();
        let concepts: BTreeSet<&str> = self.entries.iter().map(|e| e.concept.as_str()).collect();
        for e in &self.entries {
            for w in e.source_prompts.iter().flatten() {
                if objects.contains(w.as_str()) {
                    return Err(Error::Lexicon(format!(
                        "`{}`: source prompt uses object `{w}`",
                        e.concept
                    )));
                }
            }
            for sc in &e.scenes {
                for w in &sc.template {
                    if concepts.contains(w.as_str()) || objects.contains(w.as_str()) {
                        return Err(Error::Lexicon(format!(
                            "`{}`: template word `{w}` must be a plain scene word",
                            e.concept
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// All concrete objects, sorted.
    pub fn objects(&self) -> BTreeSet<&str> {
        self.entries
            .iter()
            .flat_map(|e| e.scenes.iter().flat_map(|s| s.objects.iter().map(String::as_str)))
            .collect()
    }

    /// Union of scene objects per concept, sorted.
    pub fn concept_objects(&self) -> BTreeMap<String, Vec<String>> {
        self.entries
            .iter()
            .map(|e| {
                let set: BTreeSet<&String> = e.scenes.iter().flat_map(|s| &s.objects).collect();
                (e.concept.clone(), set.into_iter().cloned().collect())
            })
            .collect()
    }

    /// Vocabulary over the lexicon and a modifier pool. Concepts keep lexicon
    /// order; objects and scene words are sorted.
    pub fn vocabulary(&self, modifiers: &[String]) -> Result<Vocabulary> {
        let concepts: Vec<String> = self.entries.iter().map(|e| e.concept.clone()).collect();
        let objects: Vec<String> = self.objects().into_iter().map(String::from).collect();
        let mut taken: BTreeSet<&str> = concepts.iter().map(String::as_str).collect();
        taken.extend(objects.iter().map(String::as_str));
        taken.extend(modifiers.iter().map(String::as_str));
        taken.insert(SLOT);
        let scene: BTreeSet<&str> = self
            .entries
            .iter()
            .flat_map(|e| {
                e.source_prompts
                    .iter()
                    .flatten()
                    .chain(e.scenes.iter().flat_map(|s| &s.template))
            })
            .map(String::as_str)
            .filter(|w| !taken.contains(w))
            .collect();
        let scene: Vec<String> = scene.into_iter().map(String::from).collect();
        Vocabulary::new(&concepts, &objects, &scene, modifiers)
    }

    pub fn world(&self, modifiers: &[String], dim: usize, rho: f64, seed: u64) -> Result<WorldEmbedding> {
        WorldEmbedding::new(self.vocabulary(modifiers)?, self.concept_objects(), dim, rho, seed)
    }
}

/// Parses a modifier pool: one token per line, blank lines and `#` comments
/// ignored.
pub fn parse_modifiers(text: &str) -> Result<Vec<String>> {
    let pool: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect();
    let distinct: BTreeSet<&String> = pool.iter().collect();
    if distinct.len() != pool.len() {
        return Err(Error::Pool("duplicate modifier".into()));
    }
    if let Some(bad) = pool.iter().find(|m| m.contains(char::is_whitespace)) {
        return Err(Error::Pool(format!("modifier {bad:?} contains whitespace")));
    }
    Ok(pool)
}

pub fn builtin_modifiers() -> Vec<String> {
    parse_modifiers(BUILTIN_MODIFIERS).expect("shipped modifier pool is valid")
}

pub fn load_modifiers(path: &Path) -> Result<Vec<String>> {
    parse_modifiers(&std::fs::read_to_string(path)?)
}
