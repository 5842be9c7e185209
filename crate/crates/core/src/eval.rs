//! Relevance and aesthetic scores for the three pipeline configurations.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::Lexicon;
use crate::plm::{rewrite, Decode, PlmModel};
use crate::reward::{total_reward, Generator, RewardConfig, Scorer};
use crate::seed;
use crate::textworld::{Vocabulary, WorldEmbedding};

/// Margin each relevance step and the first aesthetic step must clear.
pub const MARGIN: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ConfigId {
    /// Pretrained denoiser, original prompts.
    Base,
    /// Pretrained denoiser, rewritten prompts.
    Poac,
    /// Fine-tuned denoiser, rewritten prompts.
    PoacRefl,
}

impl ConfigId {
    pub const ALL: [ConfigId; 3] = [ConfigId::Base, ConfigId::Poac, ConfigId::PoacRefl];

    pub fn uses_rewrite(self) -> bool {
        self != ConfigId::Base
    }
}

impl fmt::Display for ConfigId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConfigId::Base => "BASE",
            ConfigId::Poac => "POAC",
            ConfigId::PoacRefl => "POAC_REFL",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Concepts under test; empty means every lexicon concept.
    pub concepts: Vec<String>,
    pub n_samples: usize,
    pub seed: u64,
    pub configurations: Vec<ConfigId>,
    /// Which source template each concept is evaluated with.
    pub source_index: usize,
    /// Evaluate on every fifth concept and train on the rest.
    pub holdout: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            concepts: Vec::new(),
            n_samples: 64,
            seed: 0,
            configurations: ConfigId::ALL.to_vec(),
            source_index: 0,
            holdout: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Domain("n_samples must be at least 1".into()));
        }
        let mut seen = self.configurations.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.configurations.len() || seen.is_empty() {
            return Err(Error::Domain("configurations must be distinct and non-empty".into()));
        }
        Ok(())
    }
}

/// Splits concept names into (train, test) with every fifth concept held out.
pub fn holdout_split(lexicon: &Lexicon) -> (Vec<String>, Vec<String>) {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, e) in lexicon.entries.iter().enumerate() {
        if i % 5 == 4 {
            test.push(e.concept.clone());
        } else {
            train.push(e.concept.clone());
        }
    }
    (train, test)
}

/// One concept's original prompt and its rewrite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPrompt {
    pub concept: String,
    /// Position in the lexicon; keys the paired generation seed.
    pub index: usize,
    pub original: Vec<String>,
    pub rewritten: Vec<String>,
    /// The rewrite was unusable and the original prompt stands in.
    pub fallback: bool,
}

/// Concepts under test in lexicon order.
pub fn selected_concepts(lexicon: &Lexicon, cfg: &EvalConfig) -> Result<Vec<usize>> {
    let wanted: Vec<String> = if !cfg.concepts.is_empty() {
        cfg.concepts.clone()
    } else if cfg.holdout {
        holdout_split(lexicon).1
    } else {
        return Ok((0..lexicon.len()).collect());
    };
    for c in &wanted {
        if lexicon.entry(c).is_none() {
            return Err(Error::Lexicon(format!("concept `{c}` is not in the lexicon")));
        }
    }
    Ok(lexicon
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| wanted.contains(&e.concept))
        .map(|(i, _)| i)
        .collect())
}

/// Rewrites each selected concept's source prompt with greedy decoding.
pub fn eval_prompts(
    lexicon: &Lexicon,
    plm: &PlmModel,
    vocab: &Vocabulary,
    world: &WorldEmbedding,
    cfg: &EvalConfig,
) -> Result<Vec<EvalPrompt>> {
    let mut out = Vec::new();
    for i in selected_concepts(lexicon, cfg)? {
        let e = &lexicon.entries[i];
        let original = e
            .source_prompts
            .get(cfg.source_index)
            .ok_or_else(|| Error::Index(format!("source {} of `{}`", cfg.source_index, e.concept)))?
            .clone();
        let rewritten = rewrite(plm, vocab, &original, Decode::Greedy)?.tokens;
        let fallback = world.embed_text(&rewritten).is_err();
        if fallback {
            log::warn!("rewrite of `{}` is empty; scoring the original prompt", e.concept);
        }
        out.push(EvalPrompt {
            concept: e.concept.clone(),
            index: i,
            rewritten: if fallback { original.clone() } else { rewritten },
            original,
            fallback,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptScore {
    pub concept: String,
    pub rel: f64,
    pub aes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub config: ConfigId,
    pub rel_score: f64,
    pub aes_score: f64,
    pub n: usize,
    pub seed: u64,
    pub per_concept: Vec<ConceptScore>,
}

/// Scores one configuration. `gen` must already be the denoiser this
/// configuration uses. Sample `k` of concept `c` draws the same noise for
/// every configuration.
pub fn evaluate_config(
    id: ConfigId,
    prompts: &[EvalPrompt],
    gen: &dyn Generator,
    scorer: &dyn Scorer,
    weights: &RewardConfig,
    cfg: &EvalConfig,
) -> Result<ScoreRow> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(Error::Domain("no prompts to evaluate".into()));
    }
    let mut per_concept = Vec::with_capacity(prompts.len());
    let (mut rel, mut aes) = (0.0, 0.0);
    for p in prompts {
        let y = if id.uses_rewrite() { &p.rewritten } else { &p.original };
        let rc = RewardConfig {
            n_samples: cfg.n_samples,
            seed: seed::derive(cfg.seed, &[p.index as u64]),
            ..weights.clone()
        };
        let b = total_reward(scorer, gen, &p.original, y, &rc)?;
        rel += b.rel_samples.iter().sum::<f64>();
        aes += b.aes_samples.iter().sum::<f64>();
        per_concept.push(ConceptScore {
            concept: p.concept.clone(),
            rel: b.rel,
            aes: b.aes,
        });
    }
    let n = prompts.len() * cfg.n_samples;
    let row = ScoreRow {
        config: id,
        rel_score: rel / n as f64,
        aes_score: aes / n as f64,
        n,
        seed: cfg.seed,
        per_concept,
    };
    if !(row.rel_score.is_finite() && row.aes_score.is_finite()) {
        return Err(Error::Numeric(format!("{id} scores are not finite")));
    }
    Ok(row)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub pass: bool,
    pub reasons: Vec<String>,
}

/// CSV of the three rows plus the ordering verdict.
pub fn compare_table(rows: &[ScoreRow]) -> Result<(String, Verdict)> {
    if rows.len() != 3 {
        return Err(Error::Protocol(format!("expected 3 rows, got {}", rows.len())));
    }
    let find = |id: ConfigId| {
        rows.iter()
            .find(|r| r.config == id)
            .ok_or_else(|| Error::Protocol(format!("missing {id} row")))
    };
    let (base, poac, refl) = (find(ConfigId::Base)?, find(ConfigId::Poac)?, find(ConfigId::PoacRefl)?);
    let ordered = [base, poac, refl];
    if ordered.iter().any(|r| r.n != base.n) {
        return Err(Error::Protocol("rows disagree on n".into()));
    }

    let mut csv = String::from("config,rel_score,aes_score,n,seed\n");
    for r in ordered {
        csv.push_str(&format!("{},{:.6},{:.6},{},{}\n", r.config, r.rel_score, r.aes_score, r.n, r.seed));
    }

    let mut reasons = Vec::new();
    for (lo, hi) in [(base, poac), (poac, refl)] {
        if hi.rel_score < lo.rel_score {
            reasons.push(format!("{} rel below {}", hi.config, lo.config));
        } else if hi.rel_score - lo.rel_score < MARGIN {
            reasons.push(format!("{} rel within {MARGIN} of {}", hi.config, lo.config));
        }
    }
    if poac.aes_score - base.aes_score < MARGIN {
        reasons.push(format!("POAC aes not {MARGIN} above BASE"));
    }
    if refl.aes_score < poac.aes_score {
        reasons.push("POAC_REFL aes below POAC".into());
    }
    Ok((
        csv,
        Verdict {
            pass: reasons.is_empty(),
            reasons,
        },
    ))
}
