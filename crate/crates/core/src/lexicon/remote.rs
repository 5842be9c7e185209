use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::dataset::Provenance;
use super::rewrite::{oracle_rewrite, Rewriter};
use super::ConceptEntry;
use crate::error::{Error, Result};
use crate::textworld::{Partition, Vocabulary};

/// HTTP rewrite service settings. With no endpoint the client runs offline
/// and defers to the oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemoteConfig {
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub max_attempts: u32,
    pub backoff_ms: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            timeout_ms: 10_000,
            max_attempts: 3,
            backoff_ms: 200,
        }
    }
}

#[derive(Serialize)]
struct Request<'a> {
    template: &'a str,
    concept: &'a str,
    source: &'a str,
}

#[derive(Deserialize)]
struct Response {
    target: String,
}

/// The instruction sent to the rewrite service.
pub fn rewrite_request_text(concept: &str, source: &str) -> String {
    format!(
        "Please rewrite the {concept} in the following sentence to a short sentence which \
         includes a dedicated and concrete scene and also includes concrete objects about {source}"
    )
}

/// Tokenizes a returned target and checks it in-vocabulary, free of abstract
/// tokens and naming 2 or 3 distinct concrete objects.
pub fn validate_rewrite(text: &str, vocab: &Vocabulary) -> Result<Vec<String>> {
    let tokens: Vec<String> = text.split_whitespace().map(String::from).collect();
    let mut objects = BTreeSet::new();
    for t in &tokens {
        match vocab.partition_of(t) {
            Err(_) => return Err(Error::RejectedRewrite(format!("out-of-vocabulary token `{t}`"))),
            Ok(Partition::Abstract) => {
                return Err(Error::RejectedRewrite(format!("abstract token `{t}` in target")))
            }
            Ok(Partition::Special) | Ok(Partition::Modifier) => {
                return Err(Error::RejectedRewrite(format!("reserved token `{t}` in target")))
            }
            Ok(Partition::Concrete) => {
                objects.insert(t.as_str());
            }
            Ok(Partition::Scene) => {}
        }
    }
    if !(2..=3).contains(&objects.len()) {
        return Err(Error::RejectedRewrite(format!(
            "{} concrete objects in {text:?}",
            objects.len()
        )));
    }
    Ok(tokens)
}

pub struct RemoteRewriter {
    config: RemoteConfig,
    vocab: Vocabulary,
    agent: ureq::Agent,
}

impl RemoteRewriter {
    pub fn new(config: RemoteConfig, vocab: Vocabulary) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .build()
            .into();
        Self { config, vocab, agent }
    }

    fn post(&self, url: &str, body: &str) -> std::result::Result<String, String> {
        let mut resp = self
            .agent
            .post(url)
            .header("content-type", "application/json")
            .send(body)
            .map_err(|e| e.to_string())?;
        resp.body_mut().read_to_string().map_err(|e| e.to_string())
    }

    /// Sends one request, retrying transport failures with exponential
    /// backoff, and validates the answer.
    pub fn request(&self, url: &str, concept: &str, source: &[String]) -> Result<Vec<String>> {
        let source = source.join(" ");
        let template = rewrite_request_text(concept, &source);
        let body = serde_json::to_string(&Request {
            template: &template,
            concept,
            source: &source,
        })?;
        let attempts = self.config.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            match self.post(url, &body) {
                Ok(text) => {
                    let resp: Response = serde_json::from_str(&text)
                        .map_err(|e| Error::RejectedRewrite(format!("malformed response: {e}")))?;
                    return validate_rewrite(&resp.target, &self.vocab);
                }
                Err(e) => {
                    log::warn!("rewrite attempt {} for `{concept}` failed: {e}", attempt + 1);
                    last = e;
                    if attempt + 1 < attempts {
                        std::thread::sleep(Duration::from_millis(self.config.backoff_ms << attempt));
                    }
                }
            }
        }
        Err(Error::Retryable {
            attempts,
            reason: last,
        })
    }
}

impl Rewriter for RemoteRewriter {
    fn rewrite(
        &self,
        entry: &ConceptEntry,
        source_index: usize,
        scene_index: usize,
    ) -> Result<(Vec<String>, Provenance)> {
        match &self.config.endpoint {
            None => Ok((oracle_rewrite(entry, source_index, scene_index)?, Provenance::Oracle)),
            Some(url) => {
                let source = entry.source_prompts.get(source_index).ok_or_else(|| {
                    Error::Index(format!("source {source_index} for `{}`", entry.concept))
                })?;
                Ok((self.request(url, &entry.concept, source)?, Provenance::Remote))
            }
        }
    }
}
