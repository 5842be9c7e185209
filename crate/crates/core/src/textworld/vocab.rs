use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: &str = "<bos>";
/// Separator between source and target; the desk-scale "Rephrase:".
pub const SEP: &str = "<rephrase>";
pub const EOS: &str = "<eos>";

pub const BOS_ID: usize = 0;
pub const SEP_ID: usize = 1;
pub const EOS_ID: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Special,
    Abstract,
    Concrete,
    Scene,
    Modifier,
}

impl Partition {
    pub const ALL: [Partition; 5] = [
        Partition::Special,
        Partition::Abstract,
        Partition::Concrete,
        Partition::Scene,
        Partition::Modifier,
    ];
}

/// Token alphabet with disjoint partitions. Ids are dense and assigned in
/// order: specials, abstract, concrete, scene, modifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    partition: Vec<Partition>,
    index: HashMap<String, usize>,
}

/// Serialized layout: the token list plus the token names of each partition.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabRecord {
    pub tokens: Vec<String>,
    pub partitions: BTreeMap<Partition, Vec<String>>,
}

impl Vocabulary {
    /// Builds a vocabulary; the three special tokens are added first.
    pub fn new(
        abstract_tokens: &[String],
        concrete: &[String],
        scene: &[String],
        modifiers: &[String],
    ) -> Result<Self> {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            partition: Vec::new(),
            index: HashMap::new(),
        };
        for t in [BOS, SEP, EOS] {
            v.push(t, Partition::Special)?;
        }
        for (list, p) in [
            (abstract_tokens, Partition::Abstract),
            (concrete, Partition::Concrete),
            (scene, Partition::Scene),
            (modifiers, Partition::Modifier),
        ] {
            for t in list {
                v.push(t, p)?;
            }
        }
        Ok(v)
    }

    fn push(&mut self, token: &str, p: Partition) -> Result<()> {
        if token.is_empty() || token.chars().any(char::is_whitespace) {
            return Err(Error::Vocab(format!("invalid token {token:?}")));
        }
        if let Some(&id) = self.index.get(token) {
            return Err(Error::Vocab(format!(
                "`{token}` listed in both {:?} and {p:?}",
                self.partition[id]
            )));
        }
        self.index.insert(token.to_string(), self.tokens.len());
        self.tokens.push(token.to_string());
        self.partition.push(p);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Vocab(token.to_string()))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn partition(&self, id: usize) -> Partition {
        self.partition[id]
    }

    pub fn partition_of(&self, token: &str) -> Result<Partition> {
        Ok(self.partition[self.id(token)?])
    }

    pub fn ids_in(&self, p: Partition) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&i| self.partition[i] == p)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }

    /// Whitespace tokenization followed by [`Vocabulary::encode`].
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn record(&self) -> VocabRecord {
        let mut partitions: BTreeMap<Partition, Vec<String>> = BTreeMap::new();
        for (t, p) in self.tokens.iter().zip(&self.partition) {
            partitions.entry(*p).or_default().push(t.clone());
        }
        VocabRecord {
            tokens: self.tokens.clone(),
            partitions,
        }
    }

    /// Rebuilds from a record, checking that the partitions cover the token
    /// list in id order.
    pub fn from_record(rec: &VocabRecord) -> Result<Self> {
        let get = |p| rec.partitions.get(&p).cloned().unwrap_or_default();
        let specials = get(Partition::Special);
        if specials != [BOS, SEP, EOS] {
            return Err(Error::Vocab(format!("unexpected special tokens {specials:?}")));
        }
        let v = Vocabulary::new(
            &get(Partition::Abstract),
            &get(Partition::Concrete),
            &get(Partition::Scene),
            &get(Partition::Modifier),
        )?;
        if v.tokens != rec.tokens {
            return Err(Error::Vocab(
                "token list disagrees with partitions".to_string(),
            ));
        }
        Ok(v)
    }
}
