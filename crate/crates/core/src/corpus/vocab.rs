use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};

use super::{Corpus, Tag};

/// Token ↔ id map. Ids `0..Vocab::RESERVED` are the special symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;
    /// Aggregate (sentence-level) position marker.
    pub const CLS: usize = 2;
    pub const MASK: usize = 3;
    pub const RESERVED: usize = 4;
    const SPECIALS: [&'static str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[MASK]"];

    /// Lowercased tokens with count ≥ `min_freq` across all corpora, sorted.
    pub fn build(corpora: &[&Corpus], min_freq: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for c in corpora {
            for s in &c.sentences {
                for t in &s.tokens {
                    *counts.entry(t.to_lowercase()).or_default() += 1;
                }
            }
        }
        let kept = counts
            .into_iter()
            .filter(|(t, n)| *n >= min_freq.max(1) && !Self::SPECIALS.contains(&t.as_str()))
            .map(|(t, _)| t);
        Self::from_tokens(kept)
    }

    fn from_tokens(regular: impl IntoIterator<Item = String>) -> Self {
        let tokens: Vec<String> = Self::SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(regular)
            .collect();
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == Self::RESERVED
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(&token.to_lowercase())
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(&token.to_lowercase()).copied().unwrap_or(Self::UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// One token per line in id order, reserved symbols first.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            let _ = writeln!(out, "{t}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < Self::RESERVED || lines[..Self::RESERVED] != Self::SPECIALS {
            return Err(Error::Config("vocabulary file must start with the reserved symbols".into()));
        }
        let v = Self::from_tokens(lines[Self::RESERVED..].iter().map(|s| s.to_string()));
        if v.ids.len() != v.tokens.len() {
            return Err(Error::Config("vocabulary file has duplicate entries".into()));
        }
        Ok(v)
    }
}

pub fn build_vocab(corpus: &Corpus, min_freq: usize) -> Vocab {
    Vocab::build(&[corpus], min_freq)
}

/// Ordered BIO label set: `O`, then `B-x`, `I-x` per slot type in sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagSet {
    tags: Vec<Tag>,
    index: HashMap<Tag, usize>,
}

impl TagSet {
    pub fn new<'a>(slot_types: impl IntoIterator<Item = &'a String>) -> Self {
        let mut sorted: Vec<&String> = slot_types.into_iter().collect();
        sorted.sort();
        sorted.dedup();
        let mut tags = vec![Tag::O];
        for s in sorted {
            tags.push(Tag::B(s.clone()));
            tags.push(Tag::I(s.clone()));
        }
        let index = tags.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        TagSet { tags, index }
    }

    pub fn from_corpora(corpora: &[&Corpus]) -> Self {
        let all: Vec<&String> = corpora.iter().flat_map(|c| c.slot_types.iter()).collect();
        Self::new(all)
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tags(&self) -> &[Tag] {
        &self.tags
    }

    pub fn tag(&self, id: usize) -> &Tag {
        &self.tags[id]
    }

    pub fn id(&self, tag: &Tag) -> Option<usize> {
        self.index.get(tag).copied()
    }

    pub fn encode(&self, tags: &[Tag]) -> Result<Vec<usize>> {
        tags.iter()
            .map(|t| self.id(t).ok_or_else(|| Error::Config(format!("tag {t} not in tag set"))))
            .collect()
    }

    pub fn slot_types(&self) -> Vec<String> {
        self.tags.iter().filter_map(|t| match t {
            Tag::B(s) => Some(s.clone()),
            _ => None,
        }).collect()
    }

    pub fn to_text(&self) -> String {
        self.slot_types().join("\n") + "\n"
    }

    pub fn from_text(text: &str) -> Self {
        let slots: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        Self::new(&slots)
    }
}
