//! Sentences with BIO slot tags, CoNLL I/O, synthetic data and vocabularies.

mod conll;
mod synthetic;
mod vocab;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::fnv1a;

pub use conll::{parse_conll, read_conll, to_conll_string, write_conll};
pub use synthetic::{generate_synthetic, Template, TemplateBank, ValueBank};
pub use vocab::{build_vocab, TagSet, Vocab};

/// One BIO label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    O,
    B(String),
    I(String),
}

impl Tag {
    pub fn slot(&self) -> Option<&str> {
        match self {
            Tag::O => None,
            Tag::B(s) | Tag::I(s) => Some(s),
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::O => f.write_str("O"),
            Tag::B(s) => write!(f, "B-{s}"),
            Tag::I(s) => write!(f, "I-{s}"),
        }
    }
}

impl FromStr for Tag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "O" => Ok(Tag::O),
            _ => match s.split_once('-') {
                Some(("B", slot)) if !slot.is_empty() => Ok(Tag::B(slot.to_string())),
                Some(("I", slot)) if !slot.is_empty() => Ok(Tag::I(slot.to_string())),
                _ => Err(format!("invalid BIO tag {s:?}")),
            },
        }
    }
}

/// Where a sentence came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Provenance {
    Clean,
    Typos,
    Speech,
    Paraphrase,
    Simplification,
    Verbose,
    Mixed(Vec<Provenance>),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Provenance::Clean => "clean",
            Provenance::Typos => "typos",
            Provenance::Speech => "speech",
            Provenance::Paraphrase => "paraphrase",
            Provenance::Simplification => "simplification",
            Provenance::Verbose => "verbose",
            Provenance::Mixed(parts) => {
                f.write_str("mixed:")?;
                for (i, p) in parts.iter().enumerate() {
                    if i > 0 {
                        f.write_str("+")?;
                    }
                    write!(f, "{p}")?;
                }
                return Ok(());
            }
        };
        f.write_str(name)
    }
}

impl FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if let Some(rest) = s.strip_prefix("mixed:") {
            let parts = rest
                .split('+')
                .map(|p| match p.parse::<Provenance>() {
                    Ok(Provenance::Mixed(_)) | Ok(Provenance::Clean) => Err(format!("invalid mixed component {p:?}")),
                    other => other,
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            return Ok(Provenance::Mixed(parts));
        }
        Ok(match s {
            "clean" => Provenance::Clean,
            "typos" => Provenance::Typos,
            "speech" => Provenance::Speech,
            "paraphrase" => Provenance::Paraphrase,
            "simplification" => Provenance::Simplification,
            "verbose" => Provenance::Verbose,
            _ => return Err(format!("unknown provenance {s:?}")),
        })
    }
}

/// A tokenized utterance with gold slot tags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub tags: Vec<Tag>,
    /// 0 = clean, 1 = perturbed.
    pub noisiness: u8,
    pub provenance: Provenance,
}

impl Sentence {
    /// A clean sentence. Does not validate; see [`Sentence::validate`].
    pub fn new(tokens: Vec<String>, tags: Vec<Tag>) -> Self {
        Sentence {
            tokens,
            tags,
            noisiness: 0,
            provenance: Provenance::Clean,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.tags.len() != self.tokens.len() {
            return Err(format!("{} tokens but {} tags", self.tokens.len(), self.tags.len()));
        }
        check_bio(&self.tags)?;
        let clean = self.provenance == Provenance::Clean;
        match (self.noisiness, clean) {
            (0, true) | (1, false) => Ok(()),
            (n, _) => Err(format!("noisiness {n} inconsistent with provenance {}", self.provenance)),
        }
    }

    /// Stable content hash over tokens and tags.
    pub fn content_hash(&self) -> u64 {
        let mut buf = Vec::new();
        for (t, g) in self.tokens.iter().zip(&self.tags) {
            buf.extend_from_slice(t.as_bytes());
            buf.push(0x1f);
            buf.extend_from_slice(g.to_string().as_bytes());
            buf.push(0x1e);
        }
        fnv1a(&buf)
    }
}

/// A gold or predicted entity: tokens `start..end` carrying slot `label`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlotSpan {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

impl SlotSpan {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        SlotSpan {
            start,
            end,
            label: label.into(),
        }
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.start..self.end).contains(&i)
    }
}

/// Checks that every `I-X` follows `B-X` or `I-X`.
pub fn check_bio(tags: &[Tag]) -> std::result::Result<(), String> {
    for (i, t) in tags.iter().enumerate() {
        if let Tag::I(x) = t {
            let ok = i > 0 && matches!(&tags[i - 1], Tag::B(p) | Tag::I(p) if p == x);
            if !ok {
                return Err(format!("I-{x} at position {i} does not continue a {x} span"));
            }
        }
    }
    Ok(())
}

/// Promotes every orphan `I-X` to `B-X`, making the sequence well-formed.
pub fn repair_bio(tags: &mut [Tag]) {
    for i in 0..tags.len() {
        if let Tag::I(x) = &tags[i] {
            let continues = i > 0 && matches!(&tags[i - 1], Tag::B(p) | Tag::I(p) if p == x);
            if !continues {
                tags[i] = Tag::B(x.clone());
            }
        }
    }
}

/// Maximal `B-X (I-X)*` runs of a well-formed tag sequence, ordered by start.
pub fn spans_from_tags(tags: &[Tag]) -> std::result::Result<Vec<SlotSpan>, String> {
    check_bio(tags)?;
    let mut spans = Vec::new();
    let mut i = 0;
    while i < tags.len() {
        if let Tag::B(x) = &tags[i] {
            let mut end = i + 1;
            while end < tags.len() && matches!(&tags[end], Tag::I(y) if y == x) {
                end += 1;
            }
            spans.push(SlotSpan::new(i, end, x.clone()));
            i = end;
        } else {
            i += 1;
        }
    }
    Ok(spans)
}

/// Inverse of [`spans_from_tags`] for non-overlapping spans.
pub fn tags_from_spans(len: usize, spans: &[SlotSpan]) -> Vec<Tag> {
    let mut tags = vec![Tag::O; len];
    for s in spans {
        for i in s.start..s.end.min(len) {
            tags[i] = if i == s.start {
                Tag::B(s.label.clone())
            } else {
                Tag::I(s.label.clone())
            };
        }
    }
    tags
}

pub fn extract_spans(sentence: &Sentence) -> Result<Vec<SlotSpan>> {
    spans_from_tags(&sentence.tags).map_err(|message| Error::Validation { sentence: 0, message })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    /// Every slot type used by a tag, sorted.
    pub slot_types: BTreeSet<String>,
    pub split: Split,
}

impl Corpus {
    /// Validates every sentence and collects the slot inventory.
    pub fn new(sentences: Vec<Sentence>, split: Split) -> Result<Self> {
        for (i, s) in sentences.iter().enumerate() {
            s.validate().map_err(|message| Error::Validation { sentence: i, message })?;
        }
        let slot_types = sentences
            .iter()
            .flat_map(|s| s.tags.iter().filter_map(|t| t.slot().map(str::to_string)))
            .collect();
        Ok(Corpus {
            sentences,
            slot_types,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Longest sentence in tokens.
    pub fn max_len(&self) -> usize {
        self.sentences.iter().map(Sentence::len).max().unwrap_or(0)
    }
}
