//! Template-based synthetic slot-filling data.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::tensor::Rng;

use super::{Corpus, Sentence, Split, Tag};

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Word(String),
    Slot(String),
}

/// A whitespace-tokenized utterance with `{slot}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pieces: Vec<Piece>,
}

impl Template {
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let pieces = text
            .split_whitespace()
            .map(|w| match w.strip_prefix('{').and_then(|r| r.strip_suffix('}')) {
                Some(slot) if !slot.is_empty() && !slot.contains(['{', '}']) => Ok(Piece::Slot(slot.to_string())),
                Some(_) => Err(format!("bad placeholder {w:?}")),
                None if w.contains(['{', '}']) => Err(format!("placeholder must be a whole token: {w:?}")),
                None => Ok(Piece::Word(w.to_string())),
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if pieces.is_empty() {
            return Err("empty template".into());
        }
        Ok(Template { pieces })
    }

    pub fn slots(&self) -> impl Iterator<Item = &str> {
        self.pieces.iter().filter_map(|p| match p {
            Piece::Slot(s) => Some(s.as_str()),
            Piece::Word(_) => None,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct TemplateBank(pub Vec<Template>);

impl TemplateBank {
    /// One template per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
            .map(|(i, l)| Template::parse(l).map_err(|e| format!("line {}: {e}", i + 1)))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(TemplateBank)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Slot type → candidate surface values (each possibly several tokens).
#[derive(Debug, Clone, Default)]
pub struct ValueBank(pub BTreeMap<String, Vec<String>>);

impl ValueBank {
    /// `slot<TAB>value` per line.
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut map: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (slot, value) = line
                .split_once('\t')
                .ok_or_else(|| format!("line {}: expected slot<TAB>value", i + 1))?;
            if value.split_whitespace().next().is_none() {
                return Err(format!("line {}: empty value", i + 1));
            }
            map.entry(slot.trim().to_string()).or_default().push(value.trim().to_string());
        }
        Ok(ValueBank(map))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Samples `n` sentences. Sentence `i` depends only on (`seed`, `i`) and the banks.
pub fn generate_synthetic(n: usize, templates: &TemplateBank, values: &ValueBank, seed: u64) -> Result<Corpus> {
    if templates.0.is_empty() && n > 0 {
        return Err(Error::Config("template bank is empty".into()));
    }
    for t in &templates.0 {
        for slot in t.slots() {
            if values.0.get(slot).map_or(true, Vec::is_empty) {
                return Err(Error::Config(format!("placeholder {{{slot}}} has no values")));
            }
        }
    }
    let sentences = (0..n)
        .map(|i| {
            let mut rng = Rng::keyed(seed, "synthetic", i as u64);
            let template = &templates.0[rng.gen_range(0..templates.0.len())];
            let mut tokens = Vec::new();
            let mut tags = Vec::new();
            for piece in &template.pieces {
                match piece {
                    Piece::Word(w) => {
                        tokens.push(w.clone());
                        tags.push(Tag::O);
                    }
                    Piece::Slot(slot) => {
                        let choices = &values.0[slot];
                        let value = &choices[rng.gen_range(0..choices.len())];
                        for (j, w) in value.split_whitespace().enumerate() {
                            tokens.push(w.to_string());
                            tags.push(if j == 0 { Tag::B(slot.clone()) } else { Tag::I(slot.clone()) });
                        }
                    }
                }
            }
            Sentence::new(tokens, tags)
        })
        .collect();
    Corpus::new(sentences, Split::Train)
}
