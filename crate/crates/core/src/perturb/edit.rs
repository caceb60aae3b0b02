//! Token edit scripts and tag realignment.

use crate::corpus::{spans_from_tags, Tag};
use crate::error::{Error, Result};

/// One step of an edit script. Every variant except `Insert` consumes one
/// original token, in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Edit {
    Keep,
    Delete,
    Insert(String),
    Substitute(String),
}

impl Edit {
    fn consumes(&self) -> bool {
        !matches!(self, Edit::Insert(_))
    }
}

fn check_script(len: usize, script: &[Edit]) -> Result<()> {
    let consumed = script.iter().filter(|e| e.consumes()).count();
    if consumed != len {
        return Err(Error::Contract(format!(
            "edit script consumes {consumed} tokens but the sentence has {len}"
        )));
    }
    Ok(())
}

/// Tags after applying `script` to a sentence tagged `original`.
///
/// Kept and substituted tokens keep their slot; inserted tokens are `O`. A
/// surviving token becomes `B-X` when it is the first surviving token of its
/// entity in the output run, so deletions and insertions never leave an
/// orphan `I-X`.
pub fn realign_tags(original: &[Tag], script: &[Edit]) -> Result<Vec<Tag>> {
    check_script(original.len(), script)?;
    let spans = spans_from_tags(original).map_err(|message| Error::Validation { sentence: 0, message })?;
    let mut span_of = vec![None; original.len()];
    for (k, s) in spans.iter().enumerate() {
        for slot in &mut span_of[s.start..s.end] {
            *slot = Some(k);
        }
    }

    let mut out = Vec::with_capacity(script.len());
    let mut src = 0;
    let mut prev_span = None;
    for e in script {
        match e {
            Edit::Insert(_) => {
                out.push(Tag::O);
                prev_span = None;
            }
            Edit::Delete => src += 1,
            Edit::Keep | Edit::Substitute(_) => {
                let tag = match (span_of[src], original[src].slot()) {
                    (Some(k), Some(label)) if prev_span == Some(k) => Tag::I(label.to_string()),
                    (Some(_), Some(label)) => Tag::B(label.to_string()),
                    _ => Tag::O,
                };
                prev_span = span_of[src];
                out.push(tag);
                src += 1;
            }
        }
    }
    Ok(out)
}

/// Output tokens of `script` applied to `tokens`.
pub fn apply_script(tokens: &[String], script: &[Edit]) -> Result<Vec<String>> {
    check_script(tokens.len(), script)?;
    let mut out = Vec::with_capacity(script.len());
    let mut src = 0;
    for e in script {
        match e {
            Edit::Keep => {
                out.push(tokens[src].clone());
                src += 1;
            }
            Edit::Delete => src += 1,
            Edit::Insert(t) => out.push(t.clone()),
            Edit::Substitute(t) => {
                out.push(t.clone());
                src += 1;
            }
        }
    }
    Ok(out)
}

/// Removes the character at `index` (in chars, not bytes).
pub fn char_delete(token: &str, index: usize) -> String {
    token
        .chars()
        .enumerate()
        .filter(|&(i, _)| i != index)
        .map(|(_, c)| c)
        .collect()
}

/// Inserts `ch` before character `index`; `index == len` appends.
pub fn char_insert(token: &str, index: usize, ch: char) -> String {
    let mut chars: Vec<char> = token.chars().collect();
    chars.insert(index.min(chars.len()), ch);
    chars.into_iter().collect()
}

pub fn char_substitute(token: &str, index: usize, ch: char) -> String {
    token
        .chars()
        .enumerate()
        .map(|(i, c)| if i == index { ch } else { c })
        .collect()
}
