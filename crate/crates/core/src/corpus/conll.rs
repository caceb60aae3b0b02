//! CoNLL-style TSV: `token<TAB>tag` per line, blank line between sentences.
//!
//! Metadata travels in `#` comment lines so the body stays standard:
//! `# split=<name>` once at the top of the file and
//! `# noisiness=<0|1> provenance=<name>` before each sentence.
//! Unrecognised comments are ignored.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{Corpus, Provenance, Sentence, Split, Tag};

pub fn read_conll(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    parse_conll(&text, path)
}

/// Parses CoNLL text; `path` is only used in error messages.
pub fn parse_conll(text: &str, path: &Path) -> Result<Corpus> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut split = Split::Train;
    let mut sentences = Vec::new();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let mut meta: Option<(u8, Provenance)> = None;

    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<Tag>, meta: &mut Option<(u8, Provenance)>| {
        if tokens.is_empty() {
            return;
        }
        let (noisiness, provenance) = meta.take().unwrap_or((0, Provenance::Clean));
        sentences.push(Sentence {
            tokens: std::mem::take(tokens),
            tags: std::mem::take(tags),
            noisiness,
            provenance,
        });
    };

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            flush(&mut tokens, &mut tags, &mut meta);
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let comment = comment.trim();
            if let Some(name) = comment.strip_prefix("split=") {
                split = name.trim().parse().map_err(|e: String| parse_err(lineno, e))?;
            } else if comment.starts_with("noisiness=") {
                flush(&mut tokens, &mut tags, &mut meta);
                meta = Some(parse_sentence_header(comment).map_err(|e| parse_err(lineno, e))?);
            }
            continue;
        }
        let Some((token, tag)) = line.split_once('\t') else {
            return Err(parse_err(lineno, format!("expected token<TAB>tag, got {line:?}")));
        };
        if token.is_empty() {
            return Err(parse_err(lineno, "empty token".into()));
        }
        let tag: Tag = tag.trim().parse().map_err(|e: String| parse_err(lineno, e))?;
        tokens.push(token.to_string());
        tags.push(tag);
    }
    flush(&mut tokens, &mut tags, &mut meta);
    Corpus::new(sentences, split)
}

fn parse_sentence_header(comment: &str) -> std::result::Result<(u8, Provenance), String> {
    let mut noisiness = None;
    let mut provenance = None;
    for field in comment.split_whitespace() {
        match field.split_once('=') {
            Some(("noisiness", v)) => {
                noisiness = Some(match v {
                    "0" => 0,
                    "1" => 1,
                    _ => return Err(format!("noisiness must be 0 or 1, got {v:?}")),
                })
            }
            Some(("provenance", v)) => provenance = Some(v.parse::<Provenance>()?),
            _ => return Err(format!("unexpected header field {field:?}")),
        }
    }
    match (noisiness, provenance) {
        (Some(n), Some(p)) => Ok((n, p)),
        _ => Err("sentence header needs noisiness= and provenance=".into()),
    }
}

/// Canonical serialisation used by [`write_conll`].
pub fn to_conll_string(corpus: &Corpus) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# split={}", corpus.split);
    for (i, s) in corpus.sentences.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "# noisiness={} provenance={}", s.noisiness, s.provenance);
        for (tok, tag) in s.tokens.iter().zip(&s.tags) {
            let _ = writeln!(out, "{tok}\t{tag}");
        }
    }
    out
}

pub fn write_conll(corpus: &Corpus, path: &Path) -> Result<()> {
    fs::write(path, to_conll_string(corpus)).map_err(|e| Error::io(format!("write {}", path.display()), e))
}
