use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const HOMOPHONES: &str = include_str!("../../data/homophones.tsv");
const SYNONYMS: &str = include_str!("../../data/synonyms.tsv");
const FILLERS: &str = include_str!("../../data/fillers.txt");
const STOPWORDS: &str = include_str!("../../data/stopwords.txt");
const KEYBOARD: &str = include_str!("../../data/keyboard.tsv");

/// Word lists driving the rule-based perturbation operators.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicons {
    pub homophones: BTreeMap<String, Vec<String>>,
    pub synonyms: BTreeMap<String, Vec<String>>,
    /// Multi-token filler phrases for verbose rewrites.
    pub fillers: Vec<Vec<String>>,
    pub stopwords: BTreeSet<String>,
    /// Adjacent-key neighbours for character substitution.
    pub keyboard: BTreeMap<char, Vec<char>>,
}

/// Parses `word<TAB>replacement1,replacement2` lines.
pub fn parse_replacement_map(text: &str) -> std::result::Result<BTreeMap<String, Vec<String>>, String> {
    let mut map: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (word, reps) = line
            .split_once('\t')
            .ok_or_else(|| format!("line {}: expected word<TAB>replacements", i + 1))?;
        let reps: Vec<String> = reps
            .split(',')
            .map(|r| r.trim().to_string())
            .filter(|r| !r.is_empty())
            .collect();
        if reps.is_empty() {
            return Err(format!("line {}: no replacements", i + 1));
        }
        map.entry(word.trim().to_string()).or_default().extend(reps);
    }
    Ok(map)
}

fn parse_lines(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect()
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))
}

/// Optional overrides for each lexicon file; `None` keeps the built-in list.
#[derive(Debug, Clone, Default)]
pub struct LexiconPaths<'a> {
    pub homophones: Option<&'a Path>,
    pub synonyms: Option<&'a Path>,
    pub fillers: Option<&'a Path>,
    pub stopwords: Option<&'a Path>,
    pub keyboard: Option<&'a Path>,
}

impl Lexicons {
    /// Lists shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_texts(HOMOPHONES, SYNONYMS, FILLERS, STOPWORDS, KEYBOARD).expect("built-in lexicons are valid")
    }

    pub fn load(paths: &LexiconPaths<'_>) -> Result<Self> {
        let pick = |p: Option<&Path>, builtin: &'static str| -> Result<String> {
            p.map(read).unwrap_or_else(|| Ok(builtin.to_string()))
        };
        Self::from_texts(
            &pick(paths.homophones, HOMOPHONES)?,
            &pick(paths.synonyms, SYNONYMS)?,
            &pick(paths.fillers, FILLERS)?,
            &pick(paths.stopwords, STOPWORDS)?,
            &pick(paths.keyboard, KEYBOARD)?,
        )
    }

    pub fn from_texts(homophones: &str, synonyms: &str, fillers: &str, stopwords: &str, keyboard: &str) -> Result<Self> {
        let cfg = |what: &str, e: String| Error::Config(format!("{what} lexicon: {e}"));
        let keyboard = parse_replacement_map(keyboard)
            .map_err(|e| cfg("keyboard", e))?
            .into_iter()
            .map(|(k, v)| {
                let mut chars = k.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) => Ok((c, v.iter().filter_map(|s| s.chars().next()).collect())),
                    _ => Err(cfg("keyboard", format!("key {k:?} is not a single character"))),
                }
            })
            .collect::<Result<BTreeMap<char, Vec<char>>>>()?;
        let lex = Lexicons {
            homophones: parse_replacement_map(homophones).map_err(|e| cfg("homophone", e))?,
            synonyms: parse_replacement_map(synonyms).map_err(|e| cfg("synonym", e))?,
            fillers: parse_lines(fillers)
                .into_iter()
                .map(|l| l.split_whitespace().map(String::from).collect())
                .collect(),
            stopwords: parse_lines(stopwords).into_iter().collect(),
            keyboard,
        };
        lex.validate().map_err(Error::Config)?;
        Ok(lex)
    }

    /// Lowercase entries, single-token replacements, no self-replacement.
    pub fn validate(&self) -> std::result::Result<(), String> {
        for (name, map) in [("homophone", &self.homophones), ("synonym", &self.synonyms)] {
            for (word, reps) in map {
                if word.to_lowercase() != *word {
                    return Err(format!("{name} entry {word:?} is not lowercase"));
                }
                for r in reps {
                    if r == word {
                        return Err(format!("{name} entry {word:?} maps to itself"));
                    }
                    if r.to_lowercase() != *r || r.split_whitespace().count() != 1 {
                        return Err(format!("{name} replacement {r:?} must be one lowercase token"));
                    }
                }
            }
        }
        for w in self.fillers.iter().flatten().chain(&self.stopwords) {
            if w.to_lowercase() != *w {
                return Err(format!("entry {w:?} is not lowercase"));
            }
        }
        for (k, v) in &self.keyboard {
            if v.contains(k) {
                return Err(format!("keyboard key {k:?} lists itself as a neighbour"));
            }
        }
        Ok(())
    }
}
