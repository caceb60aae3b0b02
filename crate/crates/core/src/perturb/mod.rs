//! Rule-based character, word and sentence level noise with tag realignment.

mod edit;
mod lexicon;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::corpus::{Corpus, Provenance, Sentence, Tag};
use crate::error::{Error, Result};
use crate::par::{self, ExecMode};
use crate::tensor::{Rng, RngKey};

pub use edit::{apply_script, char_delete, char_insert, char_substitute, realign_tags, Edit};
pub use lexicon::{parse_replacement_map, LexiconPaths, Lexicons};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    Character,
    Word,
    Sentence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PerturbOp {
    CharInsert,
    CharDelete,
    CharSubstitute,
    WordDelete,
    WordInsert,
    WordHomophone,
    SentParaphrase,
    SentSimplify,
    SentVerbose,
}

impl PerturbOp {
    pub const ALL: [PerturbOp; 9] = [
        PerturbOp::CharInsert,
        PerturbOp::CharDelete,
        PerturbOp::CharSubstitute,
        PerturbOp::WordDelete,
        PerturbOp::WordInsert,
        PerturbOp::WordHomophone,
        PerturbOp::SentParaphrase,
        PerturbOp::SentSimplify,
        PerturbOp::SentVerbose,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbOp::CharInsert => "char_insert",
            PerturbOp::CharDelete => "char_delete",
            PerturbOp::CharSubstitute => "char_substitute",
            PerturbOp::WordDelete => "word_delete",
            PerturbOp::WordInsert => "word_insert",
            PerturbOp::WordHomophone => "word_homophone",
            PerturbOp::SentParaphrase => "sent_paraphrase",
            PerturbOp::SentSimplify => "sent_simplify",
            PerturbOp::SentVerbose => "sent_verbose",
        }
    }

    pub fn level(self) -> Level {
        use PerturbOp::*;
        match self {
            CharInsert | CharDelete | CharSubstitute => Level::Character,
            WordDelete | WordInsert | WordHomophone => Level::Word,
            SentParaphrase | SentSimplify | SentVerbose => Level::Sentence,
        }
    }

    /// Provenance recorded on sentences this operator touched.
    pub fn family(self) -> Provenance {
        use PerturbOp::*;
        match self {
            CharInsert | CharDelete | CharSubstitute => Provenance::Typos,
            WordDelete | WordInsert | WordHomophone => Provenance::Speech,
            SentParaphrase => Provenance::Paraphrase,
            SentSimplify => Provenance::Simplification,
            SentVerbose => Provenance::Verbose,
        }
    }

    pub fn default_rate(self) -> f64 {
        match self {
            PerturbOp::WordHomophone => 0.5,
            op => match op.level() {
                Level::Character => 0.15,
                Level::Word => 0.1,
                Level::Sentence => 1.0,
            },
        }
    }
}

impl fmt::Display for PerturbOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbOp {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        PerturbOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| format!("unknown perturbation operator {s:?}"))
    }
}

/// One operator application: which op, how often, and under which seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    pub level: Level,
    pub op: PerturbOp,
    /// Expected fraction of eligible units affected.
    pub rate: f64,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn new(op: PerturbOp, rate: f64, seed: u64) -> Result<Self> {
        let spec = PerturbationSpec { level: op.level(), op, rate, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.level != self.op.level() {
            return Err(Error::Config(format!("{} is not a {:?}-level operator", self.op, self.level)));
        }
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::Config(format!("{} rate {} outside [0, 1]", self.op, self.rate)));
        }
        Ok(())
    }

    /// Parses `op` or `op@rate`; the seed is supplied by the caller.
    pub fn parse(text: &str, seed: u64) -> Result<Self> {
        let (name, rate) = match text.split_once('@') {
            Some((n, r)) => {
                let rate = r
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad rate in {text:?}")))?;
                (n.trim(), Some(rate))
            }
            None => (text.trim(), None),
        };
        let op: PerturbOp = name.parse().map_err(Error::Config)?;
        Self::new(op, rate.unwrap_or_else(|| op.default_rate()), seed)
    }
}

impl fmt::Display for PerturbationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.op, self.rate)
    }
}

fn is_entity(tag: &Tag) -> bool {
    !matches!(tag, Tag::O)
}

/// Gaps `0..=n` where a phrase can go without splitting an entity.
fn open_gaps(tags: &[Tag]) -> Vec<usize> {
    (0..=tags.len())
        .filter(|&g| !matches!(tags.get(g), Some(Tag::I(_))))
        .collect()
}

/// Script that inserts `phrase` at gap `gap` and keeps everything else.
fn insertion_script(len: usize, gap: usize, phrase: &[String]) -> Vec<Edit> {
    let mut script: Vec<Edit> = Vec::with_capacity(len + phrase.len());
    for i in 0..=len {
        if i == gap {
            script.extend(phrase.iter().cloned().map(Edit::Insert));
        }
        if i < len {
            script.push(Edit::Keep);
        }
    }
    script
}

fn keyboard_neighbour(lex: &Lexicons, c: char, rng: &mut Rng) -> Option<char> {
    let lower = c.to_lowercase().next()?;
    let options = lex.keyboard.get(&lower)?;
    options.choose(rng).copied()
}

fn random_letter(lex: &Lexicons, rng: &mut Rng) -> char {
    let keys: Vec<char> = lex.keyboard.keys().copied().collect();
    keys.choose(rng).copied().unwrap_or_else(|| (b'a' + rng.gen_range(0..26u8)) as char)
}

fn char_script(op: PerturbOp, tokens: &[String], rate: f64, lex: &Lexicons, rng: &mut Rng) -> Vec<Edit> {
    tokens
        .iter()
        .map(|tok| {
            let n = tok.chars().count();
            if n < 2 || !rng.gen_bool(rate) {
                return Edit::Keep;
            }
            let out = match op {
                PerturbOp::CharInsert => {
                    let at = rng.gen_range(0..=n);
                    char_insert(tok, at, random_letter(lex, rng))
                }
                PerturbOp::CharDelete => char_delete(tok, rng.gen_range(0..n)),
                _ => {
                    let chars: Vec<char> = tok.chars().collect();
                    let candidates: Vec<usize> = (0..n)
                        .filter(|&i| chars[i].to_lowercase().next().is_some_and(|c| lex.keyboard.contains_key(&c)))
                        .collect();
                    let Some(&at) = candidates.choose(rng) else {
                        return Edit::Keep;
                    };
                    match keyboard_neighbour(lex, chars[at], rng) {
                        Some(c) => char_substitute(tok, at, c),
                        None => return Edit::Keep,
                    }
                }
            };
            Edit::Substitute(out)
        })
        .collect()
}

/// Deletes selected tokens but never empties the sentence.
fn guarded_deletions(selected: Vec<bool>) -> Vec<Edit> {
    let all = !selected.is_empty() && selected.iter().all(|&s| s);
    selected
        .into_iter()
        .enumerate()
        .map(|(i, s)| if s && !(all && i == 0) { Edit::Delete } else { Edit::Keep })
        .collect()
}

fn substitution_script(
    s: &Sentence,
    map: &BTreeMap<String, Vec<String>>,
    skip_entities: bool,
    rate: f64,
    rng: &mut Rng,
) -> Vec<Edit> {
    s.tokens
        .iter()
        .zip(&s.tags)
        .map(|(tok, tag)| {
            if skip_entities && is_entity(tag) {
                return Edit::Keep;
            }
            match map.get(&tok.to_lowercase()) {
                Some(options) if rng.gen_bool(rate) => {
                    Edit::Substitute(options.choose(rng).expect("validated non-empty").clone())
                }
                _ => Edit::Keep,
            }
        })
        .collect()
}

fn edit_script(spec: &PerturbationSpec, s: &Sentence, lex: &Lexicons, rng: &mut Rng) -> Vec<Edit> {
    let rate = spec.rate;
    match spec.op {
        PerturbOp::CharInsert | PerturbOp::CharDelete | PerturbOp::CharSubstitute => {
            char_script(spec.op, &s.tokens, rate, lex, rng)
        }
        PerturbOp::WordDelete => {
            let selected = s.tags.iter().map(|t| !is_entity(t) && rng.gen_bool(rate)).collect();
            guarded_deletions(selected)
        }
        PerturbOp::SentSimplify => {
            let selected = s
                .tokens
                .iter()
                .zip(&s.tags)
                .map(|(tok, t)| !is_entity(t) && lex.stopwords.contains(&tok.to_lowercase()) && rng.gen_bool(rate))
                .collect();
            guarded_deletions(selected)
        }
        PerturbOp::WordInsert => {
            let stopwords: Vec<&String> = lex.stopwords.iter().collect();
            let open = open_gaps(&s.tags);
            let mut script = Vec::new();
            for i in 0..=s.len() {
                if !stopwords.is_empty() && open.contains(&i) && rng.gen_bool(rate) {
                    let w = stopwords.choose(rng).expect("non-empty");
                    script.push(Edit::Insert((*w).clone()));
                }
                if i < s.len() {
                    script.push(Edit::Keep);
                }
            }
            script
        }
        PerturbOp::WordHomophone => substitution_script(s, &lex.homophones, false, rate, rng),
        PerturbOp::SentParaphrase => substitution_script(s, &lex.synonyms, true, rate, rng),
        PerturbOp::SentVerbose => {
            if lex.fillers.is_empty() || !rng.gen_bool(rate) {
                return vec![Edit::Keep; s.len()];
            }
            let open = open_gaps(&s.tags);
            let gap = *open.choose(rng).expect("gap 0 is always open");
            let phrase = lex.fillers.choose(rng).expect("non-empty");
            insertion_script(s.len(), gap, phrase)
        }
    }
}

/// Applies an edit script, realigning tags. Provenance and noisiness are untouched.
pub fn apply_edits(sentence: &Sentence, script: &[Edit]) -> Result<Sentence> {
    let tokens = apply_script(&sentence.tokens, script)?;
    let tags = realign_tags(&sentence.tags, script)?;
    Ok(Sentence { tokens, tags, ..sentence.clone() })
}

/// Inserts `phrase` at token gap `gap` (0 = before the first token).
pub fn insert_phrase(sentence: &Sentence, gap: usize, phrase: &[String]) -> Result<Sentence> {
    if gap > sentence.len() {
        return Err(Error::Contract(format!("gap {gap} beyond sentence of {} tokens", sentence.len())));
    }
    apply_edits(sentence, &insertion_script(sentence.len(), gap, phrase))
}

/// Applies one operator. Units are sampled independently with probability
/// `spec.rate` from a stream keyed by the seed, operator and sentence content.
pub fn apply(spec: &PerturbationSpec, sentence: &Sentence, lex: &Lexicons) -> Result<Sentence> {
    apply_traced(spec, sentence, lex).map(|(s, _)| s)
}

/// [`apply`] that also returns the edit script it used (all `Keep` at rate 0).
pub fn apply_traced(spec: &PerturbationSpec, sentence: &Sentence, lex: &Lexicons) -> Result<(Sentence, Vec<Edit>)> {
    spec.validate()?;
    if spec.rate == 0.0 {
        return Ok((sentence.clone(), vec![Edit::Keep; sentence.len()]));
    }
    let mut rng = Rng::keyed(spec.seed, spec.op.name(), sentence.content_hash());
    let script = if sentence.is_empty() {
        Vec::new()
    } else {
        edit_script(spec, sentence, lex, &mut rng)
    };
    let mut out = apply_edits(sentence, &script)?;
    out.noisiness = 1;
    out.provenance = spec.op.family();
    Ok((out, script))
}

/// Families of the active specs, consecutive repeats collapsed.
pub fn chain_families(specs: &[PerturbationSpec]) -> Vec<Provenance> {
    let mut fams: Vec<Provenance> = Vec::new();
    for s in specs.iter().filter(|s| s.rate > 0.0) {
        let f = s.op.family();
        if fams.last() != Some(&f) {
            fams.push(f);
        }
    }
    fams
}

/// Applies `specs` left to right. A chain whose active operators share one
/// family is labelled with that family, otherwise with the mixed list.
pub fn compose(specs: &[PerturbationSpec], sentence: &Sentence, lex: &Lexicons) -> Result<Sentence> {
    if specs.is_empty() {
        return Err(Error::Config("perturbation chain is empty".into()));
    }
    let mut out = sentence.clone();
    for spec in specs {
        out = apply(spec, &out, lex)?;
    }
    let mut fams = chain_families(specs);
    match fams.len() {
        0 => {}
        1 => out.provenance = fams.remove(0),
        _ => out.provenance = Provenance::Mixed(fams),
    }
    Ok(out)
}

pub fn perturb_corpus(corpus: &Corpus, specs: &[PerturbationSpec], lex: &Lexicons, mode: ExecMode) -> Result<Corpus> {
    let sentences = par::map(mode, &corpus.sentences, |_, s| compose(specs, s, lex))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Corpus::new(sentences, corpus.split)
}

pub type SuitePlan = BTreeMap<String, Vec<PerturbationSpec>>;

pub const CLEAN_SUITE: &str = "clean";

/// The untouched corpus under `"clean"` plus one perturbed copy per plan entry.
pub fn build_suite(
    corpus: &Corpus,
    plan: &SuitePlan,
    lex: &Lexicons,
    mode: ExecMode,
) -> Result<BTreeMap<String, Corpus>> {
    if plan.contains_key(CLEAN_SUITE) {
        return Err(Error::Config(format!("suite name {CLEAN_SUITE:?} is reserved")));
    }
    let mut suites = BTreeMap::new();
    suites.insert(CLEAN_SUITE.to_string(), corpus.clone());
    for (name, specs) in plan {
        suites.insert(name.clone(), perturb_corpus(corpus, specs, lex, mode)?);
    }
    Ok(suites)
}

/// Noisy training copy: sentence `i` gets one chain drawn uniformly under
/// `(seed, i)`, so the output is aligned index-for-index with the input.
pub fn augment(
    corpus: &Corpus,
    chains: &[Vec<PerturbationSpec>],
    lex: &Lexicons,
    seed: u64,
    mode: ExecMode,
) -> Result<Corpus> {
    if chains.is_empty() {
        return Err(Error::Config("augmentation needs at least one perturbation chain".into()));
    }
    let key = RngKey::new(seed).derive("augment-choice");
    let sentences = par::map(mode, &corpus.sentences, |i, s| {
        let mut rng = key.index(i as u64).stream();
        compose(&chains[rng.gen_range(0..chains.len())], s, lex)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Corpus::new(sentences, corpus.split)
}

fn chain(ops: &[(PerturbOp, f64)], seed: u64, suite: &str) -> Vec<PerturbationSpec> {
    let key = RngKey::new(seed).derive(suite);
    ops.iter()
        .map(|&(op, rate)| PerturbationSpec {
            level: op.level(),
            op,
            rate,
            seed: key.derive(op.name()).raw(),
        })
        .collect()
}

/// Default operator chains for the single-perturbation suites.
pub fn single_suite_ops() -> Vec<(&'static str, Vec<PerturbOp>)> {
    use PerturbOp::*;
    vec![
        ("typos", vec![CharInsert, CharDelete, CharSubstitute]),
        ("speech", vec![WordHomophone, WordDelete, WordInsert]),
        ("paraphrase", vec![SentParaphrase]),
        ("simplification", vec![SentSimplify]),
        ("verbose", vec![SentVerbose]),
    ]
}

/// Default operator chains for the mixed-perturbation suites.
pub fn mixed_suite_ops() -> Vec<(&'static str, Vec<PerturbOp>)> {
    use PerturbOp::*;
    let typos = [CharInsert, CharDelete, CharSubstitute];
    let speech = [WordHomophone, WordDelete, WordInsert];
    let sent = [SentParaphrase, SentVerbose];
    let join = |parts: &[&[PerturbOp]]| parts.concat();
    vec![
        ("char+word", join(&[&typos, &speech])),
        ("char+sen", join(&[&typos, &sent])),
        ("word+sent", join(&[&speech, &sent])),
        ("char+word+sen", join(&[&typos, &speech, &sent])),
    ]
}

/// Builds a plan from `(suite, ops)` pairs at default rates, seeding each
/// operator from `(seed, suite, op)`.
pub fn plan_from_ops(groups: &[(&str, Vec<PerturbOp>)], seed: u64) -> SuitePlan {
    groups
        .iter()
        .map(|(name, ops)| {
            let with_rates: Vec<(PerturbOp, f64)> = ops.iter().map(|&op| (op, op.default_rate())).collect();
            (name.to_string(), chain(&with_rates, seed, name))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sentence(tokens: &str, tags: &str) -> Sentence {
        Sentence::new(
            tokens.split_whitespace().map(String::from).collect(),
            tags.split_whitespace().map(|t| t.parse().unwrap()).collect(),
        )
    }

    fn spec(op: PerturbOp, rate: f64) -> PerturbationSpec {
        PerturbationSpec::new(op, rate, 11).unwrap()
    }

    #[test]
    fn homophone_substitution_keeps_tags() {
        let lex = Lexicons::from_texts("to\ttwo\n", "", "", "", "").unwrap();
        let s = sentence("fly to paris", "O O B-city");
        let out = apply(&spec(PerturbOp::WordHomophone, 1.0), &s, &lex).unwrap();
        assert_eq!(out.tokens, ["fly", "two", "paris"]);
        assert_eq!(out.tags, s.tags);
        assert_eq!(out.noisiness, 1);
        assert_eq!(out.provenance, Provenance::Speech);
    }

    #[test]
    fn verbose_prefix_shifts_tags() {
        let s = sentence("book a table tonight", "O O O B-time");
        let phrase = ["um".to_string(), "please".to_string()];
        let out = insert_phrase(&s, 0, &phrase).unwrap();
        assert_eq!(out.len(), 6);
        for i in 0..out.len() {
            let expected = if i < 2 { Tag::O } else { s.tags[i - 2].clone() };
            assert_eq!(out.tags[i], expected);
        }
        assert_eq!(&out.tokens[..2], &phrase);
    }

    #[test]
    fn zero_rate_is_identity() {
        let lex = Lexicons::builtin();
        let s = sentence("play some jazz", "O O B-genre");
        for op in PerturbOp::ALL {
            assert_eq!(apply(&spec(op, 0.0), &s, &lex).unwrap(), s);
        }
    }

    #[test]
    fn empty_sentence_only_gains_noise_label() {
        let lex = Lexicons::builtin();
        let s = sentence("", "");
        let out = apply(&spec(PerturbOp::SentVerbose, 1.0), &s, &lex).unwrap();
        assert!(out.is_empty());
        assert_eq!(out.noisiness, 1);
    }

    #[test]
    fn deletion_ops_protect_entities_and_keep_a_token() {
        let lex = Lexicons::builtin();
        let s = sentence("the weather in new york", "O O O B-city I-city");
        let out = apply(&spec(PerturbOp::WordDelete, 1.0), &s, &lex).unwrap();
        assert_eq!(out.tokens, ["new", "york"]);
        let s = sentence("the a", "O O");
        let out = apply(&spec(PerturbOp::SentSimplify, 1.0), &s, &lex).unwrap();
        assert_eq!(out.tokens, ["the"]);
    }

    #[test]
    fn compose_labels() {
        let lex = Lexicons::builtin();
        let s = sentence("i want to go to the city of boston", "O O O O O O O O B-city");
        let typos = spec(PerturbOp::CharDelete, 0.5);
        let speech = spec(PerturbOp::WordHomophone, 0.5);
        assert_eq!(compose(&[typos], &s, &lex).unwrap(), apply(&typos, &s, &lex).unwrap());
        let mixed = compose(&[typos, speech], &s, &lex).unwrap();
        assert_eq!(mixed.provenance, Provenance::Mixed(vec![Provenance::Typos, Provenance::Speech]));
        let same = compose(&[typos, spec(PerturbOp::CharInsert, 0.3)], &s, &lex).unwrap();
        assert_eq!(same.provenance, Provenance::Typos);
        assert!(compose(&[], &s, &lex).is_err());
    }

    #[test]
    fn suite_counts() {
        let lex = Lexicons::builtin();
        let c = Corpus::new(vec![sentence("hello there", "O O")], crate::corpus::Split::Test).unwrap();
        let plan = plan_from_ops(&single_suite_ops(), 3);
        let suites = build_suite(&c, &plan, &lex, ExecMode::Sequential).unwrap();
        assert_eq!(suites.len(), 6);
        assert_eq!(build_suite(&c, &SuitePlan::new(), &lex, ExecMode::Sequential).unwrap().len(), 1);
        let mut bad = SuitePlan::new();
        bad.insert("clean".into(), vec![spec(PerturbOp::CharDelete, 0.1)]);
        assert!(build_suite(&c, &bad, &lex, ExecMode::Sequential).is_err());
    }

    #[test]
    fn spec_parsing_and_validation() {
        let s = PerturbationSpec::parse("char_delete@0.25", 4).unwrap();
        assert_eq!((s.op, s.rate, s.level), (PerturbOp::CharDelete, 0.25, Level::Character));
        assert_eq!(PerturbationSpec::parse("sent_verbose", 4).unwrap().rate, 1.0);
        assert!(PerturbationSpec::parse("char_delete@1.5", 4).is_err());
        assert!(PerturbationSpec::parse("shout", 4).is_err());
        let bad = PerturbationSpec { level: Level::Word, ..s };
        assert!(bad.validate().is_err());
    }
}
