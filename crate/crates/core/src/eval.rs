//! Span-level scoring, robustness reports, ablation comparison and
//! entity embedding export.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{extract_spans, repair_bio, spans_from_tags, Corpus, SlotSpan, Tag, TagSet, Vocab};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::finetune::AblationFlags;
use crate::par::{self, ExecMode};
use crate::tensor::Tensor;

/// Argmax tag per row (lowest id on ties), orphan `I-X` promoted, then spans.
pub fn decode_spans(logits: &Tensor, tags: &TagSet) -> Vec<SlotSpan> {
    let t = logits.shape().get(1).copied().unwrap_or(0);
    if t == 0 {
        return Vec::new();
    }
    let mut seq: Vec<Tag> = logits
        .data()
        .chunks(t)
        .map(|row| {
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            tags.tag(best).clone()
        })
        .collect();
    repair_bio(&mut seq);
    spans_from_tags(&seq).expect("repaired tags are well-formed")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub gold: usize,
    pub pred: usize,
    pub correct: usize,
}

impl SuiteScore {
    pub fn from_counts(gold: usize, pred: usize, correct: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(correct, pred);
        let recall = ratio(correct, gold);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        SuiteScore { precision, recall, f1, gold, pred, correct }
    }
}

/// Micro-averaged exact-match span scores over aligned sentence lists.
pub fn span_f1(gold: &[Vec<SlotSpan>], pred: &[Vec<SlotSpan>]) -> Result<SuiteScore> {
    if gold.len() != pred.len() {
        return Err(Error::Contract(format!("{} gold sentences but {} predicted", gold.len(), pred.len())));
    }
    let (mut g, mut p, mut c) = (0, 0, 0);
    for (gs, ps) in gold.iter().zip(pred) {
        let gset: BTreeSet<&SlotSpan> = gs.iter().collect();
        let pset: BTreeSet<&SlotSpan> = ps.iter().collect();
        g += gset.len();
        p += pset.len();
        c += pset.intersection(&gset).count();
    }
    Ok(SuiteScore::from_counts(g, p, c))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub flags: AblationFlags,
    pub config_hash: String,
    /// Sentences cut to the encoder's maximum length.
    pub truncated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub suites: BTreeMap<String, SuiteScore>,
    /// Unweighted mean F1 over every suite except `"clean"`.
    pub overall: f64,
    pub meta: ReportMeta,
}

impl EvalReport {
    pub fn new(suites: BTreeMap<String, SuiteScore>, meta: ReportMeta) -> Self {
        let noisy: Vec<f64> = suites
            .iter()
            .filter(|(k, _)| k.as_str() != crate::perturb::CLEAN_SUITE)
            .map(|(_, s)| s.f1)
            .collect();
        let overall = if noisy.is_empty() { 0.0 } else { noisy.iter().sum::<f64>() / noisy.len() as f64 };
        EvalReport { suites, overall, meta }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Aligned plain-text table, F1 values in percent.
    pub fn to_table(&self) -> String {
        let width = self.suites.keys().map(String::len).chain([7]).max().unwrap_or(7);
        let mut out = format!("{:<width$}  {:>6}  {:>6}  {:>6}  {:>5}  {:>5}  {:>5}\n", "suite", "P", "R", "F1", "gold", "pred", "hit");
        for (name, s) in &self.suites {
            let _ = writeln!(
                out,
                "{name:<width$}  {:>6.2}  {:>6.2}  {:>6.2}  {:>5}  {:>5}  {:>5}",
                100.0 * s.precision,
                100.0 * s.recall,
                100.0 * s.f1,
                s.gold,
                s.pred,
                s.correct
            );
        }
        let _ = writeln!(out, "{:<width$}  {:>6}  {:>6}  {:>6.2}", "overall", "", "", 100.0 * self.overall);
        out
    }
}

/// Gold and predicted spans of every sentence, plus the truncation count.
pub fn predict_corpus(
    model: &EncoderModel,
    corpus: &Corpus,
    vocab: &Vocab,
    tags: &TagSet,
    mode: ExecMode,
) -> Result<(Vec<Vec<SlotSpan>>, Vec<Vec<SlotSpan>>, usize)> {
    let rows = par::map(mode, &corpus.sentences, |_, s| -> Result<(Vec<SlotSpan>, Vec<SlotSpan>, bool)> {
        let gold = extract_spans(s)?;
        if s.is_empty() {
            return Ok((gold, Vec::new(), false));
        }
        let (logits, truncated) = model.tag_logits(&vocab.encode(&s.tokens))?;
        Ok((gold, decode_spans(&logits, tags), truncated))
    });
    let mut gold = Vec::with_capacity(rows.len());
    let mut pred = Vec::with_capacity(rows.len());
    let mut truncated = 0;
    for r in rows {
        let (g, p, t) = r?;
        gold.push(g);
        pred.push(p);
        truncated += t as usize;
    }
    Ok((gold, pred, truncated))
}

/// Scores every suite with dropout off.
pub fn evaluate(
    model: &EncoderModel,
    suites: &BTreeMap<String, Corpus>,
    vocab: &Vocab,
    tags: &TagSet,
    meta: ReportMeta,
    mode: ExecMode,
) -> Result<EvalReport> {
    let mut scores = BTreeMap::new();
    let mut truncated = 0;
    for (name, corpus) in suites {
        let (gold, pred, t) = predict_corpus(model, corpus, vocab, tags, mode)?;
        truncated += t;
        scores.insert(name.clone(), span_f1(&gold, &pred)?);
    }
    Ok(EvalReport::new(scores, ReportMeta { truncated, ..meta }))
}

/// Runs `train_and_eval` once per variant, in order. Duplicate variant names
/// or flag sets are a configuration error.
pub fn run_ablation<F>(variants: &[(String, AblationFlags)], mut train_and_eval: F) -> Result<Vec<(String, EvalReport)>>
where
    F: FnMut(&str, AblationFlags) -> Result<EvalReport>,
{
    let mut names = BTreeSet::new();
    let mut flags = BTreeSet::new();
    for (name, f) in variants {
        if !names.insert(name) || !flags.insert(*f) {
            return Err(Error::Config(format!("ablation variant {name} is listed twice")));
        }
    }
    variants
        .iter()
        .map(|(name, f)| Ok((name.clone(), train_and_eval(name, *f)?)))
        .collect()
}

/// Side-by-side F1 (percent) of each variant per suite, plus overall and the
/// signed difference from the first variant.
pub fn ablation_table(reports: &[(String, EvalReport)]) -> String {
    let Some((_, first)) = reports.first() else {
        return String::new();
    };
    let suites: Vec<&String> = first.suites.keys().collect();
    let width = reports.iter().map(|(n, _)| n.len()).chain([7]).max().unwrap_or(7);
    let mut out = format!("{:<width$}", "variant");
    for s in &suites {
        let _ = write!(out, "  {:>w$}", s, w = s.len().max(6));
    }
    out.push_str("  overall    delta\n");
    for (name, r) in reports {
        let _ = write!(out, "{name:<width$}");
        for s in &suites {
            let f1 = r.suites.get(*s).map_or(f64::NAN, |x| x.f1);
            let _ = write!(out, "  {:>w$.2}", 100.0 * f1, w = s.len().max(6));
        }
        let _ = writeln!(out, "  {:>7.2}  {:>+7.2}", 100.0 * r.overall, 100.0 * (r.overall - first.overall));
    }
    out
}

/// One TSV row per gold entity: the mean hidden state over its tokens
/// (`d` columns) followed by its slot label. Entities cut off by truncation
/// are skipped.
pub fn export_embeddings(model: &EncoderModel, corpus: &Corpus, vocab: &Vocab, mode: ExecMode) -> Result<String> {
    let d = model.config.d_model;
    let rows = par::map(mode, &corpus.sentences, |_, s| -> Result<String> {
        let spans = extract_spans(s)?;
        if spans.is_empty() {
            return Ok(String::new());
        }
        let h = model.hidden_states(&vocab.encode(&s.tokens))?;
        let n = h.shape()[0] - 1;
        let mut out = String::new();
        for sp in spans.iter().filter(|sp| sp.end <= n) {
            let mut mean = vec![0.0; d];
            for t in sp.start..sp.end {
                mean.iter_mut().zip(h.row(t + 1)).for_each(|(m, x)| *m += x);
            }
            let len = (sp.end - sp.start) as f64;
            for m in &mean {
                let _ = write!(out, "{}\t", m / len);
            }
            let _ = writeln!(out, "{}", sp.label);
        }
        Ok(out)
    });
    rows.into_iter().collect()
}
