mod common;

use proptest::prelude::*;

use noiselab::corpus::{Sentence, Tag};
use noiselab::perturb::{apply, compose, insert_phrase, Lexicons, PerturbOp, PerturbationSpec};

fn sentence(tokens: &[&str], tags: &[&str]) -> Sentence {
    Sentence::new(tokens.iter().map(|t| t.to_string()).collect(), tags.iter().map(|t| t.parse().unwrap()).collect())
}

#[test]
fn operators_and_mixed_chains_hold_properties() {
    let lex = Lexicons::builtin();
    for (k, (name, ops)) in common::perturbation_suites().into_iter().enumerate() {
        let t = common::chain_properties(&ops, 10_000, 100 + k as u64, &lex);
        assert!(t.ok(), "{name}: {t:?}");
        assert!(t.checked_spans > 0, "{name}: no span was left untouched");
    }
}

#[test]
fn filler_before_first_token_shifts_tags() {
    let s = sentence(&["book", "a", "flight", "tomorrow"], &["O", "O", "O", "B-date"]);
    let phrase = vec!["um".to_string(), "please".to_string()];
    let out = insert_phrase(&s, 0, &phrase).unwrap();
    assert_eq!(out.len(), 6);
    // shifted index arithmetic: output i + 2 carries input tag i
    for i in 0..s.len() {
        assert_eq!(out.tags[i + 2], s.tags[i]);
        assert_eq!(out.tokens[i + 2], s.tokens[i]);
    }
    assert_eq!(&out.tags[..2], &[Tag::O, Tag::O]);
}

#[test]
fn typo_speech_verbose_chain_never_shrinks_below_speech_output() {
    let lex = Lexicons::builtin();
    let pool = common::token_pool(&lex);
    let mut r = common::rng(77);
    for i in 0..1000u64 {
        let s = common::random_sentence(&mut r, &pool);
        let typos = PerturbationSpec::new(PerturbOp::CharSubstitute, 0.5, i).unwrap();
        let speech = PerturbationSpec::new(PerturbOp::WordHomophone, 0.5, i).unwrap();
        let verbose = PerturbationSpec::new(PerturbOp::SentVerbose, 1.0, i).unwrap();
        let out = compose(&[typos, speech, verbose], &s, &lex).unwrap();
        // substitutions keep length; verbose only inserts
        let before = apply(&speech, &apply(&typos, &s, &lex).unwrap(), &lex).unwrap().len();
        assert_eq!(before, s.len());
        assert!(out.len() >= s.len());
        assert_eq!(out.noisiness, 1);
    }
}

proptest! {
    #[test]
    fn zero_rate_is_the_identity(seed in any::<u64>(), op in 0usize..9) {
        let lex = Lexicons::builtin();
        let pool = common::token_pool(&lex);
        let s = common::random_sentence(&mut common::rng(seed), &pool);
        let spec = PerturbationSpec::new(PerturbOp::ALL[op], 0.0, seed).unwrap();
        let out = apply(&spec, &s, &lex).unwrap();
        prop_assert_eq!(out.noisiness, 0);
        prop_assert_eq!(out, s);
    }

    #[test]
    fn outputs_are_valid_and_reproducible(seed in any::<u64>(), op in 0usize..9, rate in 0.01f64..=1.0) {
        let lex = Lexicons::builtin();
        let pool = common::token_pool(&lex);
        let s = common::random_sentence(&mut common::rng(seed), &pool);
        let spec = PerturbationSpec::new(PerturbOp::ALL[op], rate, seed).unwrap();
        let a = apply(&spec, &s, &lex).unwrap();
        prop_assert!(a.validate().is_ok());
        prop_assert!(!a.is_empty());
        prop_assert_eq!(a, apply(&spec, &s, &lex).unwrap());
    }
}
