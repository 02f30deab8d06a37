//! English renderings of S3 word problems: one sentence per action, the
//! running arrangement targeted at each sentence-final period.
//!
//! Here a token is read as an arrangement: "312" means the new order takes
//! the old items at positions 3, 1, 2 (the last item moves to the front).
//! Targets are the arrangement reached, written the same way.

use std::collections::BTreeMap;

use super::{gen_word_corpus, Corpus, CorpusMeta, Document, Vocab};
use crate::error::{Error, Result};
use crate::perm::Permutation;
use crate::transformer::LossMode;

const PERIOD: &str = ".";

/// Action → sentence (without the period).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhraseMap {
    entries: Vec<(Permutation, String)>,
}

impl PhraseMap {
    pub fn new(entries: Vec<(Permutation, String)>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for (p, s) in &entries {
            if s.split_whitespace().next().is_none() || s.split_whitespace().any(|w| w == PERIOD) {
                return Err(Error::Config(format!("bad phrase {s:?}")));
            }
            if !seen.insert(normalise(s)) {
                return Err(Error::Config(format!("phrase {s:?} is not unique")));
            }
            if entries.iter().filter(|(q, _)| q == p).count() > 1 {
                return Err(Error::Config(format!("action {p} mapped twice")));
            }
        }
        Ok(Self { entries })
    }

    /// The S3 phrase set. "Do nothing" and the 321 / 231 phrases complete
    /// the three documented ones.
    pub fn s3_default() -> Self {
        let e = [
            ("123", "Do nothing"),
            ("132", "Swap positions 2 and 3"),
            ("213", "Swap positions 1 and 2"),
            ("231", "Rotate the first item to the back"),
            ("312", "Rotate the last item to the front"),
            ("321", "Swap positions 1 and 3"),
        ];
        Self::new(e.iter().map(|(p, s)| (p.parse().expect("valid"), s.to_string())).collect()).expect("valid phrases")
    }

    pub fn phrase(&self, a: &Permutation) -> Result<&str> {
        self.entries
            .iter()
            .find(|(p, _)| p == a)
            .map(|(_, s)| s.as_str())
            .ok_or_else(|| Error::Data(format!("no phrase for action {a}")))
    }

    pub fn entries(&self) -> &[(Permutation, String)] {
        &self.entries
    }
}

fn normalise(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Group tokens for S3 plus every phrase word and the period.
pub fn language_vocab(phrases: &PhraseMap) -> Result<Vocab> {
    let mut tokens = Vocab::group(3)?.tokens().to_vec();
    let words = phrases.entries.iter().flat_map(|(_, s)| s.split_whitespace()).chain([PERIOD]);
    for w in words {
        if !tokens.iter().any(|t| t == w) {
            tokens.push(w.to_string());
        }
    }
    Vocab::new(tokens)
}

/// Running arrangements: applying `p` to order `r` gives
/// `r'[i] = r[p[i]]` (positions 0-based).
pub fn arrangements(actions: &[Permutation]) -> Result<Vec<Permutation>> {
    let Some(first) = actions.first() else { return Ok(Vec::new()) };
    let n = first.degree();
    let mut r: Vec<u8> = (0..n as u8).collect();
    let mut out = Vec::with_capacity(actions.len());
    for p in actions {
        if p.degree() != n {
            return Err(Error::DegreeMismatch(n, p.degree()));
        }
        r = p.dest().iter().map(|&j| r[j as usize]).collect();
        out.push(Permutation::from_dest(r.clone())?);
    }
    Ok(out)
}

/// Render actions as sentences; every period carries the arrangement
/// reached after its sentence, so the last period carries the final one.
pub fn render_natural_language(actions: &[Permutation], phrases: &PhraseMap, vocab: &Vocab) -> Result<Document> {
    let states = arrangements(actions)?;
    let mut input_ids = Vec::new();
    let mut target_ids = Vec::new();
    let period = vocab.require(PERIOD)?;
    for (a, s) in actions.iter().zip(&states) {
        for w in phrases.phrase(a)?.split_whitespace() {
            input_ids.push(vocab.require(w)?);
            target_ids.push(None);
        }
        input_ids.push(period);
        target_ids.push(Some(vocab.perm_id(s)?));
    }
    Ok(Document { input_ids, target_ids })
}

/// Recover the action sequence from rendered word tokens.
pub fn parse_natural_language(words: &[&str], phrases: &PhraseMap) -> Result<Vec<Permutation>> {
    let lookup: BTreeMap<String, &Permutation> = phrases.entries.iter().map(|(p, s)| (normalise(s), p)).collect();
    let mut out = Vec::new();
    let mut sentence: Vec<&str> = Vec::new();
    for &w in words {
        if w == PERIOD {
            let key = sentence.join(" ");
            let p = lookup.get(&key).ok_or_else(|| Error::Data(format!("unknown sentence {key:?}")))?;
            out.push((*p).clone());
            sentence.clear();
        } else {
            sentence.push(w);
        }
    }
    if !sentence.is_empty() {
        return Err(Error::Data("trailing words without a period".into()));
    }
    Ok(out)
}

/// Natural-language rendering of a fresh S3 word corpus.
pub fn gen_language_corpus(count: usize, actions: usize, seed: u64, phrases: &PhraseMap) -> Result<Corpus> {
    let words = gen_word_corpus(3, count, actions, seed)?;
    let vocab = language_vocab(phrases)?;
    let docs = (0..words.len())
        .map(|i| render_natural_language(&words.actions(i)?, phrases, &vocab))
        .collect::<Result<_>>()?;
    let extra = phrases.entries.iter().map(|(p, s)| (format!("phrase.{p}"), s.clone())).collect();
    Ok(Corpus {
        mode: LossMode::NaturalLanguage,
        vocab,
        docs,
        meta: CorpusMeta { generator: "natural-language".into(), seed, degree: 3, length: actions, extra },
    })
}
