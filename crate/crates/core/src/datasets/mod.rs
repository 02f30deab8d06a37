//! Corpora for training and evaluation: word problems, topic-model and
//! uniform next-token documents, parity targets, and natural-language
//! renderings.

mod io;
mod language;
mod topic;

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perm::{cumulative_states, enumerate_group, factorial, random_permutation, Parity, Permutation};
use crate::rng::{mix, seeded};
use crate::transformer::{AuxTarget, LossMode, TrainDoc, TrainingData};

pub use io::{deserialize_corpus, read_corpus, serialize_corpus, write_corpus};
pub use language::{
    arrangements, gen_language_corpus, language_vocab, parse_natural_language, render_natural_language, PhraseMap,
};
pub use topic::{gen_topic_corpus, TopicModelParams};

/// Token strings with a reverse index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) || t == "|" {
                return Err(Error::Data(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// The n! permutation strings in lexicographic order (so a permutation's
    /// id is its rank), then the parity tokens "0" and "1".
    pub fn group(n: usize) -> Result<Self> {
        let mut tokens: Vec<String> = enumerate_group(n)?.iter().map(|p| p.to_token()).collect();
        tokens.push("0".into());
        tokens.push("1".into());
        Self::new(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn require(&self, token: &str) -> Result<u32> {
        self.id(token).ok_or_else(|| Error::Data(format!("token {token:?} not in vocabulary")))
    }

    pub fn perm_id(&self, p: &Permutation) -> Result<u32> {
        self.require(&p.to_token())
    }

    pub fn parity_id(&self, p: Parity) -> Result<u32> {
        self.require(if p.is_odd() { "1" } else { "0" })
    }

    pub fn perm(&self, id: u32) -> Result<Permutation> {
        let tok = self.token(id).ok_or_else(|| Error::Data(format!("token id {id} out of range")))?;
        tok.parse()
    }
}

/// One document: inputs plus an optional target per position.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Document {
    pub input_ids: Vec<u32>,
    pub target_ids: Vec<Option<u32>>,
}

impl Document {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    pub fn targeted(&self) -> usize {
        self.target_ids.iter().filter(|t| t.is_some()).count()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub generator: String,
    pub seed: u64,
    pub degree: usize,
    pub length: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub mode: LossMode,
    pub vocab: Vocab,
    pub docs: Vec<Document>,
    pub meta: CorpusMeta,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Action sequence of a word-problem document.
    pub fn actions(&self, doc: usize) -> Result<Vec<Permutation>> {
        self.docs[doc].input_ids.iter().map(|&id| self.vocab.perm(id)).collect()
    }

    /// Check the shared invariants: ids in range, targets only where the
    /// mode allows them.
    pub fn validate(&self) -> Result<()> {
        let v = self.vocab.len() as u32;
        for (i, d) in self.docs.iter().enumerate() {
            if d.target_ids.len() != d.input_ids.len() {
                return Err(Error::Data(format!("document {i}: target/input length mismatch")));
            }
            if d.input_ids.iter().chain(d.target_ids.iter().flatten()).any(|&t| t >= v) {
                return Err(Error::Data(format!("document {i}: token id out of range")));
            }
            if matches!(self.mode, LossMode::State | LossMode::Parity) && d.targeted() != d.len() {
                return Err(Error::Data(format!("document {i}: every position needs a target")));
            }
        }
        Ok(())
    }
}

fn state_document(vocab: &Vocab, actions: &[Permutation]) -> Result<Document> {
    let states = cumulative_states(actions)?;
    Ok(Document {
        input_ids: actions.iter().map(|a| vocab.perm_id(a)).collect::<Result<_>>()?,
        target_ids: states.iter().map(|s| vocab.perm_id(s).map(Some)).collect::<Result<_>>()?,
    })
}

/// `count` distinct random action sequences of the given length, each
/// targeted with its running states. Duplicates are rejected and redrawn
/// within a budget of 100 draws per requested document.
pub fn gen_word_corpus(n: usize, count: usize, length: usize, seed: u64) -> Result<Corpus> {
    if length == 0 {
        return Err(Error::InvalidArgument("length must be positive".into()));
    }
    let vocab = Vocab::group(n)?;
    let g = factorial(n) as f64;
    if (count as f64).log2() > length as f64 * g.log2() + 1e-9 {
        return Err(Error::InvalidArgument(format!("{count} distinct sequences of length {length} do not exist")));
    }
    let draw = |doc: usize, attempt: usize| -> Vec<Permutation> {
        let mut rng = seeded(seed, mix(doc as u64, attempt as u64));
        (0..length).map(|_| random_permutation(&mut rng, n)).collect()
    };
    let budget = count.saturating_mul(100);
    let mut seen: HashSet<Vec<Permutation>> = HashSet::with_capacity(count);
    let mut docs = Vec::with_capacity(count);
    let mut draws = 0usize;
    for doc in 0..count {
        let mut attempt = 0;
        loop {
            if draws >= budget {
                return Err(Error::Data(format!("retry budget exhausted after {draws} draws")));
            }
            draws += 1;
            let acts = draw(doc, attempt);
            attempt += 1;
            if seen.insert(acts.clone()) {
                docs.push(state_document(&vocab, &acts)?);
                break;
            }
        }
    }
    Ok(Corpus {
        mode: LossMode::State,
        vocab,
        docs,
        meta: CorpusMeta { generator: "word".into(), seed, degree: n, length, extra: BTreeMap::new() },
    })
}

/// Word-problem documents of a fixed length for evaluation, without the
/// uniqueness requirement.
pub fn gen_eval_sequences(n: usize, count: usize, length: usize, seed: u64) -> Vec<Vec<Permutation>> {
    crate::par::map_range(count, |i| {
        let mut rng = seeded(seed, i as u64);
        (0..length).map(|_| random_permutation(&mut rng, n)).collect()
    })
}

pub(crate) fn next_token_targets(ids: &[u32]) -> Vec<Option<u32>> {
    (0..ids.len()).map(|t| ids.get(t + 1).copied()).collect()
}

/// I.i.d. uniform group-element documents for next-token prediction.
pub fn gen_uniform_corpus(n: usize, count: usize, length: usize, seed: u64) -> Result<Corpus> {
    let vocab = Vocab::group(n)?;
    let docs = crate::par::map_range(count, |i| {
        let mut rng = seeded(seed, i as u64);
        let ids: Vec<u32> = (0..length).map(|_| random_permutation(&mut rng, n).rank() as u32).collect();
        Document { target_ids: next_token_targets(&ids), input_ids: ids }
    });
    Ok(Corpus {
        mode: LossMode::NextToken,
        vocab,
        docs,
        meta: CorpusMeta { generator: "uniform".into(), seed, degree: n, length, extra: BTreeMap::new() },
    })
}

/// Disjoint seeded split into `⌊f·N⌋` and the remainder.
pub fn split_corpus(c: &Corpus, train_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument("train_fraction must lie in (0, 1)".into()));
    }
    let n_train = (train_fraction * c.len() as f64).floor() as usize;
    if n_train == 0 || n_train == c.len() {
        return Err(Error::InvalidArgument(format!("split of {} documents leaves an empty side", c.len())));
    }
    let mut order: Vec<usize> = (0..c.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut seeded(seed, 0x5B17));
    let pick = |ix: &[usize]| Corpus { docs: ix.iter().map(|&i| c.docs[i].clone()).collect(), ..c.clone_empty() };
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

impl Corpus {
    fn clone_empty(&self) -> Corpus {
        Corpus { mode: self.mode, vocab: self.vocab.clone(), docs: Vec::new(), meta: self.meta.clone() }
    }
}

/// Replace running-state targets with the parity tokens of those states.
pub fn parity_targets(c: &Corpus) -> Result<Corpus> {
    if c.mode != LossMode::State {
        return Err(Error::InvalidArgument(format!("parity targets need a state corpus, got {:?}", c.mode)));
    }
    let mut out = c.clone_empty();
    out.mode = LossMode::Parity;
    for d in &c.docs {
        let target_ids = d
            .target_ids
            .iter()
            .map(|t| {
                let s = c.vocab.perm(t.ok_or_else(|| Error::Data("untargeted position in state corpus".into()))?)?;
                c.vocab.parity_id(s.parity()).map(Some)
            })
            .collect::<Result<_>>()?;
        out.docs.push(Document { input_ids: d.input_ids.clone(), target_ids });
    }
    Ok(out)
}

/// Number of auxiliary classes for a target kind over a group of degree n.
pub fn aux_classes(target: AuxTarget, n: usize) -> usize {
    match target {
        AuxTarget::Parity => 2,
        AuxTarget::ParityAction => 2 * factorial(n),
    }
}

/// Lay the corpus out for the trainer, optionally with per-position
/// auxiliary parity classes (state parity, or parity crossed with the
/// action as `parity * n! + rank(action)`).
pub fn training_data(c: &Corpus, aux: Option<AuxTarget>) -> Result<TrainingData> {
    c.validate()?;
    let mut docs = Vec::with_capacity(c.len());
    for (i, d) in c.docs.iter().enumerate() {
        let aux_targets = match aux {
            None => None,
            Some(kind) => {
                if !matches!(c.mode, LossMode::State | LossMode::Parity) {
                    return Err(Error::Config(format!("aux parity targets need a word-problem corpus, got {:?}", c.mode)));
                }
                let acts = c.actions(i)?;
                let states = cumulative_states(&acts)?;
                let g = factorial(c.meta.degree) as u32;
                Some(
                    states
                        .iter()
                        .zip(&acts)
                        .map(|(s, a)| match kind {
                            AuxTarget::Parity => s.parity().bit() as u32,
                            AuxTarget::ParityAction => s.parity().bit() as u32 * g + a.rank() as u32,
                        })
                        .collect(),
                )
            }
        };
        docs.push(TrainDoc { tokens: d.input_ids.clone(), targets: d.target_ids.clone(), aux_targets });
    }
    Ok(TrainingData { mode: c.mode, docs, aux_classes: aux.map(|k| aux_classes(k, c.meta.degree)) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perm::state_parities;

    #[test]
    fn group_vocab_ids_are_ranks() {
        let v = Vocab::group(3).unwrap();
        assert_eq!(v.len(), 8);
        assert_eq!(v.token(0), Some("123"));
        assert_eq!(v.token(5), Some("321"));
        for p in enumerate_group(3).unwrap() {
            assert_eq!(v.perm_id(&p).unwrap() as usize, p.rank());
        }
        assert_eq!(v.parity_id(Parity::Odd).unwrap(), 7);
        assert!(Vocab::new(vec!["a".into(), "a".into()]).is_err());
    }

    #[test]
    fn word_corpus_deterministic_unique_and_sound() {
        let a = gen_word_corpus(3, 10, 4, 7).unwrap();
        let b = gen_word_corpus(3, 10, 4, 7).unwrap();
        assert_eq!(serialize_corpus(&a), serialize_corpus(&b));
        let big = gen_word_corpus(3, 1000, 8, 1).unwrap();
        let uniq: HashSet<_> = big.docs.iter().map(|d| d.input_ids.clone()).collect();
        assert_eq!(uniq.len(), 1000);
        for i in 0..big.len() {
            let acts = big.actions(i).unwrap();
            let mut s = Permutation::identity(3);
            for (t, a) in acts.iter().enumerate() {
                s = crate::perm::compose(&s, a).unwrap();
                assert_eq!(big.docs[i].target_ids[t], Some(s.rank() as u32));
            }
        }
    }

    #[test]
    fn tiny_word_corpus_and_infeasible() {
        let c = gen_word_corpus(3, 2, 1, 0).unwrap();
        assert_eq!(c.len(), 2);
        assert_ne!(c.docs[0], c.docs[1]);
        assert!(gen_word_corpus(3, 6, 1, 0).is_ok());
        assert!(matches!(gen_word_corpus(3, 7, 1, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let c = gen_word_corpus(3, 100, 6, 2).unwrap();
        let (tr, te) = split_corpus(&c, 0.9, 5).unwrap();
        assert_eq!((tr.len(), te.len()), (90, 10));
        let c = gen_word_corpus(3, 10, 6, 2).unwrap();
        let (tr, te) = split_corpus(&c, 0.5, 5).unwrap();
        assert_eq!((tr.len(), te.len()), (5, 5));
        let mut all: Vec<_> = tr.docs.iter().chain(&te.docs).map(|d| d.input_ids.clone()).collect();
        let mut orig: Vec<_> = c.docs.iter().map(|d| d.input_ids.clone()).collect();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);
        assert_eq!(split_corpus(&c, 0.5, 5).unwrap().0, tr);
        assert!(split_corpus(&c, 0.01, 5).is_err());
    }

    #[test]
    fn uniform_corpus_frequencies() {
        let c = gen_uniform_corpus(3, 1000, 60, 3).unwrap();
        let mut counts = [0f64; 6];
        c.docs.iter().flat_map(|d| &d.input_ids).for_each(|&t| counts[t as usize] += 1.0);
        let n: f64 = 60_000.0;
        let sd = (n * (1.0 / 6.0) * (5.0 / 6.0)).sqrt();
        for c in counts {
            assert!((c - n / 6.0).abs() < 3.0 * sd, "{counts:?}");
        }
        let one = gen_uniform_corpus(3, 5, 1, 3).unwrap();
        assert!(one.docs.iter().all(|d| d.targeted() == 0));
        assert_eq!(gen_uniform_corpus(3, 5, 9, 3).unwrap(), gen_uniform_corpus(3, 5, 9, 3).unwrap());
    }

    #[test]
    fn parity_target_examples() {
        let v = Vocab::group(3).unwrap();
        let swap: Permutation = "213".parse().unwrap();
        let c = Corpus {
            mode: LossMode::State,
            docs: vec![state_document(&v, &[swap.clone(), swap]).unwrap(), state_document(&v, &vec![Permutation::identity(3); 3]).unwrap()],
            vocab: v.clone(),
            meta: CorpusMeta { degree: 3, ..Default::default() },
        };
        let p = parity_targets(&c).unwrap();
        assert_eq!(p.mode, LossMode::Parity);
        let toks = |d: &Document| d.target_ids.iter().map(|t| v.token(t.unwrap()).unwrap().to_string()).collect::<Vec<_>>();
        assert_eq!(toks(&p.docs[0]), ["1", "0"]);
        assert_eq!(toks(&p.docs[1]), ["0", "0", "0"]);
        assert!(parity_targets(&p).is_err());

        let w = gen_word_corpus(3, 50, 12, 9).unwrap();
        let pw = parity_targets(&w).unwrap();
        for i in 0..w.len() {
            let par = state_parities(&w.actions(i).unwrap()).unwrap();
            let want: Vec<_> = par.iter().map(|&q| Some(v.parity_id(q).unwrap())).collect();
            assert_eq!(pw.docs[i].target_ids, want);
        }
    }

    #[test]
    fn aux_targets_layout() {
        let c = gen_word_corpus(3, 20, 5, 4).unwrap();
        let d = training_data(&c, Some(AuxTarget::ParityAction)).unwrap();
        assert_eq!(d.aux_classes, Some(12));
        for (i, doc) in d.docs.iter().enumerate() {
            let acts = c.actions(i).unwrap();
            let par = state_parities(&acts).unwrap();
            for t in 0..5 {
                assert_eq!(doc.aux_targets.as_ref().unwrap()[t], par[t].bit() as u32 * 6 + acts[t].rank() as u32);
            }
        }
        let u = gen_uniform_corpus(3, 4, 5, 0).unwrap();
        assert!(training_data(&u, Some(AuxTarget::Parity)).is_err());
    }
}
