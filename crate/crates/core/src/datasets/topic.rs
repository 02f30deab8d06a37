//! Latent-topic document generator over group-element tokens.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use super::{next_token_targets, Corpus, CorpusMeta, Document, Vocab};
use crate::error::{Error, Result};
use crate::perm::factorial;
use crate::rng::seeded;
use crate::transformer::LossMode;

/// Rows are topics, columns are group elements in lexicographic order
/// (123, 132, 213, 231, 312, 321 for S3).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicModelParams {
    pub n_topics: usize,
    pub alpha: f64,
    pub token_topic: Vec<Vec<f64>>,
}

const APP_G1: [[f64; 6]; 4] = [
    [3.06e-2, 1.11e-1, 5.79e-4, 6.45e-3, 6.58e-3, 8.45e-1],
    [3.36e-1, 1.69e-4, 6.63e-1, 8.05e-7, 1.68e-7, 7.81e-4],
    [7.92e-5, 1.41e-2, 9.44e-1, 4.53e-4, 4.13e-2, 3.27e-11],
    [2.85e-3, 1.29e-9, 7.06e-1, 6.37e-7, 2.58e-3, 2.89e-1],
];

const APP_G2: [[f64; 6]; 4] = [
    [9.31e-1, 2.32e-3, 1.38e-8, 5.86e-10, 4.62e-5, 6.63e-2],
    [2.10e-4, 3.12e-4, 9.32e-7, 9.07e-6, 2.53e-1, 7.47e-1],
    [4.95e-1, 1.18e-3, 4.55e-1, 2.17e-2, 1.86e-8, 2.71e-2],
    [6.55e-1, 4.92e-4, 3.44e-1, 2.28e-7, 1.94e-4, 2.14e-8],
];

impl TopicModelParams {
    /// Built-in 4-topic S3 presets, `"appG1"` and `"appG2"`.
    pub fn preset(name: &str) -> Result<Self> {
        let m = match name {
            "appG1" => &APP_G1,
            "appG2" => &APP_G2,
            _ => return Err(Error::Config(format!("unknown topic preset {name:?}"))),
        };
        Ok(Self { n_topics: 4, alpha: 0.3, token_topic: m.iter().map(|r| r.to_vec()).collect() })
    }

    pub fn validate(&self, n_tokens: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_topics == 0 || self.token_topic.len() != self.n_topics {
            return fail(format!("expected {} topic rows, got {}", self.n_topics, self.token_topic.len()));
        }
        if !(self.alpha > 0.0) {
            return fail("alpha must be positive".into());
        }
        for (k, row) in self.token_topic.iter().enumerate() {
            if row.len() != n_tokens {
                return fail(format!("topic {k} has {} entries, expected {n_tokens}", row.len()));
            }
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return fail(format!("topic {k} has a negative or non-finite entry"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-3 {
                return fail(format!("topic {k} sums to {s}"));
            }
        }
        Ok(())
    }

    /// Expected token distribution under the symmetric Dirichlet prior.
    pub fn marginal(&self) -> Vec<f64> {
        let k = self.n_topics as f64;
        let mut m = vec![0.0; self.token_topic[0].len()];
        for row in &self.token_topic {
            let s: f64 = row.iter().sum();
            for (x, p) in m.iter_mut().zip(row) {
                *x += p / s / k;
            }
        }
        m
    }
}

/// Per document: topic mixture from Dirichlet(alpha), then per token a
/// topic and a group element from that topic's row. Next-token targets.
pub fn gen_topic_corpus(params: &TopicModelParams, n: usize, count: usize, length: usize, seed: u64) -> Result<Corpus> {
    let vocab = Vocab::group(n)?;
    params.validate(factorial(n))?;
    let gamma = Gamma::new(params.alpha, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let rows: Vec<WeightedIndex<f64>> = params
        .token_topic
        .iter()
        .map(|r| WeightedIndex::new(r).map_err(|e| Error::Config(e.to_string())))
        .collect::<Result<_>>()?;
    let docs = crate::par::map_range(count, |i| {
        let mut rng = seeded(seed, i as u64);
        let mut theta: Vec<f64> = (0..params.n_topics).map(|_| gamma.sample(&mut rng)).collect();
        let s: f64 = theta.iter().sum();
        if s > 0.0 {
            theta.iter_mut().for_each(|x| *x /= s);
        } else {
            // all draws underflowed; fall back to a single random topic
            theta.iter_mut().for_each(|x| *x = 0.0);
            theta[rand::Rng::random_range(&mut rng, 0..params.n_topics)] = 1.0;
        }
        let topics = WeightedIndex::new(&theta).expect("normalised mixture");
        let ids: Vec<u32> = (0..length).map(|_| rows[topics.sample(&mut rng)].sample(&mut rng) as u32).collect();
        Document { target_ids: next_token_targets(&ids), input_ids: ids }
    });
    let mut extra = BTreeMap::new();
    extra.insert("alpha".into(), params.alpha.to_string());
    extra.insert("n_topics".into(), params.n_topics.to_string());
    Ok(Corpus {
        mode: LossMode::NextToken,
        vocab,
        docs,
        meta: CorpusMeta { generator: "topic".into(), seed, degree: n, length, extra },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_verbatim_and_normalised() {
        let g1 = TopicModelParams::preset("appG1").unwrap();
        assert_eq!(g1.token_topic[0][5], 8.45e-1);
        assert_eq!(g1.token_topic[2][5], 3.27e-11);
        assert_eq!(g1.alpha, 0.3);
        let g2 = TopicModelParams::preset("appG2").unwrap();
        assert_eq!(g2.token_topic[1][5], 7.47e-1);
        for p in [g1, g2] {
            p.validate(6).unwrap();
            for row in &p.token_topic {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-3);
            }
        }
        assert!(TopicModelParams::preset("appG3").is_err());
    }

    #[test]
    fn degenerate_model_gives_constant_documents() {
        let mut row = vec![0.0; 6];
        row[4] = 1.0;
        let p = TopicModelParams { n_topics: 1, alpha: 0.3, token_topic: vec![row] };
        let c = gen_topic_corpus(&p, 3, 20, 10, 1).unwrap();
        assert!(c.docs.iter().all(|d| d.input_ids.iter().all(|&t| t == 4)));
        assert_eq!(c.docs[0].target_ids[9], None);
        assert_eq!(c.docs[0].target_ids[0], Some(4));
    }

    #[test]
    fn unigram_frequencies_match_marginal() {
        // one token per document keeps draws independent
        let p = TopicModelParams::preset("appG1").unwrap();
        let n = 50_000;
        let c = gen_topic_corpus(&p, 3, n, 1, 11).unwrap();
        let mut counts = [0f64; 6];
        c.docs.iter().for_each(|d| counts[d.input_ids[0] as usize] += 1.0);
        for (c, m) in counts.iter().zip(p.marginal()) {
            let sd = (n as f64 * m * (1.0 - m)).sqrt();
            assert!((c - n as f64 * m).abs() <= 3.0 * sd.max(1.0), "{c} vs {}", n as f64 * m);
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = TopicModelParams::preset("appG2").unwrap();
        p.alpha = 0.0;
        assert!(p.validate(6).is_err());
        let mut p = TopicModelParams::preset("appG2").unwrap();
        p.token_topic[0][0] = 0.5;
        assert!(gen_topic_corpus(&p, 3, 1, 1, 0).is_err());
    }
}
