//! Attention-head analyses: parity-head scores and pruned attention graphs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::perm::{random_permutation, Permutation};
use crate::rng::{mix, seeded};
use crate::transformer::{forward, Capture, ForwardTrace, Model, Scalar};

/// First prefix length scored.
pub const MIN_PREFIX: usize = 5;
/// Multiplier on the odd-side confidence half-width.
pub const CI_FACTOR: f64 = 0.95;

/// Score of one head on one input, from its `T × T` attention matrix
/// (row = query). For each prefix length `t` in `5..=max_len`, the query at
/// position `t − 1` counts when the mean weight on odd actions, minus
/// `ci_factor` times the 95% normal half-width of those weights, exceeds the
/// mean weight on even actions. Lengths lacking either parity are skipped.
/// Returns the fraction of scored lengths and the number skipped.
pub fn parity_head_score(attn: &[f64], len: usize, odd: &[bool], max_len: usize, ci_factor: f64) -> (Option<f64>, usize) {
    let mut hits = 0usize;
    let mut scored = 0usize;
    let mut skipped = 0usize;
    for t in MIN_PREFIX..=max_len.min(len) {
        let q = t - 1;
        let row = &attn[q * len..q * len + t];
        let odd_w: Vec<f64> = (0..t).filter(|&i| odd[i]).map(|i| row[i]).collect();
        let even_w: Vec<f64> = (0..t).filter(|&i| !odd[i]).map(|i| row[i]).collect();
        if odd_w.is_empty() || even_w.is_empty() {
            skipped += 1;
            continue;
        }
        let n = odd_w.len() as f64;
        let mean_odd = odd_w.iter().sum::<f64>() / n;
        let sd = if odd_w.len() > 1 {
            (odd_w.iter().map(|w| (w - mean_odd).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let half = 1.96 * sd / n.sqrt();
        let mean_even = even_w.iter().sum::<f64>() / even_w.len() as f64;
        scored += 1;
        hits += usize::from(mean_odd - ci_factor * half > mean_even);
    }
    ((scored > 0).then(|| hits as f64 / scored as f64), skipped)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub layer: usize,
    pub head: usize,
    pub mean: f64,
    pub std: f64,
    pub examples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadScoreTable {
    pub max_len: usize,
    pub scores: Vec<HeadScore>,
    /// Prefix lengths skipped for lacking odd or even actions.
    pub skipped: usize,
}

impl HeadScoreTable {
    pub fn get(&self, layer: usize, head: usize) -> Option<&HeadScore> {
        self.scores.iter().find(|s| s.layer == layer && s.head == head)
    }

    /// Highest-scoring heads first.
    pub fn top(&self, k: usize) -> Vec<&HeadScore> {
        let mut v: Vec<&HeadScore> = self.scores.iter().collect();
        v.sort_by(|a, b| b.mean.total_cmp(&a.mean).then(a.layer.cmp(&b.layer)).then(a.head.cmp(&b.head)));
        v.truncate(k);
        v
    }
}

/// Scores from precomputed attention: `attn[example][layer][head]` is a
/// `T × T` matrix and `odd[example]` marks odd actions.
pub fn score_table(attn: &[Vec<Vec<Vec<f64>>>], odd: &[Vec<bool>], max_len: usize, ci_factor: f64) -> Result<HeadScoreTable> {
    if max_len < MIN_PREFIX + 1 {
        return Err(Error::InvalidArgument(format!("max_len must be at least {}", MIN_PREFIX + 1)));
    }
    let first = attn.first().ok_or_else(|| Error::InvalidArgument("no examples".into()))?;
    let (layers, heads) = (first.len(), first.first().map_or(0, Vec::len));
    let mut skipped = 0;
    let mut scores = Vec::new();
    for l in 0..layers {
        for h in 0..heads {
            let mut vals = Vec::new();
            for (e, ex) in attn.iter().enumerate() {
                let len = odd[e].len();
                let (s, sk) = parity_head_score(&ex[l][h], len, &odd[e], max_len, ci_factor);
                skipped += sk;
                vals.extend(s);
            }
            let n = vals.len() as f64;
            let mean = if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / n };
            let std = if vals.len() > 1 { (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
            scores.push(HeadScore { layer: l, head: h, mean, std, examples: vals.len() });
        }
    }
    Ok(HeadScoreTable { max_len, scores, skipped })
}

fn head_matrices<F: Scalar>(trace: &ForwardTrace<F>, seq: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    let layers = trace.n_layers();
    (0..layers)
        .map(|l| {
            (0..trace.n_heads)
                .map(|h| {
                    trace
                        .attn_matrix(seq, l, h)
                        .map(|m| m.iter().map(|x| x.f64()).collect())
                        .ok_or_else(|| Error::InvalidArgument("trace lacks attention".into()))
                })
                .collect()
        })
        .collect()
}

/// Parity-head scores of every head over `n_examples` random S_n inputs of
/// length `max_len` (defaults: 80 for S3, 50 for S5).
pub fn parity_head_scores(model: &Model, n: usize, max_len: usize, n_examples: usize, seed: u64) -> Result<HeadScoreTable> {
    if max_len > model.cfg.max_positions {
        return Err(Error::InvalidArgument(format!("max_len {max_len} exceeds the model's context")));
    }
    let seqs: Vec<Vec<Permutation>> = (0..n_examples)
        .map(|i| {
            let mut rng = seeded(seed, mix(i as u64, 0x9a21));
            (0..max_len).map(|_| random_permutation(&mut rng, n)).collect()
        })
        .collect();
    let per_example = par::map_slice(&seqs, |s| -> Result<Vec<Vec<Vec<f64>>>> {
        let tokens: Vec<u32> = s.iter().map(|a| a.rank() as u32).collect();
        let out = forward(model, &[&tokens], Capture::ResidAttn)?;
        head_matrices(out.trace.as_ref().expect("captured"), 0)
    });
    let attn = per_example.into_iter().collect::<Result<Vec<_>>>()?;
    let odd: Vec<Vec<bool>> = seqs.iter().map(|s| s.iter().map(|a| a.parity().is_odd()).collect()).collect();
    score_table(&attn, &odd, max_len, CI_FACTOR)
}

pub fn default_head_len(n: usize) -> usize {
    if n == 3 {
        80
    } else {
        50
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphOptions {
    pub min_weight: f64,
    pub k_to: usize,
    pub k_from: usize,
    /// Keep only edges on some path to the last position's final node.
    pub reach_final: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self { min_weight: 0.95, k_to: 3, k_from: 10, reach_final: false }
    }
}

/// Edge from node `(from, layer)` to node `(to, layer + 1)`, where `layer`
/// is the attention block index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub layer: usize,
    pub from: usize,
    pub to: usize,
}

/// Indices of the `k` largest entries (ties to the lower index).
fn top_k(vals: &[(usize, f64)], k: usize) -> Vec<usize> {
    let mut v = vals.to_vec();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().take(k).map(|x| x.0).collect()
}

/// Pruned attention graph over `(position, layer)` nodes from per-block,
/// per-head `T × T` matrices (row = query).
pub fn attention_graph_from(attn: &[Vec<Vec<f64>>], len: usize, opts: &GraphOptions) -> Vec<Edge> {
    let mut edges = Vec::new();
    for (l, heads) in attn.iter().enumerate() {
        // max over heads makes the graph independent of head order
        let w = |q: usize, k: usize| heads.iter().map(|m| m[q * len + k]).fold(0.0, f64::max);
        for to in 0..len {
            let sources: Vec<(usize, f64)> = (0..=to).map(|k| (k, w(to, k))).collect();
            let best_sources = top_k(&sources, opts.k_to);
            for from in 0..=to {
                let a = w(to, from);
                if a <= opts.min_weight || !best_sources.contains(&from) {
                    continue;
                }
                let targets: Vec<(usize, f64)> = (from..len).map(|q| (q, w(q, from))).collect();
                if top_k(&targets, opts.k_from).contains(&to) {
                    edges.push(Edge { layer: l, from, to });
                }
            }
        }
    }
    if opts.reach_final && !attn.is_empty() {
        let mut live = std::collections::HashSet::from([(len - 1, attn.len())]);
        let mut kept = Vec::new();
        for l in (0..attn.len()).rev() {
            for e in edges.iter().filter(|e| e.layer == l) {
                if live.contains(&(e.to, l + 1)) {
                    kept.push(*e);
                }
            }
            for e in kept.iter().filter(|e| e.layer == l) {
                live.insert((e.from, l));
            }
        }
        kept.sort();
        return kept;
    }
    edges
}

/// Attention graph of one traced sequence.
pub fn attention_graph<F: Scalar>(trace: &ForwardTrace<F>, seq: usize, opts: &GraphOptions) -> Result<Vec<Edge>> {
    Ok(attention_graph_from(&head_matrices(trace, seq)?, trace.seq_len(seq), opts))
}
