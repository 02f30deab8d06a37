//! Linear probes: multinomial logistic regression on frozen residuals,
//! fitted by damped Newton steps.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datasets::Corpus;
use crate::error::{Error, Result};
use crate::par;
use crate::perm::{cumulative_states, factorial, random_permutation, Permutation};
use crate::rng::{mix, seeded};
use crate::transformer::{forward, Capture, LossMode, Model, Scalar};

/// Gradient-norm tolerance of the Newton solve.
pub const PROBE_TOL: f64 = 1e-8;
pub const DEFAULT_L2: f64 = 1e-4;
const MAX_NEWTON: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionPolicy {
    LastToken,
    PerPosition,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeTarget {
    State,
    Parity,
}

/// Features at one layer boundary with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeData {
    pub layer: usize,
    pub policy: PositionPolicy,
    pub dim: usize,
    /// Row-major `n × dim`.
    pub features: Vec<f64>,
    /// State rank.
    pub states: Vec<usize>,
    pub parities: Vec<usize>,
    /// Source document of each row, for document-level splits.
    pub docs: Vec<usize>,
    pub state_classes: usize,
}

impl ProbeData {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self, target: ProbeTarget) -> &[usize] {
        match target {
            ProbeTarget::State => &self.states,
            ProbeTarget::Parity => &self.parities,
        }
    }

    pub fn classes(&self, target: ProbeTarget) -> usize {
        match target {
            ProbeTarget::State => self.state_classes,
            ProbeTarget::Parity => 2,
        }
    }

    fn subset(&self, rows: &[usize]) -> ProbeData {
        let mut features = Vec::with_capacity(rows.len() * self.dim);
        for &i in rows {
            features.extend_from_slice(self.row(i));
        }
        ProbeData {
            layer: self.layer,
            policy: self.policy,
            dim: self.dim,
            features,
            states: rows.iter().map(|&i| self.states[i]).collect(),
            parities: rows.iter().map(|&i| self.parities[i]).collect(),
            docs: rows.iter().map(|&i| self.docs[i]).collect(),
            state_classes: self.state_classes,
        }
    }

    /// Rows split by document: a seeded `train_fraction` of documents for
    /// fitting, the rest held out.
    pub fn split(&self, train_fraction: f64, seed: u64) -> (ProbeData, ProbeData) {
        let mut docs: Vec<usize> = self.docs.clone();
        docs.sort_unstable();
        docs.dedup();
        docs.shuffle(&mut seeded(seed, 0x960b));
        let cut = ((docs.len() as f64 * train_fraction).round() as usize).clamp(1, docs.len().saturating_sub(1).max(1));
        let train_docs: std::collections::HashSet<usize> = docs[..cut].iter().copied().collect();
        let (tr, ev): (Vec<usize>, Vec<usize>) = (0..self.len()).partition(|&i| train_docs.contains(&self.docs[i]));
        (self.subset(&tr), self.subset(&ev))
    }
}

/// Residual features of every layer boundary for a batch of action
/// sequences (token id = rank).
pub fn collect_from_actions(model: &Model, seqs: &[Vec<Permutation>], policy: PositionPolicy) -> Result<Vec<ProbeData>> {
    let first = seqs.first().ok_or_else(|| Error::InvalidArgument("no sequences to probe".into()))?;
    let n = first[0].degree();
    let (d, layers) = (model.cfg.d_model, model.cfg.n_layers);
    let mut out: Vec<ProbeData> = (0..=layers)
        .map(|layer| ProbeData {
            layer,
            policy,
            dim: d,
            features: Vec::new(),
            states: Vec::new(),
            parities: Vec::new(),
            docs: Vec::new(),
            state_classes: factorial(n),
        })
        .collect();
    for (c, chunk) in seqs.chunks(128).enumerate() {
        let tokens: Vec<Vec<u32>> = chunk.iter().map(|s| s.iter().map(|a| a.rank() as u32).collect()).collect();
        let refs: Vec<&[u32]> = tokens.iter().map(|t| t.as_slice()).collect();
        let trace = forward(model, &refs, Capture::Resid)?.trace.expect("captured");
        for (s, acts) in chunk.iter().enumerate() {
            let states = cumulative_states(acts)?;
            let positions: Vec<usize> = match policy {
                PositionPolicy::LastToken => vec![acts.len() - 1],
                PositionPolicy::PerPosition => (0..acts.len()).collect(),
            };
            for data in out.iter_mut() {
                for &t in &positions {
                    data.features.extend(trace.resid_at(s, data.layer, t).iter().map(|x| x.f64()));
                    data.states.push(states[t].rank());
                    data.parities.push(usize::from(states[t].parity().bit()));
                    data.docs.push(c * 128 + s);
                }
            }
        }
    }
    Ok(out)
}

/// Probe features of one layer for a state-prediction corpus.
pub fn collect_probe_data(model: &Model, corpus: &Corpus, layer: usize, policy: PositionPolicy) -> Result<ProbeData> {
    if corpus.mode != LossMode::State {
        return Err(Error::Data("probing needs a state-prediction corpus".into()));
    }
    if layer > model.cfg.n_layers {
        return Err(Error::InvalidArgument(format!("layer {layer} > {}", model.cfg.n_layers)));
    }
    let seqs = (0..corpus.len()).map(|i| corpus.actions(i)).collect::<Result<Vec<_>>>()?;
    Ok(collect_from_actions(model, &seqs, policy)?.swap_remove(layer))
}

/// Fitted softmax classifier; `weights` is `classes × (dim + 1)` with the
/// bias last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub layer: usize,
    pub policy: PositionPolicy,
    pub target: ProbeTarget,
    pub classes: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl Probe {
    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        let w = self.dim + 1;
        let z: Vec<f64> = (0..self.classes)
            .map(|c| {
                let row = &self.weights[c * w..(c + 1) * w];
                row[..self.dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + row[self.dim]
            })
            .collect();
        softmax(&z)
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let p = self.probabilities(x);
        (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b })
    }

    /// Accuracy and mean probability on the true class.
    pub fn evaluate(&self, data: &ProbeData) -> (f64, f64) {
        let y = data.labels(self.target);
        if y.is_empty() {
            return (f64::NAN, f64::NAN);
        }
        let (mut hit, mut mass) = (0usize, 0.0);
        for (i, &label) in y.iter().enumerate() {
            let p = self.probabilities(data.row(i));
            let best = (0..p.len()).fold(0, |b, k| if p[k] > p[b] { k } else { b });
            hit += usize::from(best == label);
            mass += p[label];
        }
        (hit as f64 / y.len() as f64, mass / y.len() as f64)
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

struct Objective<'a> {
    x: &'a [f64],
    n: usize,
    d1: usize,
    y: &'a [usize],
    classes: usize,
    l2: f64,
}

impl Objective<'_> {
    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d1..(i + 1) * self.d1]
    }

    fn probs(&self, w: &[f64]) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n * self.classes);
        for i in 0..self.n {
            let xi = self.row(i);
            let z: Vec<f64> = (0..self.classes)
                .map(|c| w[c * self.d1..(c + 1) * self.d1].iter().zip(xi).map(|(a, b)| a * b).sum())
                .collect();
            p.extend(softmax(&z));
        }
        p
    }

    fn value(&self, w: &[f64]) -> f64 {
        let mut f = 0.0;
        for i in 0..self.n {
            let xi = self.row(i);
            let z: Vec<f64> = (0..self.classes)
                .map(|c| w[c * self.d1..(c + 1) * self.d1].iter().zip(xi).map(|(a, b)| a * b).sum())
                .collect();
            let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            f += lse - z[self.y[i]];
        }
        f / self.n as f64 + 0.5 * self.l2 * w.iter().map(|v| v * v).sum::<f64>()
    }

    fn gradient(&self, w: &[f64], p: &[f64]) -> Vec<f64> {
        let (k, d1) = (self.classes, self.d1);
        let mut g = vec![0.0; k * d1];
        for i in 0..self.n {
            let xi = self.row(i);
            for c in 0..k {
                let r = p[i * k + c] - f64::from(u8::from(self.y[i] == c));
                for (gj, xj) in g[c * d1..(c + 1) * d1].iter_mut().zip(xi) {
                    *gj += r * xj;
                }
            }
        }
        let inv = 1.0 / self.n as f64;
        g.iter_mut().zip(w).for_each(|(gj, wj)| *gj = *gj * inv + self.l2 * wj);
        g
    }

    /// Blocks `X^T diag(p_c(δ_cc' − p_c')) X / n`, plus `l2` on the
    /// diagonal.
    fn hessian(&self, p: &[f64]) -> DMatrix<f64> {
        let (k, d1, n) = (self.classes, self.d1, self.n);
        let dim = k * d1;
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut scaled = vec![0.0; n * d1];
        let mut block = vec![0.0; d1 * d1];
        for a in 0..k {
            for b in a..k {
                for i in 0..n {
                    let pa = p[i * k + a];
                    let s = pa * (f64::from(u8::from(a == b)) - p[i * k + b]) / n as f64;
                    for (o, x) in scaled[i * d1..(i + 1) * d1].iter_mut().zip(self.row(i)) {
                        *o = s * x;
                    }
                }
                // block = scaled^T X (d1 × d1)
                f64::gemm(d1, n, d1, 1.0, &scaled, 1, d1 as isize, self.x, d1 as isize, 1, 0.0, &mut block, d1 as isize, 1);
                for i in 0..d1 {
                    for j in 0..d1 {
                        h[(a * d1 + i, b * d1 + j)] = block[i * d1 + j];
                        h[(b * d1 + j, a * d1 + i)] = block[i * d1 + j];
                    }
                }
            }
        }
        for i in 0..dim {
            h[(i, i)] += self.l2;
        }
        h
    }
}

/// Fits L2-regularised multinomial logistic regression by Newton's method
/// with backtracking. Returns the weights, iteration count and whether the
/// gradient norm reached [`PROBE_TOL`].
pub fn fit_logistic(x: &[f64], dim: usize, y: &[usize], classes: usize, l2: f64) -> Result<(Vec<f64>, usize, bool)> {
    let n = y.len();
    if n == 0 || x.len() != n * dim {
        return Err(Error::InvalidArgument("probe data shape mismatch".into()));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
        return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
    }
    if y.iter().all(|&c| c == y[0]) {
        return Err(Error::Data("probe data has a single class".into()));
    }
    if l2 <= 0.0 {
        return Err(Error::InvalidArgument("probe L2 penalty must be positive".into()));
    }
    let d1 = dim + 1;
    let mut xa = Vec::with_capacity(n * d1);
    for i in 0..n {
        xa.extend_from_slice(&x[i * dim..(i + 1) * dim]);
        xa.push(1.0);
    }
    let obj = Objective { x: &xa, n, d1, y, classes, l2 };
    let mut w = vec![0.0; classes * d1];
    let mut f = obj.value(&w);
    for it in 0..MAX_NEWTON {
        let p = obj.probs(&w);
        let g = obj.gradient(&w, &p);
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm < PROBE_TOL {
            return Ok((w, it, true));
        }
        let h = obj.hessian(&p);
        let gv = DVector::from_vec(g.clone());
        let step = match h.clone().cholesky() {
            Some(c) => c.solve(&gv),
            None => h.lu().solve(&gv).unwrap_or_else(|| gv.clone()),
        };
        let slope: f64 = -step.iter().zip(&g).map(|(s, gi)| s * gi).sum::<f64>();
        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha > 1e-10 {
            let cand: Vec<f64> = w.iter().zip(step.iter()).map(|(wi, si)| wi - alpha * si).collect();
            let fc = obj.value(&cand);
            if fc <= f + 1e-4 * alpha * slope {
                w = cand;
                f = fc;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // no further decrease representable
            let gn = obj.gradient(&w, &obj.probs(&w)).iter().map(|v| v * v).sum::<f64>().sqrt();
            return Ok((w, it + 1, gn < PROBE_TOL));
        }
    }
    let gn = obj.gradient(&w, &obj.probs(&w)).iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok((w, MAX_NEWTON, gn < PROBE_TOL))
}

/// Fit on `train`, with the row layout and target taken from it.
pub fn fit_probe(train: &ProbeData, target: ProbeTarget, l2: f64) -> Result<Probe> {
    let classes = train.classes(target);
    let (weights, iterations, converged) = fit_logistic(&train.features, train.dim, train.labels(target), classes, l2)?;
    Ok(Probe { layer: train.layer, policy: train.policy, target, classes, dim: train.dim, weights, iterations, converged })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub probe: Probe,
    pub accuracy: f64,
    pub mean_correct_prob: f64,
    pub n_train: usize,
    pub n_eval: usize,
}

/// Document-level 80/20 split, fit, and held-out accuracy.
pub fn train_probe(data: &ProbeData, target: ProbeTarget, l2: f64, seed: u64) -> Result<ProbeResult> {
    let (train, eval) = data.split(0.8, seed);
    if eval.is_empty() {
        return Err(Error::Data("no held-out rows for the probe".into()));
    }
    let probe = fit_probe(&train, target, l2)?;
    let (accuracy, mean_correct_prob) = probe.evaluate(&eval);
    Ok(ProbeResult { probe, accuracy, mean_correct_prob, n_train: train.len(), n_eval: eval.len() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeCurves {
    pub state: Vec<f64>,
    pub parity: Vec<f64>,
    pub state_chance: f64,
    pub n_train: usize,
    pub n_eval: usize,
}

/// One state and one parity probe per layer boundary on last-token
/// features.
pub fn probe_curves(model: &Model, corpus: &Corpus, seed: u64, l2: f64) -> Result<ProbeCurves> {
    if corpus.mode != LossMode::State {
        return Err(Error::Data("probing needs a state-prediction corpus".into()));
    }
    let seqs = (0..corpus.len()).map(|i| corpus.actions(i)).collect::<Result<Vec<_>>>()?;
    probe_curves_for(model, &seqs, seed, l2)
}

pub fn probe_curves_for(model: &Model, seqs: &[Vec<Permutation>], seed: u64, l2: f64) -> Result<ProbeCurves> {
    let data = collect_from_actions(model, seqs, PositionPolicy::LastToken)?;
    let fits = par::map_slice(&data, |d| -> Result<(ProbeResult, ProbeResult)> {
        Ok((train_probe(d, ProbeTarget::State, l2, seed)?, train_probe(d, ProbeTarget::Parity, l2, seed)?))
    });
    let fits = fits.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(ProbeCurves {
        state: fits.iter().map(|f| f.0.accuracy).collect(),
        parity: fits.iter().map(|f| f.1.accuracy).collect(),
        state_chance: 1.0 / data[0].state_classes as f64,
        n_train: fits[0].0.n_train,
        n_eval: fits[0].0.n_eval,
    })
}

/// Final-token features of length-`i` inputs, per layer, for one length.
#[derive(Clone, Debug, PartialEq)]
pub struct LengthSamples {
    pub length: usize,
    /// One entry per layer.
    pub layers: Vec<ProbeData>,
}

/// Mean held-out probability on the correct final state, `[layer][length]`,
/// with a separate probe per (layer, length).
pub fn length_probe_matrix(samples: &[LengthSamples], seed: u64, l2: f64) -> Result<Vec<Vec<f64>>> {
    let layers = samples.first().map_or(0, |s| s.layers.len());
    let cells: Vec<(usize, usize)> = (0..layers).flat_map(|l| (0..samples.len()).map(move |i| (l, i))).collect();
    let vals = par::map_slice(&cells, |&(l, i)| -> Result<f64> {
        let data = &samples[i].layers[l];
        let (train, eval) = data.split(0.8, mix(seed, i as u64));
        if train.states.iter().all(|&c| c == train.states[0]) {
            // a single observed class (length 1 with one action type, say)
            let c = train.states[0];
            return Ok(eval.states.iter().filter(|&&s| s == c).count() as f64 / eval.len().max(1) as f64);
        }
        let probe = fit_probe(&train, ProbeTarget::State, l2)?;
        Ok(probe.evaluate(&eval).1)
    });
    let vals = vals.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(vals.chunks(samples.len()).map(|c| c.to_vec()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthProbe {
    pub lengths: Vec<usize>,
    /// `[layer][length index]`.
    pub mean_correct_prob: Vec<Vec<f64>>,
}

/// Probe accuracy by input length: random S_n sequences of the longest
/// length; a length-`i` input is read off at position `i − 1`.
pub fn probe_by_length(model: &Model, n: usize, lengths: &[usize], n_seqs: usize, seed: u64, l2: f64) -> Result<LengthProbe> {
    let max_len = *lengths.iter().max().ok_or_else(|| Error::InvalidArgument("no lengths".into()))?;
    if max_len > model.cfg.max_positions || lengths.contains(&0) {
        return Err(Error::InvalidArgument(format!("lengths must lie in 1..={}", model.cfg.max_positions)));
    }
    let seqs: Vec<Vec<Permutation>> = (0..n_seqs)
        .map(|i| {
            let mut rng = seeded(seed, mix(i as u64, 0x1e9));
            (0..max_len).map(|_| random_permutation(&mut rng, n)).collect()
        })
        .collect();
    let per_pos = collect_from_actions(model, &seqs, PositionPolicy::PerPosition)?;
    let samples: Vec<LengthSamples> = lengths
        .iter()
        .map(|&len| {
            let rows: Vec<usize> = (0..n_seqs).map(|s| s * max_len + len - 1).collect();
            LengthSamples { length: len, layers: per_pos.iter().map(|d| d.subset(&rows)).collect() }
        })
        .collect();
    Ok(LengthProbe { lengths: lengths.to_vec(), mean_correct_prob: length_probe_matrix(&samples, seed, l2)? })
}
