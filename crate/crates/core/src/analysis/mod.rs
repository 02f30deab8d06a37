//! Judgments derived from measurements: length-generalization curves and
//! their cutoffs, AA/PAA classification, training-phase detection and
//! matching of measured patching grids against ideal ones.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::perm::{cumulative_states, enumerate_group, random_permutation, Permutation};
use crate::reference::{Algorithm, IdealSignature, ParityRelation};
use crate::rng::{mix, seeded};
use crate::transformer::{forward, Capture, EvalMetrics, Model, TrainRecord};


/// Accuracy threshold defining the cutoff length.
pub const DEFAULT_THRESHOLD: f64 = 0.98;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationCurve {
    pub lengths: Vec<usize>,
    pub state: Vec<f64>,
    pub parity: Vec<f64>,
    pub samples: Vec<usize>,
}

impl GeneralizationCurve {
    /// Scores predicted states against the truth. `predicted[i][t]` is
    /// `None` when the prediction was not a valid state token; such entries
    /// count as wrong for both state and parity.
    pub fn from_predictions(truth: &[Vec<Permutation>], predicted: &[Vec<Option<Permutation>>]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::LengthMismatch { expected: truth.len(), got: predicted.len() });
        }
        let max_len = truth.iter().map(Vec::len).max().unwrap_or(0);
        let mut state = vec![0usize; max_len];
        let mut parity = vec![0usize; max_len];
        let mut samples = vec![0usize; max_len];
        for (s, p) in truth.iter().zip(predicted) {
            if s.len() != p.len() {
                return Err(Error::LengthMismatch { expected: s.len(), got: p.len() });
            }
            for (t, (want, got)) in s.iter().zip(p).enumerate() {
                samples[t] += 1;
                if let Some(got) = got {
                    state[t] += usize::from(got == want);
                    parity[t] += usize::from(got.parity() == want.parity());
                }
            }
        }
        let frac = |c: &[usize]| c.iter().zip(&samples).map(|(&k, &n)| if n == 0 { 0.0 } else { k as f64 / n as f64 }).collect();
        Ok(Self { lengths: (1..=max_len).collect(), state: frac(&state), parity: frac(&parity), samples })
    }

    pub fn max_len(&self) -> usize {
        self.lengths.last().copied().unwrap_or(0)
    }

    pub fn state_cutoff(&self, threshold: f64) -> Result<Cutoff> {
        cutoff_length(&self.lengths, &self.state, threshold)
    }

    pub fn parity_cutoff(&self, threshold: f64) -> Result<Cutoff> {
        cutoff_length(&self.lengths, &self.parity, threshold)
    }

    pub fn to_metrics(&self) -> EvalMetrics {
        EvalMetrics { accuracy_by_length: self.state.clone(), parity_by_length: Some(self.parity.clone()) }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("length,state_accuracy,parity_accuracy,samples\n");
        for i in 0..self.lengths.len() {
            s += &format!("{},{},{},{}\n", self.lengths[i], self.state[i], self.parity[i], self.samples[i]);
        }
        s
    }
}

fn random_words(n: usize, len: usize, count: usize, seed: u64) -> Vec<Vec<Permutation>> {
    (0..count)
        .map(|i| {
            let mut rng = seeded(seed, mix(i as u64, 0x6e11));
            (0..len).map(|_| random_permutation(&mut rng, n)).collect()
        })
        .collect()
}

/// Argmax state prediction at every position, `None` for non-state tokens.
pub fn predict_states(model: &Model, n: usize, seqs: &[Vec<Permutation>]) -> Result<Vec<Vec<Option<Permutation>>>> {
    let group = enumerate_group(n)?;
    let vocab = model.cfg.vocab_size;
    let chunks = par::map_chunks(seqs, 32, |chunk| -> Result<Vec<Vec<Option<Permutation>>>> {
        let tokens: Vec<Vec<u32>> = chunk.iter().map(|s| s.iter().map(|a| a.rank() as u32).collect()).collect();
        let refs: Vec<&[u32]> = tokens.iter().map(Vec::as_slice).collect();
        let out = forward(model, &refs, Capture::None)?;
        Ok((0..chunk.len())
            .map(|i| {
                (0..chunk[i].len())
                    .map(|t| {
                        let row = out.logits_at(i, t);
                        let best = (0..vocab).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap_or(0);
                        group.get(best).cloned()
                    })
                    .collect()
            })
            .collect())
    });
    Ok(chunks.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
}

/// State and parity accuracy at every length up to `max_len`, measured on
/// `n_eval` random words of length `max_len` (the prediction at position
/// `t` scores length `t + 1`).
pub fn generalization_curve(model: &Model, n: usize, max_len: usize, n_eval: usize, seed: u64) -> Result<GeneralizationCurve> {
    if max_len == 0 || max_len > model.cfg.max_positions {
        return Err(Error::InvalidArgument(format!("max_len {max_len} outside 1..={}", model.cfg.max_positions)));
    }
    if n_eval == 0 {
        return Err(Error::InvalidArgument("n_eval must be positive".into()));
    }
    let words = random_words(n, max_len, n_eval, seed);
    let truth = words.iter().map(|w| cumulative_states(w)).collect::<Result<Vec<_>>>()?;
    let predicted = predict_states(model, n, &words)?;
    GeneralizationCurve::from_predictions(&truth, &predicted)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CutoffFlag {
    Dipped,
    /// Never below threshold; the cutoff is the longest length measured.
    NoDip,
    /// Below threshold already at the first length.
    Unconverged,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cutoff {
    pub length: usize,
    pub flag: CutoffFlag,
}

/// Last length before the accuracy first drops below `threshold`.
pub fn cutoff_length(lengths: &[usize], accuracy: &[f64], threshold: f64) -> Result<Cutoff> {
    if lengths.is_empty() || lengths.len() != accuracy.len() {
        return Err(Error::InvalidArgument("curve must be nonempty with one accuracy per length".into()));
    }
    match accuracy.iter().position(|&a| a < threshold) {
        None => Ok(Cutoff { length: *lengths.last().expect("nonempty"), flag: CutoffFlag::NoDip }),
        Some(0) => Ok(Cutoff { length: lengths[0].saturating_sub(1), flag: CutoffFlag::Unconverged }),
        Some(i) => Ok(Cutoff { length: lengths[i - 1], flag: CutoffFlag::Dipped }),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mechanism {
    #[serde(rename = "AA")]
    Aa,
    #[serde(rename = "PAA")]
    Paa,
    Neither,
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mechanism::Aa => "AA",
            Mechanism::Paa => "PAA",
            Mechanism::Neither => "Neither",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifyParams {
    /// Cutoffs within this many lengths count as equal.
    pub tol: usize,
    /// The state cutoff must reach this fraction of the training length.
    pub converged_fraction: f64,
}

impl Default for ClassifyParams {
    fn default() -> Self {
        Self { tol: 2, converged_fraction: 0.9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub state_cutoff: usize,
    pub parity_cutoff: usize,
    pub train_len: usize,
    pub tol: usize,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature: Option<SignatureMatch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechanismLabel {
    pub label: Mechanism,
    pub evidence: Evidence,
}

/// AA when the parity and state cutoffs agree, PAA when parity generalizes
/// further, Neither when the state cutoff falls short of the training
/// length or parity trails state.
pub fn classify_mechanism(state_cutoff: usize, parity_cutoff: usize, train_len: usize, params: &ClassifyParams) -> MechanismLabel {
    let converged = state_cutoff as f64 >= params.converged_fraction * train_len as f64;
    let label = if !converged {
        Mechanism::Neither
    } else if parity_cutoff > state_cutoff + params.tol {
        Mechanism::Paa
    } else if parity_cutoff.abs_diff(state_cutoff) <= params.tol {
        Mechanism::Aa
    } else {
        Mechanism::Neither
    };
    MechanismLabel {
        label,
        evidence: Evidence { state_cutoff, parity_cutoff, train_len, tol: params.tol, converged, signature: None },
    }
}

/// Classification straight from a curve at the given threshold.
pub fn classify_curve(curve: &GeneralizationCurve, train_len: usize, threshold: f64, params: &ClassifyParams) -> Result<MechanismLabel> {
    let s = curve.state_cutoff(threshold)?;
    let p = curve.parity_cutoff(threshold)?;
    Ok(classify_mechanism(s.length, p.length, train_len, params))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub algorithm: Algorithm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<ParityRelation>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignatureMatch {
    pub best: Algorithm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_relation: Option<ParityRelation>,
    pub scores: Vec<CandidateScore>,
    /// Another candidate scored equal to the best and lost the tie-break.
    pub tie: bool,
}

const TIE_EPS: f64 = 1e-12;

/// Pearson correlation over all cells of two equally shaped grids.
pub fn pearson(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::InvalidArgument("grids differ in shape".into()));
    }
    let x: Vec<f64> = a.iter().flatten().copied().collect();
    let y: Vec<f64> = b.iter().flatten().copied().collect();
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (u, v) in x.iter().zip(&y) {
        sxy += (u - mx) * (v - my);
        sxx += (u - mx).powi(2);
        syy += (v - my).powi(2);
    }
    if !(sxx > 0.0) || !(syy > 0.0) {
        return Err(Error::Numeric("zero-variance grid".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Nearest-cell resampling of a `[layer][position]` grid.
pub fn resample_grid(grid: &[Vec<f64>], layers: usize, positions: usize) -> Vec<Vec<f64>> {
    let (gl, gt) = (grid.len(), grid.first().map_or(0, Vec::len));
    let pick = |i: usize, from: usize, to: usize| if to <= 1 { 0 } else { ((i * (from - 1)) as f64 / (to - 1) as f64).round() as usize };
    (0..layers).map(|l| (0..positions).map(|t| grid[pick(l, gl, layers)][pick(t, gt, positions)]).collect()).collect()
}

/// Correlates the measured grid with each ideal (resampled to its shape
/// when needed). Ties go to the simpler algorithm, in the order
/// sequential, parallel, associative, parity-associative.
pub fn signature_match(empirical: &[Vec<f64>], ideals: &[IdealSignature]) -> Result<SignatureMatch> {
    if ideals.is_empty() {
        return Err(Error::InvalidArgument("no candidate signatures".into()));
    }
    let (layers, positions) = (empirical.len(), empirical.first().map_or(0, Vec::len));
    let mut scores = Vec::with_capacity(ideals.len());
    for ideal in ideals {
        let g = if ideal.grid.len() == layers && ideal.grid.iter().all(|r| r.len() == positions) {
            pearson(empirical, &ideal.grid)?
        } else {
            pearson(empirical, &resample_grid(&ideal.grid, layers, positions))?
        };
        scores.push(CandidateScore { algorithm: ideal.algorithm, relation: ideal.relation, score: g });
    }
    let top = scores.iter().map(|c| c.score).fold(f64::NEG_INFINITY, f64::max);
    let rank = |a: Algorithm| Algorithm::ALL.iter().position(|&x| x == a).unwrap_or(usize::MAX);
    let tied: Vec<&CandidateScore> = scores.iter().filter(|c| top - c.score <= TIE_EPS).collect();
    let winner = tied.iter().min_by_key(|c| rank(c.algorithm)).expect("at least one candidate");
    Ok(SignatureMatch { best: winner.algorithm, best_relation: winner.relation, tie: tied.len() > 1, scores: scores.clone() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub loss: f64,
    pub state_cutoff: usize,
    pub parity_cutoff: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub train_len: usize,
    pub entries: Vec<LogEntry>,
}

impl TrainingLog {
    /// Cutoffs of every evaluated record that carries a parity curve.
    pub fn from_records(records: &[TrainRecord], train_len: usize, threshold: f64) -> Result<Self> {
        let mut entries: Vec<LogEntry> = Vec::new();
        for r in records {
            let Some(eval) = &r.eval else { continue };
            let Some(par) = &eval.parity_by_length else { continue };
            let lengths: Vec<usize> = (1..=eval.accuracy_by_length.len()).collect();
            let entry = LogEntry {
                step: r.step,
                loss: r.loss,
                state_cutoff: cutoff_length(&lengths, &eval.accuracy_by_length, threshold)?.length,
                parity_cutoff: cutoff_length(&lengths, par, threshold)?.length,
            };
            // epoch-end and periodic evaluations can land on the same step
            match entries.last_mut() {
                Some(last) if last.step == entry.step => *last = entry,
                Some(last) if last.step > entry.step => return Err(Error::Data("log steps are not increasing".into())),
                _ => entries.push(entry),
            }
        }
        Ok(Self { train_len, entries })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    TwoPhase,
    Simultaneous,
    Undetermined,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseParams {
    pub tol: usize,
    pub parity_fraction: f64,
    pub state_fraction: f64,
    pub track_fraction: f64,
}

impl Default for PhaseParams {
    fn default() -> Self {
        Self { tol: 2, parity_fraction: 0.9, state_fraction: 0.5, track_fraction: 0.25 }
    }
}

/// Two-phase when parity generalizes over the training length while state
/// still lags far behind; simultaneous when the two cutoffs stay together
/// once both are underway.
pub fn phase_detect(log: &TrainingLog, params: &PhaseParams) -> Result<Phase> {
    if log.entries.windows(2).any(|w| w[0].step >= w[1].step) {
        return Err(Error::Data("log steps are not increasing".into()));
    }
    if log.entries.len() < 2 {
        return Ok(Phase::Undetermined);
    }
    let len = log.train_len as f64;
    let two_phase = log
        .entries
        .iter()
        .any(|e| e.parity_cutoff as f64 >= params.parity_fraction * len && e.state_cutoff as f64 <= params.state_fraction * len);
    if two_phase {
        return Ok(Phase::TwoPhase);
    }
    let floor = params.track_fraction * len;
    let Some(start) = log.entries.iter().position(|e| e.state_cutoff as f64 > floor && e.parity_cutoff as f64 > floor) else {
        return Ok(Phase::Undetermined);
    };
    if log.entries[start..].iter().all(|e| e.state_cutoff.abs_diff(e.parity_cutoff) <= params.tol) {
        Ok(Phase::Simultaneous)
    } else {
        Ok(Phase::Undetermined)
    }
}

/// Ideal grids of all four algorithms at the given shape, with PAA in its
/// averaged form.
pub fn candidate_signatures(positions: usize, layers: usize, params: &crate::reference::SignatureParams) -> Result<Vec<IdealSignature>> {
    Algorithm::ALL
        .iter()
        .map(|&a| IdealSignature::new(a, positions, layers, ParityRelation::Averaged, 0.0, params))
        .collect()
}
