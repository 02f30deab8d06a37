//! Activation patching on first-token-corrupted pairs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::perm::{cumulative_states, enumerate_group, random_permutation, Permutation};
use crate::rng::{mix, seeded};
use crate::transformer::{forward, forward_patched_batch, Capture, Model, PatchContent, PatchSpec};

/// Denominators below this are treated as degenerate.
pub const MIN_DENOMINATOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairRelation {
    Same,
    Opposite,
}

/// Clean and corrupted token sequences that differ only at position 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchPair {
    pub clean: Vec<u32>,
    pub corrupt: Vec<u32>,
    pub clean_state: Permutation,
    pub corrupt_state: Permutation,
    pub relation: PairRelation,
}

/// Uniform action sequences over S_n (token id = rank). Pairs alternate
/// between same- and opposite-parity corruptions; within a class the
/// replacement first action is uniform.
pub fn make_patch_pairs(n: usize, length: usize, n_pairs: usize, seed: u64) -> Result<Vec<PatchPair>> {
    if n_pairs == 0 || length == 0 {
        return Err(Error::InvalidArgument("need at least one pair of positive length".into()));
    }
    let group = enumerate_group(n)?;
    if group.len() < 3 {
        return Err(Error::InvalidArgument(format!("S{n} is too small to corrupt both ways")));
    }
    Ok(par::map_range(n_pairs, |i| {
        let mut rng = seeded(seed, mix(i as u64, 0x9a17));
        let actions: Vec<Permutation> = (0..length).map(|_| random_permutation(&mut rng, n)).collect();
        let relation = if i % 2 == 0 { PairRelation::Same } else { PairRelation::Opposite };
        let want_same = relation == PairRelation::Same;
        let choices: Vec<&Permutation> = group
            .iter()
            .filter(|g| **g != actions[0] && (g.parity() == actions[0].parity()) == want_same)
            .collect();
        let mut corrupted = actions.clone();
        corrupted[0] = choices[rng.random_range(0..choices.len())].clone();
        let clean_state = cumulative_states(&actions).expect("non-empty").pop().expect("non-empty");
        let corrupt_state = cumulative_states(&corrupted).expect("non-empty").pop().expect("non-empty");
        PatchPair {
            clean: actions.iter().map(|a| a.rank() as u32).collect(),
            corrupt: corrupted.iter().map(|a| a.rank() as u32).collect(),
            clean_state,
            corrupt_state,
            relation,
        }
    }))
}

/// `log p(y) − log p(y2)`: the softmax normaliser cancels.
pub fn log_diff(logits: &[f32], y: usize, y2: usize) -> f64 {
    f64::from(logits[y]) - f64::from(logits[y2])
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn final_row(logits: &[f32], vocab: usize) -> &[f32] {
    &logits[logits.len() - vocab..]
}

fn prob_of(row: &[f32], k: usize) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(f64::from(x)));
    let z: f64 = row.iter().map(|&x| (f64::from(x) - m).exp()).sum();
    (f64::from(row[k]) - m).exp() / z
}

/// Clean-run quantities shared by every patch of one pair.
pub struct PairBaseline {
    /// Clean residual rows per layer boundary (`T × d` each).
    pub clean_resid: Vec<Vec<f32>>,
    /// Model's own predictions on the clean and corrupted inputs.
    pub y: usize,
    pub y_corrupt: usize,
    pub ld_clean: f64,
    pub ld_corrupt: f64,
    pub p_correct_corrupt: f64,
}

impl PairBaseline {
    /// `None` when the model predicts the same answer on both inputs or the
    /// logit differences coincide.
    pub fn new(model: &Model, pair: &PatchPair) -> Result<Option<Self>> {
        let v = model.cfg.vocab_size;
        let clean = forward(model, &[&pair.clean], Capture::Resid)?;
        // baseline logits go through the same patched path as every patch
        let empty = PatchSpec::empty();
        let corrupt = forward_patched_batch(model, &[&pair.corrupt], &[Some(&empty)])?.pop().expect("one");
        let clean_logits = forward_patched_batch(model, &[&pair.clean], &[Some(&empty)])?.pop().expect("one");
        let (cf, xf) = (final_row(&clean_logits, v), final_row(&corrupt, v));
        let (y, y_corrupt) = (argmax(cf), argmax(xf));
        if y == y_corrupt {
            return Ok(None);
        }
        let (ld_clean, ld_corrupt) = (log_diff(cf, y, y_corrupt), log_diff(xf, y, y_corrupt));
        if (ld_clean - ld_corrupt).abs() < MIN_DENOMINATOR {
            return Ok(None);
        }
        let trace = clean.trace.expect("captured");
        let clean_resid = (0..=model.cfg.n_layers).map(|l| trace.resid_seq(0, l).to_vec()).collect();
        let correct = pair.clean_state.rank();
        Ok(Some(Self { clean_resid, y, y_corrupt, ld_clean, ld_corrupt, p_correct_corrupt: prob_of(xf, correct) }))
    }

    /// Clean vectors for positions `start..=end` at boundary `layer`.
    pub fn clean_patch(&self, d: usize, layer: usize, start: usize, end: usize) -> PatchSpec<f32> {
        let v = self.clean_resid[layer][start * d..(end + 1) * d].to_vec();
        PatchSpec::single(layer, start, end, PatchContent::Vectors(v))
    }

    fn nld(&self, patched: &[f32], vocab: usize) -> f64 {
        let ld = log_diff(final_row(patched, vocab), self.y, self.y_corrupt);
        (ld - self.ld_corrupt) / (self.ld_clean - self.ld_corrupt)
    }
}

/// Normalised logit difference of running the corrupted input under
/// `patch`: 0 = no change, 1 = clean answer fully restored. `None` for
/// degenerate pairs.
pub fn nld(model: &Model, pair: &PatchPair, patch: &PatchSpec<f32>) -> Result<Option<f64>> {
    let Some(base) = PairBaseline::new(model, pair)? else { return Ok(None) };
    let out = forward_patched_batch(model, &[&pair.corrupt], &[Some(patch)])?.pop().expect("one");
    Ok(Some(base.nld(&out, model.cfg.vocab_size)))
}

/// Deletion variant on the clean input: `(LD(x) − LD(x; patch)) / LD(x)`,
/// with the answers taken from the pair. 0 = no effect.
pub fn deletion_nld(model: &Model, pair: &PatchPair, patch: &PatchSpec<f32>) -> Result<Option<f64>> {
    let Some(base) = PairBaseline::new(model, pair)? else { return Ok(None) };
    if base.ld_clean.abs() < MIN_DENOMINATOR {
        return Ok(None);
    }
    let out = forward_patched_batch(model, &[&pair.clean], &[Some(patch)])?.pop().expect("one");
    let ld = log_diff(final_row(&out, model.cfg.vocab_size), base.y, base.y_corrupt);
    Ok(Some((base.ld_clean - ld) / base.ld_clean))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Nld,
    CleanProb,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridMode {
    PrefixSub,
    PrefixSubSameParity,
    PrefixSubOppositeParity,
    SuffixDel,
    SuffixSub,
    WindowDel,
    WindowSub,
}

/// Patch content for suffix and window grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Content {
    /// Zero vectors on the clean run.
    Zeros,
    /// Clean vectors on the corrupted run.
    Clean,
}

/// `values[l][t]` with per-cell spread and sample counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignatureGrid {
    pub mode: GridMode,
    pub metric: Metric,
    pub positions: usize,
    pub layers: usize,
    pub values: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
    pub count: Vec<Vec<usize>>,
    /// Pairs dropped as degenerate.
    pub skipped: usize,
    /// Window cells whose range was clipped at the sequence end.
    pub clipped: usize,
    pub include_first: bool,
}

impl SignatureGrid {
    pub fn cell(&self, t: usize, l: usize) -> f64 {
        self.values[l][t]
    }
}

type CellValues = Vec<(f64, f64)>;

fn aggregate(
    per_pair: &[Option<CellValues>],
    keep: impl Fn(usize) -> bool,
    positions: usize,
    layers: usize,
    mode: GridMode,
    metric: Metric,
) -> Result<SignatureGrid> {
    let cells = positions * (layers + 1);
    let mut sum = vec![0.0; cells];
    let mut sq = vec![0.0; cells];
    let mut n = 0usize;
    let mut skipped = 0;
    for (i, vals) in per_pair.iter().enumerate() {
        if !keep(i) {
            continue;
        }
        let Some(vals) = vals else {
            skipped += 1;
            continue;
        };
        n += 1;
        for (c, &(nld, prob)) in vals.iter().enumerate() {
            let x = if metric == Metric::Nld { nld } else { prob };
            sum[c] += x;
            sq[c] += x * x;
        }
    }
    if n == 0 {
        return Err(Error::Data(format!("no usable pairs ({skipped} degenerate)")));
    }
    let nf = n as f64;
    let shape = |f: &dyn Fn(usize) -> f64| -> Vec<Vec<f64>> {
        (0..=layers).map(|l| (0..positions).map(|t| f(l * positions + t)).collect()).collect()
    };
    let values = shape(&|c| sum[c] / nf);
    let std = shape(&|c| (sq[c] / nf - (sum[c] / nf).powi(2)).max(0.0).sqrt());
    Ok(SignatureGrid {
        mode,
        metric,
        positions,
        layers,
        values,
        std,
        count: vec![vec![n; positions]; layers + 1],
        skipped,
        clipped: 0,
        include_first: false,
    })
}

/// Runs `ranges(t)` (inclusive position ranges, `None` = empty) at every
/// layer for one pair and returns `(nld, clean-prob)` per cell.
fn pair_cells(
    model: &Model,
    pair: &PatchPair,
    content: Content,
    ranges: &dyn Fn(usize) -> Option<(usize, usize)>,
) -> Result<Option<CellValues>> {
    let Some(base) = PairBaseline::new(model, pair)? else { return Ok(None) };
    if content == Content::Zeros && base.ld_clean.abs() < MIN_DENOMINATOR {
        return Ok(None);
    }
    let (d, v, layers, positions) = (model.cfg.d_model, model.cfg.vocab_size, model.cfg.n_layers, pair.clean.len());
    let mut specs = Vec::new();
    for l in 0..=layers {
        for t in 0..positions {
            if let Some((a, b)) = ranges(t) {
                let spec = match content {
                    Content::Clean => base.clean_patch(d, l, a, b),
                    Content::Zeros => PatchSpec::single(l, a, b, PatchContent::Zeros),
                };
                specs.push((l * positions + t, spec));
            }
        }
    }
    let input: &[u32] = if content == Content::Clean { &pair.corrupt } else { &pair.clean };
    let seqs = vec![input; specs.len()];
    let patches: Vec<Option<&PatchSpec<f32>>> = specs.iter().map(|(_, s)| Some(s)).collect();
    let outs = forward_patched_batch(model, &seqs, &patches)?;
    let correct = pair.clean_state.rank();
    // empty ranges change nothing
    let untouched = match content {
        Content::Clean => (0.0, base.p_correct_corrupt),
        Content::Zeros => (0.0, f64::NAN),
    };
    let mut cells = vec![untouched; positions * (layers + 1)];
    for ((c, _), out) in specs.iter().zip(&outs) {
        let row = final_row(out, v);
        cells[*c] = match content {
            Content::Clean => (base.nld(out, v), prob_of(row, correct)),
            Content::Zeros => {
                let ld = log_diff(row, base.y, base.y_corrupt);
                ((base.ld_clean - ld) / base.ld_clean, prob_of(row, correct))
            }
        };
    }
    if content == Content::Zeros {
        // clean-run probability for the untouched cells
        let p = prob_of(final_row(&forward_patched_batch(model, &[input], &[None])?[0], v), correct);
        cells.iter_mut().filter(|c| c.1.is_nan()).for_each(|c| c.1 = p);
    }
    Ok(Some(cells))
}

fn all_pair_cells(
    model: &Model,
    pairs: &[PatchPair],
    content: Content,
    ranges: &(dyn Fn(usize) -> Option<(usize, usize)> + Sync),
) -> Result<Vec<Option<CellValues>>> {
    check_pairs(model, pairs)?;
    par::map_slice(pairs, |p| pair_cells(model, p, content, ranges)).into_iter().collect()
}

fn check_pairs(model: &Model, pairs: &[PatchPair]) -> Result<usize> {
    let first = pairs.first().ok_or_else(|| Error::InvalidArgument("no patch pairs".into()))?;
    let positions = first.clean.len();
    if pairs.iter().any(|p| p.clean.len() != positions || p.corrupt.len() != positions) {
        return Err(Error::InvalidArgument("patch pairs must share one length".into()));
    }
    if positions > model.cfg.max_positions {
        return Err(Error::InvalidArgument(format!("pairs of length {positions} exceed the model's context")));
    }
    Ok(positions)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParityFilter {
    All,
    Same,
    Opposite,
}

impl ParityFilter {
    fn keeps(self, r: PairRelation) -> bool {
        match self {
            ParityFilter::All => true,
            ParityFilter::Same => r == PairRelation::Same,
            ParityFilter::Opposite => r == PairRelation::Opposite,
        }
    }

    fn mode(self) -> GridMode {
        match self {
            ParityFilter::All => GridMode::PrefixSub,
            ParityFilter::Same => GridMode::PrefixSubSameParity,
            ParityFilter::Opposite => GridMode::PrefixSubOppositeParity,
        }
    }
}

/// NLD and clean-probability grids for one parity filter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefixGrids {
    pub nld: SignatureGrid,
    pub prob: SignatureGrid,
}

/// Prefix substitution: cell `(t, l)` restores positions `1..=t`
/// (`0..=t` with `include_first`) at boundary `l` on the corrupted run.
pub fn prefix_patch_grid(model: &Model, pairs: &[PatchPair], filter: ParityFilter, include_first: bool) -> Result<PrefixGrids> {
    Ok(prefix_patch_variants(model, pairs, include_first, &[filter])?.pop().expect("one"))
}

/// Several parity filters from one set of patched runs.
pub fn prefix_patch_variants(
    model: &Model,
    pairs: &[PatchPair],
    include_first: bool,
    filters: &[ParityFilter],
) -> Result<Vec<PrefixGrids>> {
    let positions = check_pairs(model, pairs)?;
    let first = usize::from(!include_first);
    let ranges = move |t: usize| (t >= first).then_some((first, t));
    let cells = all_pair_cells(model, pairs, Content::Clean, &ranges)?;
    let layers = model.cfg.n_layers;
    filters
        .iter()
        .map(|&f| {
            let keep = |i: usize| f.keeps(pairs[i].relation);
            let mut nld = aggregate(&cells, keep, positions, layers, f.mode(), Metric::Nld)?;
            let mut prob = aggregate(&cells, keep, positions, layers, f.mode(), Metric::CleanProb)?;
            nld.include_first = include_first;
            prob.include_first = include_first;
            Ok(PrefixGrids { nld, prob })
        })
        .collect()
}

/// Cell `(t, l)` patches positions `t..=T−2` (never the last token).
pub fn suffix_patch_grid(model: &Model, pairs: &[PatchPair], content: Content) -> Result<SignatureGrid> {
    let positions = check_pairs(model, pairs)?;
    let ranges = move |t: usize| (t + 2 <= positions).then(|| (t, positions - 2));
    let cells = all_pair_cells(model, pairs, content, &ranges)?;
    let mode = if content == Content::Zeros { GridMode::SuffixDel } else { GridMode::SuffixSub };
    aggregate(&cells, |_| true, positions, model.cfg.n_layers, mode, Metric::Nld)
}

/// Cell `(t, l)` patches positions `t..=t+w−1`, clipped at the end.
pub fn window_patch_grid(model: &Model, pairs: &[PatchPair], width: usize, content: Content) -> Result<SignatureGrid> {
    if width == 0 {
        return Err(Error::InvalidArgument("window width must be at least 1".into()));
    }
    let positions = check_pairs(model, pairs)?;
    let ranges = move |t: usize| Some((t, (t + width - 1).min(positions - 1)));
    let cells = all_pair_cells(model, pairs, content, &ranges)?;
    let mode = if content == Content::Zeros { GridMode::WindowDel } else { GridMode::WindowSub };
    let mut g = aggregate(&cells, |_| true, positions, model.cfg.n_layers, mode, Metric::Nld)?;
    g.clipped = (0..positions).filter(|t| t + width > positions).count();
    Ok(g)
}
