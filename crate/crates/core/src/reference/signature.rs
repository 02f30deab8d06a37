//! Ideal signatures: what prefix patching and per-layer probes would show
//! if a model ran one of the reference schemes exactly.
//!
//! Patching cells follow the measured grid's semantics. The pair differs
//! only at position 0; cell `(t, l)` is 1 when overwriting positions
//! `first..=t` at layer boundary `l` with clean registers makes the final
//! prediction clean again. In a group, a product with exactly one wrong
//! factor is wrong, so restoration happens iff every contaminated register
//! later read by the final position lies inside the restored range. Each
//! scheme reads exactly one contaminated register per layer, at position
//! `p(l)`, and the cell is `1[first <= p(l) <= t]`.

use serde::{Deserialize, Serialize};

use super::Algorithm;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParityRelation {
    Same,
    Opposite,
    Averaged,
}

impl std::str::FromStr for ParityRelation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same" => Ok(Self::Same),
            "opposite" => Ok(Self::Opposite),
            "averaged" | "all" => Ok(Self::Averaged),
            _ => Err(Error::InvalidArgument(format!("unknown parity relation {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignatureParams {
    /// Layer at which the parallel scheme's aggregate is ready.
    pub parallel_depth: usize,
    /// Layer at which the parity register of the parity-associative scheme
    /// is ready.
    pub parity_depth: usize,
    /// Whether restoration includes position 0.
    pub include_first: bool,
}

impl Default for SignatureParams {
    fn default() -> Self {
        Self { parallel_depth: 2, parity_depth: 2, include_first: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSignature {
    pub state: Vec<f64>,
    pub parity: Vec<f64>,
    /// Second parity reading for schemes whose parity may never be linear
    /// (constant 0.5 until the last layer).
    pub parity_alt: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdealSignature {
    pub algorithm: Algorithm,
    pub relation: Option<ParityRelation>,
    pub positions: usize,
    pub depth: usize,
    /// `grid[l][t]`.
    pub grid: Vec<Vec<f64>>,
    pub probe: ProbeSignature,
}

impl IdealSignature {
    pub fn new(
        alg: Algorithm,
        positions: usize,
        depth: usize,
        relation: ParityRelation,
        chance: f64,
        params: &SignatureParams,
    ) -> Result<Self> {
        let grid = ideal_patching_signature(alg, positions, depth, relation, params)?;
        let probe = ideal_probing_signature(alg, positions, depth, chance, params)?;
        let relation = (alg == Algorithm::ParityAssociative).then_some(relation);
        Ok(Self { algorithm: alg, relation, positions, depth, grid, probe })
    }

    pub fn cell(&self, t: usize, l: usize) -> f64 {
        self.grid[l][t]
    }

    pub fn grid_csv(&self) -> String {
        matrix_csv(&self.grid)
    }
}

fn check_dims(positions: usize) -> Result<()> {
    if positions == 0 {
        return Err(Error::InvalidArgument("signature needs at least one position".into()));
    }
    Ok(())
}

fn indicator(positions: usize, depth: usize, first: usize, read: impl Fn(usize) -> Option<usize>) -> Vec<Vec<f64>> {
    (0..=depth)
        .map(|l| {
            (0..positions)
                .map(|t| match read(l) {
                    Some(p) if p >= first && p <= t => 1.0,
                    _ => 0.0,
                })
                .collect()
        })
        .collect()
}

/// Contaminated register read at layer `l` by left-to-right composition.
fn sequential_read(positions: usize, l: usize) -> usize {
    l.min(positions - 1)
}

/// Under pairwise merging the final position reads layer `l` at
/// `T-1, T-1-2^l, ...`; the one whose window reaches position 0 is the
/// smallest.
fn associative_read(positions: usize, l: usize) -> usize {
    let last = positions - 1;
    if l >= usize::BITS as usize - 1 {
        return last;
    }
    last % (1usize << l)
}

/// Before `depth` only position 0 carries the difference; from `depth`
/// on the last position alone holds the finished state.
fn parallel_read(positions: usize, depth: usize, l: usize) -> usize {
    if l < depth {
        0
    } else {
        positions - 1
    }
}

/// Grid `[l][t]` of expected restoration for prefix patching.
pub fn ideal_patching_signature(
    alg: Algorithm,
    positions: usize,
    depth: usize,
    relation: ParityRelation,
    params: &SignatureParams,
) -> Result<Vec<Vec<f64>>> {
    check_dims(positions)?;
    let first = usize::from(!params.include_first);
    let grid = match alg {
        Algorithm::Sequential => indicator(positions, depth, first, |l| Some(sequential_read(positions, l))),
        Algorithm::Associative => indicator(positions, depth, first, |l| Some(associative_read(positions, l))),
        Algorithm::Parallel => {
            indicator(positions, depth, first, |l| Some(parallel_read(positions, params.parallel_depth, l)))
        }
        Algorithm::ParityAssociative => {
            // same-parity pairs differ only in the complement register,
            // opposite-parity pairs are told apart by the parity register
            let same = indicator(positions, depth, first, |l| Some(associative_read(positions, l)));
            let opposite =
                indicator(positions, depth, first, |l| Some(parallel_read(positions, params.parity_depth, l)));
            match relation {
                ParityRelation::Same => same,
                ParityRelation::Opposite => opposite,
                ParityRelation::Averaged => same
                    .iter()
                    .zip(&opposite)
                    .map(|(a, b)| a.iter().zip(b).map(|(x, y)| 0.5 * x + 0.5 * y).collect())
                    .collect(),
            }
        }
    };
    Ok(grid)
}

/// Per-layer probe accuracies: resolved fraction `r` plus chance on the
/// rest.
pub fn ideal_probing_signature(
    alg: Algorithm,
    positions: usize,
    depth: usize,
    chance: f64,
    params: &SignatureParams,
) -> Result<ProbeSignature> {
    check_dims(positions)?;
    if !(0.0..=1.0).contains(&chance) {
        return Err(Error::InvalidArgument(format!("chance {chance} outside [0, 1]")));
    }
    let t = positions as f64;
    let resolved = |l: usize| -> f64 {
        match alg {
            Algorithm::Sequential => (l as f64 / t).min(1.0),
            Algorithm::Parallel => f64::from(u8::from(l >= params.parallel_depth)),
            Algorithm::Associative | Algorithm::ParityAssociative => (2f64.powi(l as i32) / t).min(1.0),
        }
    };
    let layers = 0..=depth;
    let state = layers.clone().map(|l| resolved(l) + (1.0 - resolved(l)) * chance).collect();
    let tracking: Vec<f64> = layers.clone().map(|l| resolved(l) + (1.0 - resolved(l)) * 0.5).collect();
    let (parity, parity_alt) = match alg {
        Algorithm::Parallel => (tracking, None),
        Algorithm::ParityAssociative => {
            (layers.map(|l| if l >= params.parity_depth { 1.0 } else { tracking[l] }).collect(), None)
        }
        Algorithm::Sequential | Algorithm::Associative => {
            let flat = layers.map(|l| if l == depth { tracking[l] } else { 0.5 }).collect();
            (tracking, Some(flat))
        }
    };
    Ok(ProbeSignature { state, parity, parity_alt })
}

/// One CSV row per outer element.
pub fn matrix_csv(rows: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for r in rows {
        let cells: Vec<String> = r.iter().map(|x| format!("{x}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}
