//! Exact register-level simulators of the four candidate state-tracking
//! mechanisms, plus the patching and probing signatures they imply.
//!
//! A grid has rows `l = 0..=L` and columns `t = 0..T-1`. Row 0 holds the
//! raw actions (or the parity-initialised registers for the
//! parity-associative scheme).

mod parallel;
mod signature;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perm::{compose, state_parities, Parity, Permutation};

pub use parallel::{run_parallel_s3, s3_generators, ParallelS3State};
pub use signature::{
    ideal_patching_signature, ideal_probing_signature, matrix_csv, IdealSignature, ParityRelation, SignatureParams,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Sequential,
    Parallel,
    Associative,
    ParityAssociative,
}

impl Algorithm {
    /// Simplest first; used to break ties.
    pub const ALL: [Algorithm; 4] =
        [Algorithm::Sequential, Algorithm::Parallel, Algorithm::Associative, Algorithm::ParityAssociative];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Sequential => "sequential",
            Algorithm::Parallel => "parallel",
            Algorithm::Associative => "associative",
            Algorithm::ParityAssociative => "parity-associative",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sequential" | "seq" => Ok(Algorithm::Sequential),
            "parallel" | "par" => Ok(Algorithm::Parallel),
            "associative" | "aa" => Ok(Algorithm::Associative),
            "parity-associative" | "paa" => Ok(Algorithm::ParityAssociative),
            _ => Err(Error::InvalidArgument(format!("unknown algorithm {s:?}"))),
        }
    }
}

/// One hidden-state register.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Register {
    Perm(Permutation),
    /// Parity of the prefix state and the even complement of the window
    /// product.
    Paa { parity: Parity, complement: Permutation },
}

impl fmt::Display for Register {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Register::Perm(p) => write!(f, "{p}"),
            Register::Paa { parity, complement } => write!(f, "{}/{complement}", parity.bit()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterGrid {
    pub algorithm: Algorithm,
    pub positions: usize,
    pub depth: usize,
    /// Row-major by layer: `cells[l * positions + t]`.
    cells: Vec<Register>,
    /// Whether `depth` suffices for the last row to hold every state.
    pub complete: bool,
}

impl RegisterGrid {
    fn from_rows(algorithm: Algorithm, rows: Vec<Vec<Register>>, complete: bool) -> Self {
        let positions = rows[0].len();
        let depth = rows.len() - 1;
        Self { algorithm, positions, depth, cells: rows.into_iter().flatten().collect(), complete }
    }

    pub fn cell(&self, t: usize, l: usize) -> &Register {
        &self.cells[l * self.positions + t]
    }

    pub fn row(&self, l: usize) -> &[Register] {
        &self.cells[l * self.positions..(l + 1) * self.positions]
    }

    /// The permutation a cell stands for (decoding parity-associative
    /// registers).
    pub fn value(&self, t: usize, l: usize) -> Permutation {
        match self.cell(t, l) {
            Register::Perm(p) => p.clone(),
            Register::Paa { parity, complement } => decode(*parity, complement),
        }
    }

    /// What the deepest row predicts at every position.
    pub fn predictions(&self) -> Vec<Permutation> {
        (0..self.positions).map(|t| self.value(t, self.depth)).collect()
    }

    pub fn final_prediction(&self) -> Permutation {
        self.value(self.positions - 1, self.depth)
    }

    /// Token matrix, one row per layer.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for l in 0..=self.depth {
            let row: Vec<String> = self.row(l).iter().map(|r| r.to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

fn check_actions(a: &[Permutation]) -> Result<usize> {
    let first = a.first().ok_or_else(|| Error::InvalidArgument("empty action sequence".into()))?;
    let n = first.degree();
    if let Some(p) = a.iter().find(|p| p.degree() != n) {
        return Err(Error::DegreeMismatch(n, p.degree()));
    }
    Ok(n)
}

fn mul(a: &Permutation, b: &Permutation) -> Permutation {
    compose(a, b).expect("equal degree")
}

/// One layer of the left-to-right scheme: position `l` absorbs the state
/// finished at `l - 1`; every other register is carried.
pub(crate) fn sequential_step(prev: &[Permutation], l: usize) -> Vec<Permutation> {
    (0..prev.len())
        .map(|t| if t == l && t > 0 { mul(&prev[t - 1], &prev[t]) } else { prev[t].clone() })
        .collect()
}

/// One layer of pairwise window merging. Positions whose left partner
/// would fall before the sequence already hold their full prefix.
pub(crate) fn associative_step(prev: &[Permutation], l: usize) -> Vec<Permutation> {
    let half = 1usize << (l - 1);
    (0..prev.len())
        .map(|t| if t >= half { mul(&prev[t - half], &prev[t]) } else { prev[t].clone() })
        .collect()
}

fn perm_rows(algorithm: Algorithm, a: &[Permutation], depth: usize, complete: bool, step: fn(&[Permutation], usize) -> Vec<Permutation>) -> RegisterGrid {
    let mut rows = vec![a.to_vec()];
    for l in 1..=depth {
        let next = step(&rows[l - 1], l);
        rows.push(next);
    }
    let rows = rows.into_iter().map(|r| r.into_iter().map(Register::Perm).collect()).collect();
    RegisterGrid::from_rows(algorithm, rows, complete)
}

/// Left-to-right composition: `h[t][l]` is `a_t` while `l < t` and `s_t`
/// from `l = t` on. Incomplete (flagged) when `L < T - 1`.
pub fn run_sequential(a: &[Permutation], depth: usize) -> Result<RegisterGrid> {
    check_actions(a)?;
    Ok(perm_rows(Algorithm::Sequential, a, depth, depth + 1 >= a.len(), sequential_step))
}

/// Smallest depth whose windows cover `len` actions.
pub fn associative_depth(len: usize) -> usize {
    let mut l = 0;
    while (1usize << l) < len {
        l += 1;
    }
    l
}

/// Pairwise merging: `h[t][l]` is the product of `a_max(0, t-2^l+1) ..= a_t`.
pub fn run_associative(a: &[Permutation], depth: usize) -> Result<RegisterGrid> {
    check_actions(a)?;
    Ok(perm_rows(Algorithm::Associative, a, depth, depth >= associative_depth(a.len()), associative_step))
}

/// Fixed transposition τ: 132 in S3, 2134.. (first two slots) otherwise.
/// Odd states are mapped into the alternating group by right-multiplying
/// with it.
pub fn complement_transposition(n: usize) -> Permutation {
    if n == 3 {
        Permutation::transposition(3, 1, 2)
    } else {
        Permutation::transposition(n, 0, 1)
    }
}

/// Even representative of `x`'s coset: `x` if even, `x·τ` if odd.
pub fn complement(x: &Permutation) -> Permutation {
    if x.parity().is_odd() {
        mul(x, &complement_transposition(x.degree()))
    } else {
        x.clone()
    }
}

/// Inverse of `(parity, complement)`: `κ·τ^ε`.
pub fn decode(parity: Parity, complement: &Permutation) -> Permutation {
    if parity.is_odd() {
        mul(complement, &complement_transposition(complement.degree()))
    } else {
        complement.clone()
    }
}

/// One layer of the complement register. Merging windows `u` (left) and
/// `v` (right) uses `k(uv) = k(u)·τ^{ε(u)} k(v) τ^{ε(u)}`, where the window
/// parity `ε(u)` is read off the parity registers at its two boundaries.
pub(crate) fn paa_step(prev: &[(Parity, Permutation)], l: usize) -> Vec<(Parity, Permutation)> {
    let half = 1usize << (l - 1);
    let full = 1usize << l;
    let eps = |i: Option<usize>| i.map_or(Parity::Even, |i| prev[i].0);
    (0..prev.len())
        .map(|t| {
            let (e, k) = &prev[t];
            if t < half {
                return (*e, k.clone());
            }
            let left = t - half;
            let left_parity = eps(Some(left)).xor(eps(t.checked_sub(full)));
            let ku = &prev[left].1;
            let kv = if left_parity.is_odd() {
                let tau = complement_transposition(k.degree());
                mul(&mul(&tau, k), &tau)
            } else {
                k.clone()
            };
            (*e, mul(ku, &kv))
        })
        .collect()
}

/// Parity computed for every prefix at once (row 0), complement merged
/// pairwise. The last row decodes to the states when `2^L >= T`.
pub fn run_parity_associative(a: &[Permutation], depth: usize) -> Result<RegisterGrid> {
    check_actions(a)?;
    let eps = state_parities(a)?;
    let mut rows: Vec<Vec<(Parity, Permutation)>> =
        vec![eps.iter().zip(a).map(|(&e, x)| (e, complement(x))).collect()];
    for l in 1..=depth {
        let next = paa_step(&rows[l - 1], l);
        rows.push(next);
    }
    let rows = rows
        .into_iter()
        .map(|r| r.into_iter().map(|(parity, complement)| Register::Paa { parity, complement }).collect())
        .collect();
    Ok(RegisterGrid::from_rows(Algorithm::ParityAssociative, rows, depth >= associative_depth(a.len())))
}

/// Final-state prediction of any of the four schemes at full depth.
pub fn predict_final(alg: Algorithm, a: &[Permutation]) -> Result<Permutation> {
    match alg {
        Algorithm::Sequential => Ok(run_sequential(a, a.len().saturating_sub(1))?.final_prediction()),
        Algorithm::Associative => Ok(run_associative(a, associative_depth(a.len()))?.final_prediction()),
        Algorithm::ParityAssociative => {
            Ok(run_parity_associative(a, associative_depth(a.len()))?.final_prediction())
        }
        Algorithm::Parallel => {
            let (states, _) = run_parallel_s3(a)?;
            Ok(states.last().expect("non-empty").clone())
        }
    }
}
