//! Constant-depth S3 word problem via a generator presentation.
//!
//! With the reflection `a` = (23) (token 132) and the rotation `b` = (123)
//! (token 231), conjugating a rotation by a reflection inverts it:
//! `a·b = b⁻¹·a`. Every element has a unique normal form `b^c a^p`, and
//! appending `b^ci a^pi` to `b^c a^p` gives
//! `c' = c + (-1)^p · ci (mod 3)`, `p' = p + pi (mod 2)`.
//! So a prefix state needs only the prefix parity of reflections and a
//! signed count of rotations, both prefix sums.

use serde::{Deserialize, Serialize};

use super::check_actions;
use crate::error::{Error, Result};
use crate::perm::{compose, enumerate_group, Permutation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParallelS3State {
    pub transposition_parity: u8,
    /// Signed count of 3-cycles, mod 3.
    pub cycle_count: u8,
}

impl ParallelS3State {
    pub fn to_perm(self) -> Permutation {
        let (a, b) = s3_generators();
        let mut s = Permutation::identity(3);
        for _ in 0..self.cycle_count {
            s = compose(&s, &b).expect("degree 3");
        }
        if self.transposition_parity == 1 {
            s = compose(&s, &a).expect("degree 3");
        }
        s
    }
}

/// `(a, b)` = (reflection 132, rotation 231).
pub fn s3_generators() -> (Permutation, Permutation) {
    (Permutation::from_dest(vec![0, 2, 1]).expect("valid"), Permutation::from_dest(vec![1, 2, 0]).expect("valid"))
}

/// Normal form `(p, c)` of every element, indexed by rank.
fn normal_forms() -> Vec<ParallelS3State> {
    let group = enumerate_group(3).expect("S3");
    let mut table = vec![None; group.len()];
    for c in 0..3u8 {
        for p in 0..2u8 {
            let st = ParallelS3State { transposition_parity: p, cycle_count: c };
            table[st.to_perm().rank()] = Some(st);
        }
    }
    table.into_iter().map(|s| s.expect("b^c a^p covers S3")).collect()
}

/// All prefix states of an S3 word problem from prefix parities and signed
/// rotation counts. Each prefix is an independent sum, so nothing here
/// depends on the previous state.
pub fn run_parallel_s3(a: &[Permutation]) -> Result<(Vec<Permutation>, Vec<ParallelS3State>)> {
    if check_actions(a)? != 3 {
        return Err(Error::InvalidArgument(format!("parallel S3 needs degree 3, got {}", a[0].degree())));
    }
    let forms = normal_forms();
    let local: Vec<ParallelS3State> = a.iter().map(|x| forms[x.rank()]).collect();
    // prefix parity before each action decides the sign of its rotations
    let mut parity_before = Vec::with_capacity(a.len());
    let mut p = 0u8;
    for f in &local {
        parity_before.push(p);
        p ^= f.transposition_parity;
    }
    let signed: Vec<u8> = local
        .iter()
        .zip(&parity_before)
        .map(|(f, &pb)| if pb == 0 { f.cycle_count } else { (3 - f.cycle_count) % 3 })
        .collect();
    let mut registers = Vec::with_capacity(a.len());
    let mut c = 0u8;
    for (t, f) in local.iter().enumerate() {
        c = (c + signed[t]) % 3;
        registers.push(ParallelS3State { transposition_parity: parity_before[t] ^ f.transposition_parity, cycle_count: c });
    }
    let states = registers.iter().map(|r| r.to_perm()).collect();
    Ok((states, registers))
}
