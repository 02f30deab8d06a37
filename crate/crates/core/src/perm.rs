//! Symmetric-group algebra over one-line destination arrays.
//!
//! A [`Permutation`] stores, for every slot `i`, the slot that the object
//! currently sitting in `i` moves to. Internally slots are 0-based; the
//! display form is the 1-based digit string used as the token surface form
//! (`"42315"` moves the first object to the fourth slot).
//!
//! Composition is written left to right: `compose(a, b)` applies `a` first
//! and then `b`, so a word `a_0 a_1 ... a_t` is folded from the left.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest degree `enumerate_group` accepts (8! = 40320 elements).
pub const MAX_ENUMERATE_DEGREE: usize = 8;

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Permutation {
    dest: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Parity {
    Even = 0,
    Odd = 1,
}

impl Parity {
    pub fn from_bit(bit: u8) -> Self {
        if bit & 1 == 0 {
            Parity::Even
        } else {
            Parity::Odd
        }
    }

    pub fn bit(self) -> u8 {
        self as u8
    }

    pub fn xor(self, other: Parity) -> Parity {
        Parity::from_bit(self.bit() ^ other.bit())
    }

    pub fn is_odd(self) -> bool {
        self == Parity::Odd
    }
}

impl fmt::Display for Parity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bit())
    }
}

impl Permutation {
    /// Builds a permutation from a 0-based destination array, checking that
    /// it is a bijection.
    pub fn from_dest(dest: Vec<u8>) -> Result<Self> {
        let n = dest.len();
        if n == 0 || n > u8::MAX as usize {
            return Err(Error::InvalidPermutation(format!("degree {n} out of range")));
        }
        let mut seen = vec![false; n];
        for &d in &dest {
            let d = d as usize;
            if d >= n || seen[d] {
                return Err(Error::InvalidPermutation(format!("{dest:?} is not a bijection")));
            }
            seen[d] = true;
        }
        Ok(Self { dest })
    }

    pub fn identity(n: usize) -> Self {
        assert!(n >= 1 && n <= u8::MAX as usize, "degree {n} out of range");
        Self { dest: (0..n as u8).collect() }
    }

    /// Swaps slots `i` and `j` (0-based).
    pub fn transposition(n: usize, i: usize, j: usize) -> Self {
        let mut p = Self::identity(n);
        p.dest.swap(i, j);
        p
    }

    pub fn degree(&self) -> usize {
        self.dest.len()
    }

    pub fn dest(&self) -> &[u8] {
        &self.dest
    }

    /// Destination slot of the object in slot `i`.
    pub fn apply(&self, i: usize) -> usize {
        self.dest[i] as usize
    }

    pub fn is_identity(&self) -> bool {
        self.dest.iter().enumerate().all(|(i, &d)| i == d as usize)
    }

    /// Apply `self`, then `then`.
    pub fn then(&self, then: &Permutation) -> Result<Permutation> {
        compose(self, then)
    }

    pub fn inverse(&self) -> Permutation {
        inverse(self)
    }

    pub fn parity(&self) -> Parity {
        parity(self)
    }

    /// Number of cycles in the disjoint-cycle decomposition, fixed points
    /// included.
    pub fn cycle_count(&self) -> usize {
        let n = self.dest.len();
        let mut seen = vec![false; n];
        let mut cycles = 0;
        for start in 0..n {
            if seen[start] {
                continue;
            }
            cycles += 1;
            let mut i = start;
            while !seen[i] {
                seen[i] = true;
                i = self.dest[i] as usize;
            }
        }
        cycles
    }

    /// Lexicographic rank of the display string among all `n!` elements.
    pub fn rank(&self) -> usize {
        let n = self.dest.len();
        let mut rank = 0;
        for i in 0..n {
            let smaller_after = self.dest[i + 1..].iter().filter(|&&d| d < self.dest[i]).count();
            rank = rank * (n - i) + smaller_after;
        }
        rank
    }

    /// Display form (1-based digits). Degrees above 9 use dot-separated
    /// numbers.
    pub fn to_token(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.dest.len() <= 9 {
            for &d in &self.dest {
                write!(f, "{}", d + 1)?;
            }
            Ok(())
        } else {
            let parts: Vec<String> = self.dest.iter().map(|d| (d + 1).to_string()).collect();
            write!(f, "{}", parts.join("."))
        }
    }
}

impl fmt::Debug for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Permutation({self})")
    }
}

impl FromStr for Permutation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidPermutation(format!("cannot parse {s:?}"));
        let digits: Vec<u8> = if s.contains('.') {
            s.split('.')
                .map(|p| p.parse::<u8>().ok().and_then(|d| d.checked_sub(1)))
                .collect::<Option<_>>()
                .ok_or_else(bad)?
        } else {
            s.chars()
                .map(|c| c.to_digit(10).and_then(|d| (d as u8).checked_sub(1)))
                .collect::<Option<_>>()
                .ok_or_else(bad)?
        };
        Permutation::from_dest(digits)
    }
}

impl Serialize for Permutation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Permutation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `a` then `b`: `result[i] = b[a[i]]`.
pub fn compose(a: &Permutation, b: &Permutation) -> Result<Permutation> {
    if a.degree() != b.degree() {
        return Err(Error::DegreeMismatch(a.degree(), b.degree()));
    }
    Ok(compose_unchecked(a, b))
}

pub(crate) fn compose_unchecked(a: &Permutation, b: &Permutation) -> Permutation {
    Permutation { dest: a.dest.iter().map(|&i| b.dest[i as usize]).collect() }
}

pub fn inverse(p: &Permutation) -> Permutation {
    let mut dest = vec![0u8; p.degree()];
    for (i, &d) in p.dest.iter().enumerate() {
        dest[d as usize] = i as u8;
    }
    Permutation { dest }
}

/// `(n - cycles) mod 2`.
pub fn parity(p: &Permutation) -> Parity {
    Parity::from_bit(((p.degree() - p.cycle_count()) % 2) as u8)
}

fn check_uniform_degree(actions: &[Permutation]) -> Result<usize> {
    let n = actions
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty action sequence".into()))?
        .degree();
    if let Some(bad) = actions.iter().find(|a| a.degree() != n) {
        return Err(Error::DegreeMismatch(n, bad.degree()));
    }
    Ok(n)
}

/// Prefix products `s_t = a_0 a_1 ... a_t`.
pub fn cumulative_states(actions: &[Permutation]) -> Result<Vec<Permutation>> {
    check_uniform_degree(actions)?;
    let mut states = Vec::with_capacity(actions.len());
    let mut acc = actions[0].clone();
    states.push(acc.clone());
    for a in &actions[1..] {
        acc = compose_unchecked(&acc, a);
        states.push(acc.clone());
    }
    Ok(states)
}

/// Running parity of the prefix products, computed from action parities
/// alone.
pub fn state_parities(actions: &[Permutation]) -> Result<Vec<Parity>> {
    check_uniform_degree(actions)?;
    let mut acc = Parity::Even;
    Ok(actions
        .iter()
        .map(|a| {
            acc = acc.xor(a.parity());
            acc
        })
        .collect())
}

/// Places `labels[i]` at slot `s[i]`.
pub fn apply_to_labels(s: &Permutation, labels: &str) -> Result<String> {
    let chars: Vec<char> = labels.chars().collect();
    if chars.len() != s.degree() {
        return Err(Error::LengthMismatch { expected: s.degree(), got: chars.len() });
    }
    let mut out = vec![' '; chars.len()];
    for (i, c) in chars.into_iter().enumerate() {
        out[s.apply(i)] = c;
    }
    Ok(out.into_iter().collect())
}

/// All `n!` elements in lexicographic order of their display strings.
pub fn enumerate_group(n: usize) -> Result<Vec<Permutation>> {
    if n == 0 {
        return Err(Error::InvalidArgument("degree must be at least 1".into()));
    }
    if n > MAX_ENUMERATE_DEGREE {
        return Err(Error::DegreeTooLarge(n));
    }
    let mut current: Vec<u8> = (0..n as u8).collect();
    let mut out = vec![Permutation { dest: current.clone() }];
    while next_lexicographic(&mut current) {
        out.push(Permutation { dest: current.clone() });
    }
    Ok(out)
}

fn next_lexicographic(v: &mut [u8]) -> bool {
    let n = v.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// Uniform sample from `S_n` via Fisher-Yates.
pub fn random_permutation<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Permutation {
    let mut dest: Vec<u8> = (0..n as u8).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        dest.swap(i, j);
    }
    Permutation { dest }
}

pub fn factorial(n: usize) -> usize {
    (1..=n).product()
}
