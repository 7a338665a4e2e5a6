//! Corruption patterns and their arm indices.
//!
//! A pattern is a `C`-subset of the clients `{1..M}` (1-based labels). Arms are
//! numbered by the lexicographic rank of the sorted subset, so for `M = 7`,
//! `C = 2` arm 0 is `{1,2}`, arm 5 is `{1,7}` and arm 20 is `{6,7}`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Exact binomial coefficient `n choose k`.
///
/// Returns `None` on `u64` overflow.
pub fn binomial(n: u64, k: u64) -> Option<u64> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1) stays integral at every step.
        acc = acc * u128::from(n - i) / u128::from(i + 1);
        if acc > u128::from(u64::MAX) {
            return None;
        }
    }
    Some(acc as u64)
}

/// Number of arms for `clients` clients and a corruption budget `budget`.
pub fn count_patterns(clients: usize, budget: usize) -> Result<usize> {
    if budget > clients {
        return Err(invalid(format!(
            "corruption budget {budget} exceeds client count {clients}"
        )));
    }
    binomial(clients as u64, budget as u64)
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| invalid(format!("C({clients},{budget}) overflows")))
}

/// A sorted set of corrupted clients, 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct CorruptionPattern(Vec<usize>);

impl CorruptionPattern {
    /// Builds a pattern from client labels, which must be strictly increasing
    /// and at least 1. The upper bound is checked against `M` by the ranking
    /// functions.
    pub fn new(clients: Vec<usize>) -> Result<Self> {
        if clients.first() == Some(&0) {
            return Err(invalid("client labels are 1-based"));
        }
        if clients.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid(format!(
                "pattern {clients:?} is not strictly increasing"
            )));
        }
        Ok(Self(clients))
    }

    pub fn clients(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, client: usize) -> bool {
        self.0.binary_search(&client).is_ok()
    }

    /// Zero-based client positions, for indexing embedding vectors.
    pub fn zero_based(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().map(|c| c - 1)
    }

    fn check_bound(&self, clients: usize) -> Result<()> {
        match self.0.last() {
            Some(&last) if last > clients => Err(invalid(format!(
                "client {last} out of range for M = {clients}"
            ))),
            _ => Ok(()),
        }
    }
}

impl TryFrom<Vec<usize>> for CorruptionPattern {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<CorruptionPattern> for Vec<usize> {
    fn from(p: CorruptionPattern) -> Self {
        p.0
    }
}

impl fmt::Display for CorruptionPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{c}")?;
        }
        f.write_str("}")
    }
}

impl FromStr for CorruptionPattern {
    type Err = Error;

    /// Parses `{a1,a2,...}`; whitespace is ignored and the braces are optional.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let inner = t
            .strip_prefix('{')
            .and_then(|r| r.strip_suffix('}'))
            .unwrap_or(t)
            .trim();
        if inner.is_empty() {
            return Self::new(Vec::new());
        }
        let clients = inner
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Parse(format!("pattern {s:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(clients)
    }
}

/// Lexicographic rank of `pattern` among all `C`-subsets of `{1..M}`.
pub fn pattern_to_index(pattern: &CorruptionPattern, clients: usize) -> Result<usize> {
    pattern.check_bound(clients)?;
    let budget = pattern.len();
    count_patterns(clients, budget)?;
    let mut rank = 0usize;
    let mut prev = 0usize;
    for (i, &c) in pattern.clients().iter().enumerate() {
        let remaining = budget - i - 1;
        // Every subset whose i-th element is j (prev < j < c) sorts earlier.
        for j in prev + 1..c {
            rank += count_patterns(clients - j, remaining)?;
        }
        prev = c;
    }
    Ok(rank)
}

/// Inverse of [`pattern_to_index`].
pub fn index_to_pattern(index: usize, clients: usize, budget: usize) -> Result<CorruptionPattern> {
    let total = count_patterns(clients, budget)?;
    if index >= total {
        return Err(invalid(format!(
            "arm index {index} out of range for C({clients},{budget}) = {total}"
        )));
    }
    let mut rest = index;
    let mut out = Vec::with_capacity(budget);
    let mut next = 1usize;
    for i in 0..budget {
        let remaining = budget - i - 1;
        loop {
            let block = count_patterns(clients - next, remaining)?;
            if rest < block {
                break;
            }
            rest -= block;
            next += 1;
        }
        out.push(next);
        next += 1;
    }
    Ok(CorruptionPattern(out))
}

/// All patterns in arm order.
pub fn all_patterns(clients: usize, budget: usize) -> Result<Vec<CorruptionPattern>> {
    let n = count_patterns(clients, budget)?;
    (0..n).map(|k| index_to_pattern(k, clients, budget)).collect()
}
