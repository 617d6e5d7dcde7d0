//! Total-degree multi-index sets and the position map used to vectorize
//! the Galerkin system.
//!
//! Indices are ordered graded-lexicographically: by total degree first, and
//! within one degree lexicographically descending on the entries, so for
//! `L = 3` the degree-one block reads `(1,0,0), (0,1,0), (0,0,1)`.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};

/// A multi-index `(a_1, .., a_L)` of nonnegative polynomial degrees.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MultiIndex(Vec<u32>);

impl MultiIndex {
    pub fn new(entries: Vec<u32>) -> Self {
        MultiIndex(entries)
    }

    pub fn zero(dim: usize) -> Self {
        MultiIndex(vec![0; dim])
    }

    pub fn entries(&self) -> &[u32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn total_degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&a| a == 0)
    }
}

impl From<&[u32]> for MultiIndex {
    fn from(v: &[u32]) -> Self {
        MultiIndex(v.to_vec())
    }
}

impl<const D: usize> From<[u32; D]> for MultiIndex {
    fn from(v: [u32; D]) -> Self {
        MultiIndex(v.to_vec())
    }
}

impl fmt::Debug for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, a) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{a}")?;
        }
        write!(f, ")")
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// The set `{d in N_0^L : |d| <= N}` in graded-lex order.
///
/// Immutable after construction. Two sets compare equal iff `(L, N)` agree.
#[derive(Clone)]
pub struct IndexSet {
    dim: usize,
    max_degree: u32,
    indices: Vec<MultiIndex>,
    positions: HashMap<MultiIndex, usize>,
}

impl PartialEq for IndexSet {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.max_degree == other.max_degree
    }
}

impl Eq for IndexSet {}

impl fmt::Debug for IndexSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IndexSet")
            .field("dim", &self.dim)
            .field("max_degree", &self.max_degree)
            .field("size", &self.indices.len())
            .finish()
    }
}

impl IndexSet {
    pub fn new(dim: usize, max_degree: u32) -> Result<Self> {
        build_index_set(dim, max_degree)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_degree(&self) -> u32 {
        self.max_degree
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    /// `phi(k)`.
    pub fn get(&self, k: usize) -> Option<&MultiIndex> {
        self.indices.get(k)
    }

    /// Inverse of `phi`.
    pub fn position_of(&self, idx: &MultiIndex) -> Result<usize> {
        if idx.dim() != self.dim {
            return Err(Error::config(format!(
                "multi-index {idx} has length {}, expected {}",
                idx.dim(),
                self.dim
            )));
        }
        self.positions.get(idx).copied().ok_or_else(|| {
            Error::config(format!(
                "multi-index {idx} has total degree {} > {}",
                idx.total_degree(),
                self.max_degree
            ))
        })
    }

    pub fn iter(&self) -> std::slice::Iter<'_, MultiIndex> {
        self.indices.iter()
    }
}

/// `binomial(N + L, L)`, the cardinality of a total-degree set.
pub fn total_degree_count(dim: usize, max_degree: u32) -> usize {
    let n = max_degree as u128 + dim as u128;
    let k = dim as u128;
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) / (i + 1);
    }
    acc as usize
}

pub fn build_index_set(dim: usize, max_degree: u32) -> Result<IndexSet> {
    if dim == 0 {
        return Err(Error::config("multi-index dimension L must be at least 1"));
    }
    let mut indices = Vec::with_capacity(total_degree_count(dim, max_degree));
    let mut scratch = vec![0u32; dim];
    for degree in 0..=max_degree {
        push_compositions(degree, 0, &mut scratch, &mut indices);
    }
    let positions = indices
        .iter()
        .enumerate()
        .map(|(k, m)| (m.clone(), k))
        .collect();
    Ok(IndexSet {
        dim,
        max_degree,
        indices,
        positions,
    })
}

// Compositions of `remaining` into scratch[slot..], first entry largest first.
fn push_compositions(remaining: u32, slot: usize, scratch: &mut [u32], out: &mut Vec<MultiIndex>) {
    if slot + 1 == scratch.len() {
        scratch[slot] = remaining;
        out.push(MultiIndex(scratch.to_vec()));
        return;
    }
    for head in (0..=remaining).rev() {
        scratch[slot] = head;
        push_compositions(remaining - head, slot + 1, scratch, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Oracle: every tuple in [0, N]^L with |d| <= N, sorted by degree and then
    // descending lexicographic order.
    fn brute_force(dim: usize, n: u32) -> Vec<Vec<u32>> {
        let mut all = Vec::new();
        let total = (n as usize + 1).pow(dim as u32);
        for code in 0..total {
            let mut c = code;
            let mut v = vec![0u32; dim];
            for e in v.iter_mut() {
                *e = (c % (n as usize + 1)) as u32;
                c /= n as usize + 1;
            }
            if v.iter().sum::<u32>() <= n {
                all.push(v);
            }
        }
        all.sort_by(|a, b| {
            let da: u32 = a.iter().sum();
            let db: u32 = b.iter().sum();
            da.cmp(&db).then_with(|| b.cmp(a))
        });
        all
    }

    #[test]
    fn two_dims_degree_five_has_21_entries() {
        let set = build_index_set(2, 5).unwrap();
        assert_eq!(set.len(), 21);
        assert_eq!(set.len(), (5 + 1) * (5 + 2) / 2);
    }

    #[test]
    fn degree_zero_is_constant_only() {
        let set = build_index_set(2, 0).unwrap();
        assert_eq!(set.indices(), &[MultiIndex::from([0, 0])]);
    }

    #[test]
    fn three_dims_degree_two_order() {
        let set = build_index_set(3, 2).unwrap();
        let got: Vec<Vec<u32>> = set.iter().map(|m| m.entries().to_vec()).collect();
        let expected = vec![
            vec![0, 0, 0],
            vec![1, 0, 0],
            vec![0, 1, 0],
            vec![0, 0, 1],
            vec![2, 0, 0],
            vec![1, 1, 0],
            vec![1, 0, 1],
            vec![0, 2, 0],
            vec![0, 1, 1],
            vec![0, 0, 2],
        ];
        assert_eq!(got, expected);
        assert_eq!(got, brute_force(3, 2));
    }

    #[test]
    fn positions() {
        let set = build_index_set(2, 5).unwrap();
        assert_eq!(set.position_of(&[0, 0].into()).unwrap(), 0);
        assert_eq!(set.position_of(&[1, 0].into()).unwrap(), 1);
        assert_eq!(set.position_of(&[0, 5].into()).unwrap(), 20);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(build_index_set(0, 3), Err(Error::Config(_))));
        let set = build_index_set(2, 2).unwrap();
        assert!(set.position_of(&[2, 1].into()).is_err());
        assert!(set.position_of(&[0, 0, 0].into()).is_err());
    }

    proptest! {
        #[test]
        fn cardinality_and_round_trip(dim in 1usize..=4, n in 0u32..=8) {
            let set = build_index_set(dim, n).unwrap();
            prop_assert_eq!(set.len(), total_degree_count(dim, n));
            for (k, m) in set.iter().enumerate() {
                prop_assert_eq!(set.position_of(m).unwrap(), k);
                prop_assert!(m.total_degree() <= n);
            }
        }

        #[test]
        fn matches_enumeration(dim in 1usize..=3, n in 0u32..=5) {
            let set = build_index_set(dim, n).unwrap();
            let got: Vec<Vec<u32>> = set.iter().map(|m| m.entries().to_vec()).collect();
            prop_assert_eq!(got, brute_force(dim, n));
        }
    }
}
