//! Exact Kendall-Tau distance between equal-length rank lists.
//!
//! The distance between two rankings is the number of item pairs whose
//! relative order disagrees, equivalently the number of adjacent swaps
//! needed to turn one list into the other. [`distance`] counts inversions
//! in O(n log n) with a merge sort; [`distance_oracle`] is the quadratic
//! pair-enumeration reference used to cross-check it in tests.
//!
//! All counting is done on integers. Division down to the normalized
//! `[0, 1]` range happens only in [`normalize`], at the API boundary.

use std::fmt;

/// Raw Kendall-Tau distance: a discordant-pair count in `0..=n(n-1)/2`.
pub type RawDistance = u64;

/// Number of unordered item pairs in a list of `n` items, `n(n-1)/2`.
pub fn max_pairs(n: usize) -> u64 {
    let n = n as u64;
    n * (n - 1) / 2
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// The two lists have different lengths.
    LengthMismatch { left: usize, right: usize },
    /// A list is too short to rank anything (fewer than 2 items).
    TooShort { len: usize },
    /// The items are not a permutation of `0..n`; carries the first
    /// out-of-range or repeated value encountered.
    NotAPermutation { value: u32 },
    /// A raw distance exceeds the pair count for the given list length.
    DistanceOutOfRange { distance: u64, max: u64 },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::LengthMismatch { left, right } => {
                write!(f, "list length mismatch: {left} != {right}")
            }
            Error::TooShort { len } => {
                write!(f, "rank list needs at least 2 items, got {len}")
            }
            Error::NotAPermutation { value } => {
                write!(f, "items are not a permutation of 0..n (offending value {value})")
            }
            Error::DistanceOutOfRange { distance, max } => {
                write!(f, "raw distance {distance} exceeds pair count {max}")
            }
        }
    }
}

impl std::error::Error for Error {}

/// A permutation of `{0, 1, ..., n-1}` representing one ranked list.
///
/// Position in the list is the rank (position 0 = most preferred); the
/// value is the item index. External item vocabularies are mapped onto
/// dense indices before a `RankList` is built.
// A valid list holds at least 2 items, so there is no is_empty().
#[allow(clippy::len_without_is_empty)]
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct RankList {
    items: Vec<u32>,
}

impl RankList {
    /// Validates that `items` is a permutation of `0..items.len()` with at
    /// least 2 entries.
    pub fn new(items: Vec<u32>) -> Result<Self, Error> {
        let n = items.len();
        if n < 2 {
            return Err(Error::TooShort { len: n });
        }
        let mut seen = vec![false; n];
        for &v in &items {
            if (v as usize) >= n || seen[v as usize] {
                return Err(Error::NotAPermutation { value: v });
            }
            seen[v as usize] = true;
        }
        Ok(RankList { items })
    }

    /// The identity ranking `[0, 1, ..., n-1]`.
    pub fn identity(n: usize) -> Result<Self, Error> {
        Self::new((0..n as u32).collect())
    }

    pub fn items(&self) -> &[u32] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    /// `n(n-1)/2`, the maximum raw distance to any other list of the same length.
    pub fn max_pairs(&self) -> u64 {
        max_pairs(self.items.len())
    }

    /// The same items in reverse order; at maximal distance from `self`.
    pub fn reversed(&self) -> RankList {
        let mut items = self.items.clone();
        items.reverse();
        RankList { items }
    }

    /// `positions[item] = rank of item`, the inverse permutation.
    fn positions(&self) -> Vec<u32> {
        let mut pos = vec![0u32; self.items.len()];
        for (rank, &item) in self.items.iter().enumerate() {
            pos[item as usize] = rank as u32;
        }
        pos
    }
}

impl fmt::Debug for RankList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RankList({:?})", self.items)
    }
}

/// Kendall-Tau distance in O(n log n): relabel `b` through `a`'s inverse
/// permutation, then count inversions of the relabeled sequence with a
/// bottom-up merge sort.
pub fn distance(a: &RankList, b: &RankList) -> Result<RawDistance, Error> {
    check_lengths(a, b)?;
    Ok(distance_unchecked(a, b))
}

/// Same as [`distance`] but assumes equal lengths; the tree validates
/// lengths once at its boundary and then calls this in the hot path.
pub(crate) fn distance_unchecked(a: &RankList, b: &RankList) -> RawDistance {
    debug_assert_eq!(a.len(), b.len());
    let pos_in_a = a.positions();
    let relabeled: Vec<u32> = b.items.iter().map(|&it| pos_in_a[it as usize]).collect();
    count_inversions(relabeled)
}

/// Quadratic reference: enumerate all pairs and count order disagreements.
///
/// Kept deliberately independent of the merge-sort path; used by tests and
/// the linear-scan oracles.
pub fn distance_oracle(a: &RankList, b: &RankList) -> Result<RawDistance, Error> {
    check_lengths(a, b)?;
    let pa = a.positions();
    let pb = b.positions();
    let n = a.len();
    let mut discordant: u64 = 0;
    for x in 0..n {
        for y in (x + 1)..n {
            let in_a = pa[x] < pa[y];
            let in_b = pb[x] < pb[y];
            if in_a != in_b {
                discordant += 1;
            }
        }
    }
    Ok(discordant)
}

/// Every item pair `(x, y)` with `x < y` whose relative order disagrees
/// between `a` and `b`. `distance_oracle` is the length of this list.
pub fn discordant_pairs(a: &RankList, b: &RankList) -> Result<Vec<(u32, u32)>, Error> {
    check_lengths(a, b)?;
    let pa = a.positions();
    let pb = b.positions();
    let n = a.len();
    let mut pairs = Vec::new();
    for x in 0..n {
        for y in (x + 1)..n {
            if (pa[x] < pa[y]) != (pb[x] < pb[y]) {
                pairs.push((x as u32, y as u32));
            }
        }
    }
    Ok(pairs)
}

/// Raw discordant count scaled by `n(n-1)/2` into `[0, 1]`.
pub fn normalize(distance: RawDistance, n: usize) -> Result<f64, Error> {
    if n < 2 {
        return Err(Error::TooShort { len: n });
    }
    let max = max_pairs(n);
    if distance > max {
        return Err(Error::DistanceOutOfRange { distance, max });
    }
    Ok(distance as f64 / max as f64)
}

fn check_lengths(a: &RankList, b: &RankList) -> Result<(), Error> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

/// Bottom-up merge sort counting the inversions it removes.
fn count_inversions(mut cur: Vec<u32>) -> u64 {
    let n = cur.len();
    let mut buf = vec![0u32; n];
    let mut inversions: u64 = 0;
    let mut width = 1usize;
    while width < n {
        let mut start = 0usize;
        while start < n {
            let mid = (start + width).min(n);
            let end = (start + 2 * width).min(n);
            let (mut i, mut j, mut k) = (start, mid, start);
            while i < mid || j < end {
                if j >= end || (i < mid && cur[i] <= cur[j]) {
                    buf[k] = cur[i];
                    i += 1;
                } else {
                    buf[k] = cur[j];
                    j += 1;
                    inversions += (mid - i) as u64;
                }
                k += 1;
            }
            start = end;
        }
        std::mem::swap(&mut cur, &mut buf);
        width *= 2;
    }
    inversions
}
