use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Sorted, duplicate-free absolute sequence indices of the tokens that are
/// active in a layer.
///
/// Indices are always absolute (relative to the start of the full sequence),
/// because cached keys carry rotary embeddings computed at those positions.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct PositionSet(Vec<usize>);

impl PositionSet {
    /// Builds a set from strictly increasing indices.
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if let Some(w) = indices.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::contract(format!(
                "position set must be strictly increasing, found {} before {}",
                w[0], w[1]
            )));
        }
        Ok(Self(indices))
    }

    /// Builds a set from arbitrary indices by sorting; duplicates are an error.
    pub fn from_unsorted(mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        Self::new(indices)
    }

    /// The half-open range `start..end`.
    pub fn range(start: usize, end: usize) -> Self {
        Self((start..end).collect())
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.0.binary_search(&pos).is_ok()
    }

    /// Index of `pos` within the set, if present.
    pub fn rank_of(&self, pos: usize) -> Option<usize> {
        self.0.binary_search(&pos).ok()
    }

    pub fn max(&self) -> Option<usize> {
        self.0.last().copied()
    }

    pub fn is_subset_of(&self, other: &PositionSet) -> bool {
        self.iter().all(|p| other.contains(p))
    }
}

impl TryFrom<Vec<usize>> for PositionSet {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<PositionSet> for Vec<usize> {
    fn from(s: PositionSet) -> Self {
        s.0
    }
}
