//! Rank-statistics similarity between feature vectors.
//!
//! Two vectors are compared by the overlap of the index sets of their `k`
//! largest components. Only the ordering of components matters, so the
//! measure is unchanged by any strictly increasing elementwise transform.

use crate::error::{Error, Result};

/// Default `k` for top-k rank statistics.
pub const DEFAULT_K: usize = 5;

/// Indices of the `k` largest components of a vector, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TopKIndexSet {
    indices: Vec<usize>,
}

impl TopKIndexSet {
    pub fn k(&self) -> usize {
        self.indices.len()
    }

    /// Ascending indices.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    /// Number of indices shared with `other`.
    pub fn overlap(&self, other: &TopKIndexSet) -> usize {
        // both sorted: merge walk
        let (a, b) = (&self.indices, &other.indices);
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    /// Binary embedding of length `dim` with ones at the top-k indices.
    pub fn to_binary(&self, dim: usize) -> Vec<bool> {
        let mut bits = vec![false; dim];
        for &i in &self.indices {
            bits[i] = true;
        }
        bits
    }
}

fn check_k(k: usize, dim: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::ZeroK);
    }
    if k > dim {
        return Err(Error::KExceedsDim { k, dim });
    }
    Ok(())
}

/// Indices of the `k` largest values of `z` (raw signed value, not absolute).
/// Ties are broken toward the lower index.
pub fn top_k_indices(z: &[f64], k: usize) -> Result<TopKIndexSet> {
    check_k(k, z.len())?;
    Ok(top_k_unchecked(z, k))
}

pub(crate) fn top_k_unchecked(z: &[f64], k: usize) -> TopKIndexSet {
    let mut order: Vec<usize> = (0..z.len()).collect();
    // total_cmp gives a deterministic order; stable sort keeps lower index first on ties
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]));
    order.truncate(k);
    order.sort_unstable();
    TopKIndexSet { indices: order }
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

/// `|top_k(z) ∩ top_k(prototype)| / k`.
pub fn rank_overlap_weight(z: &[f64], prototype: &[f64], k: usize) -> Result<f64> {
    check_pair(z, prototype)?;
    check_k(k, z.len())?;
    let s = top_k_unchecked(z, k).overlap(&top_k_unchecked(prototype, k));
    Ok(s as f64 / k as f64)
}

/// Hamming distance between the binary top-k embeddings of `a` and `b`.
/// Always even and equal to `2 * (k - overlap)`.
pub fn hamming_topk(a: &[f64], b: &[f64], k: usize) -> Result<usize> {
    check_pair(a, b)?;
    check_k(k, a.len())?;
    let ba = top_k_unchecked(a, k).to_binary(a.len());
    let bb = top_k_unchecked(b, k).to_binary(b.len());
    Ok(ba.iter().zip(&bb).filter(|(x, y)| x != y).count())
}

/// `dot(a, b) / (|a| |b|)`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Similarity measure used to weight pseudo-labels against prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    /// Top-k overlap `s / k`.
    Rank,
    /// Cosine similarity clamped to `[0, 1]`.
    Cosine,
}

impl Similarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Similarity::Rank => "rank",
            Similarity::Cosine => "cosine",
        }
    }
}

impl std::str::FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "rank" => Ok(Similarity::Rank),
            "cosine" => Ok(Similarity::Cosine),
            other => Err(Error::InvalidConfig(format!(
                "similarity must be 'rank' or 'cosine', got '{other}'"
            ))),
        }
    }
}

impl std::fmt::Display for Similarity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}
