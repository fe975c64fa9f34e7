//! Per-class FIFO feature memory and class prototypes.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::FeatureVector;

pub const DEFAULT_CAPACITY: usize = 256;
pub const DEFAULT_PER_IMAGE_LIMIT: usize = 8;

/// Mean of the stored features of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototype {
    pub class_id: usize,
    pub vector: FeatureVector,
    /// Number of features averaged.
    pub support: usize,
}

/// Bounded per-class feature queues with oldest-first eviction.
#[derive(Debug, Clone)]
pub struct PrototypeBank {
    dim: usize,
    capacity: usize,
    queues: BTreeMap<usize, VecDeque<FeatureVector>>,
    rng: ChaCha8Rng,
}

/// Serializable snapshot of a bank, including its RNG position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankLayout {
    pub dim: usize,
    pub capacity: usize,
    pub rng_seed: Vec<u8>,
    /// `u128` word position, decimal.
    pub rng_word_pos: String,
    /// `(class_id, queue length)` in class order.
    pub queues: Vec<(usize, usize)>,
}

impl PartialEq for PrototypeBank {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.capacity == other.capacity
            && self.queues == other.queues
            && self.rng.get_word_pos() == other.rng.get_word_pos()
            && self.rng.get_seed() == other.rng.get_seed()
    }
}

impl PrototypeBank {
    pub fn new(dim: usize, capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("bank capacity must be at least 1".into()));
        }
        if dim == 0 {
            return Err(Error::InvalidConfig("bank feature dim must be at least 1".into()));
        }
        Ok(Self {
            dim,
            capacity,
            queues: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn queue(&self, class_id: usize) -> Option<&VecDeque<FeatureVector>> {
        self.queues.get(&class_id)
    }

    pub fn len(&self, class_id: usize) -> usize {
        self.queues.get(&class_id).map_or(0, VecDeque::len)
    }

    pub fn is_empty(&self) -> bool {
        self.queues.values().all(VecDeque::is_empty)
    }

    /// Sample `min(per_image_limit, features.len())` vectors uniformly without
    /// replacement, append them in source order, and evict the oldest entries
    /// beyond capacity.
    pub fn push_features<F: AsRef<[f64]>>(
        &mut self,
        class_id: usize,
        features: &[F],
        per_image_limit: usize,
    ) -> Result<()> {
        if per_image_limit == 0 {
            return Err(Error::InvalidConfig("per_image_limit must be at least 1".into()));
        }
        for f in features {
            if f.as_ref().len() != self.dim {
                return Err(Error::DimMismatch {
                    expected: self.dim,
                    actual: f.as_ref().len(),
                });
            }
        }
        if features.is_empty() {
            return Ok(());
        }
        let take = per_image_limit.min(features.len());
        let mut chosen = index::sample(&mut self.rng, features.len(), take).into_vec();
        chosen.sort_unstable();
        let queue = self.queues.entry(class_id).or_default();
        for i in chosen {
            queue.push_back(FeatureVector::from(features[i].as_ref()));
            if queue.len() > self.capacity {
                queue.pop_front();
            }
        }
        Ok(())
    }

    /// Elementwise mean of the class queue, or `None` when it is empty.
    pub fn prototype(&self, class_id: usize) -> Option<ClassPrototype> {
        let queue = self.queues.get(&class_id).filter(|q| !q.is_empty())?;
        let mut mean = vec![0.0; self.dim];
        for f in queue {
            for (m, &v) in mean.iter_mut().zip(f.iter()) {
                *m += v;
            }
        }
        let n = queue.len() as f64;
        for m in &mut mean {
            *m /= n;
        }
        Some(ClassPrototype {
            class_id,
            vector: mean.into(),
            support: queue.len(),
        })
    }

    pub fn all_prototypes(&self) -> BTreeMap<usize, ClassPrototype> {
        self.queues
            .keys()
            .filter_map(|&c| self.prototype(c).map(|p| (c, p)))
            .collect()
    }

    pub fn layout(&self) -> BankLayout {
        BankLayout {
            dim: self.dim,
            capacity: self.capacity,
            rng_seed: self.rng.get_seed().to_vec(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            queues: self.queues.iter().map(|(&c, q)| (c, q.len())).collect(),
        }
    }

    /// All stored values, class by class, oldest first.
    pub fn flat_contents(&self) -> Vec<f64> {
        self.queues
            .values()
            .flat_map(|q| q.iter().flat_map(|f| f.iter().copied()))
            .collect()
    }

    /// Rebuild a bank from [`layout`](Self::layout) and
    /// [`flat_contents`](Self::flat_contents).
    pub fn from_parts(layout: &BankLayout, contents: &[f64]) -> Result<Self> {
        let seed: [u8; 32] = layout
            .rng_seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::InvalidConfig("bank rng seed must be 32 bytes".into()))?;
        let word_pos: u128 = layout
            .rng_word_pos
            .parse()
            .map_err(|_| Error::InvalidConfig("bank rng word position".into()))?;
        let total: usize = layout.queues.iter().map(|&(_, n)| n * layout.dim).sum();
        if total != contents.len() {
            return Err(Error::DimMismatch {
                expected: total,
                actual: contents.len(),
            });
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(word_pos);
        let mut queues = BTreeMap::new();
        let mut chunks = contents.chunks_exact(layout.dim.max(1));
        for &(class, n) in &layout.queues {
            if n > layout.capacity {
                return Err(Error::InvalidConfig(format!("class {class} queue exceeds capacity")));
            }
            let q: VecDeque<FeatureVector> = chunks.by_ref().take(n).map(FeatureVector::from).collect();
            queues.insert(class, q);
        }
        let mut bank = Self::new(layout.dim, layout.capacity, 0)?;
        bank.queues = queues;
        bank.rng = rng;
        Ok(bank)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifo_eviction() {
        let mut bank = PrototypeBank::new(1, 2, 0).unwrap();
        for v in [1.0, 2.0, 3.0] {
            bank.push_features(0, &[[v]], 8).unwrap();
        }
        let q: Vec<f64> = bank.queue(0).unwrap().iter().map(|f| f[0]).collect();
        assert_eq!(q, vec![2.0, 3.0]);
    }

    #[test]
    fn per_image_limit_bounds_entries() {
        let mut bank = PrototypeBank::new(2, 256, 1).unwrap();
        let feats: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64, 0.0]).collect();
        bank.push_features(3, &feats, 10).unwrap();
        assert_eq!(bank.len(3), 10);
    }

    #[test]
    fn prototype_mean_and_absent() {
        let mut bank = PrototypeBank::new(2, 8, 0).unwrap();
        assert!(bank.prototype(0).is_none());
        assert!(bank.all_prototypes().is_empty());
        bank.push_features(0, &[vec![1.0, 3.0], vec![3.0, 1.0]], 8).unwrap();
        let p = bank.prototype(0).unwrap();
        assert_eq!(&*p.vector, &[2.0, 2.0]);
        assert_eq!(p.support, 2);
        assert_eq!(bank.all_prototypes().len(), 1);
    }

    #[test]
    fn dim_mismatch_rejected() {
        let mut bank = PrototypeBank::new(2, 8, 0).unwrap();
        assert!(matches!(
            bank.push_features(0, &[vec![1.0]], 8),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn layout_round_trip_preserves_rng() {
        let mut bank = PrototypeBank::new(3, 4, 9).unwrap();
        let feats: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64; 3]).collect();
        bank.push_features(1, &feats, 3).unwrap();
        bank.push_features(4, &feats, 2).unwrap();
        let mut restored = PrototypeBank::from_parts(&bank.layout(), &bank.flat_contents()).unwrap();
        assert_eq!(restored, bank);
        bank.push_features(1, &feats, 3).unwrap();
        restored.push_features(1, &feats, 3).unwrap();
        assert_eq!(restored, bank);
    }
}
