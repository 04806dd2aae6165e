use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ImageSample, Label};
use crate::error::{Error, Result};

/// Indices into the sample list: `live.len() == spoof.len() == batch_size / 2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPair {
    pub live: Vec<usize>,
    pub spoof: Vec<usize>,
}

/// Shuffled cycle over one class; reshuffles only once every member has been drawn.
#[derive(Debug, Clone)]
struct ClassCycle {
    members: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl ClassCycle {
    fn new(members: Vec<usize>, seed: u64) -> Self {
        Self {
            order: Vec::new(),
            pos: 0,
            members,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order = self.members.clone();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Endless 1:1 live/spoof sampler. One epoch is one pass over the smaller class.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    live: ClassCycle,
    spoof: ClassCycle,
    half: usize,
    per_epoch: usize,
}

impl BalancedSampler {
    pub fn new(labels: &[Label], batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < 2 || !batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!("batch size {batch_size} must be even and >= 2")));
        }
        let half = batch_size / 2;
        let pick = |l: Label| -> Vec<usize> {
            labels
                .iter()
                .enumerate()
                .filter(|(_, &x)| x == l)
                .map(|(i, _)| i)
                .collect()
        };
        let (live, spoof) = (pick(Label::Live), pick(Label::Spoof));
        if live.len() < half || spoof.len() < half {
            return Err(Error::Config(format!(
                "balanced batches of {batch_size} need {half} samples per class, have {} live / {} spoof",
                live.len(),
                spoof.len()
            )));
        }
        let per_epoch = live.len().min(spoof.len()) / half;
        Ok(Self {
            live: ClassCycle::new(live, seed.wrapping_mul(2).wrapping_add(1)),
            spoof: ClassCycle::new(spoof, seed.wrapping_mul(2).wrapping_add(2)),
            half,
            per_epoch,
        })
    }

    pub fn from_samples(samples: &[ImageSample], batch_size: usize, seed: u64) -> Result<Self> {
        let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
        Self::new(&labels, batch_size, seed)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.per_epoch
    }

    pub fn next_batch(&mut self) -> BatchPair {
        BatchPair {
            live: (0..self.half).map(|_| self.live.next()).collect(),
            spoof: (0..self.half).map(|_| self.spoof.next()).collect(),
        }
    }

    pub fn epoch(&mut self) -> Vec<BatchPair> {
        (0..self.per_epoch).map(|_| self.next_batch()).collect()
    }
}

/// One epoch of class-balanced batches.
pub fn balanced_batches(samples: &[ImageSample], batch_size: usize, seed: u64) -> Result<Vec<BatchPair>> {
    Ok(BalancedSampler::from_samples(samples, batch_size, seed)?.epoch())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn labels(live: usize, spoof: usize) -> Vec<Label> {
        let mut v = vec![Label::Live; live];
        v.extend(std::iter::repeat_n(Label::Spoof, spoof));
        v
    }

    #[test]
    fn unbalanced_pool_still_yields_balanced_batches() {
        let l = labels(10, 30);
        let mut s = BalancedSampler::new(&l, 4, 1).unwrap();
        let epoch = s.epoch();
        assert_eq!(epoch.len(), 5);
        for b in &epoch {
            assert_eq!(b.live.len(), 2);
            assert_eq!(b.spoof.len(), 2);
            assert!(b.live.iter().all(|&i| l[i] == Label::Live));
            assert!(b.spoof.iter().all(|&i| l[i] == Label::Spoof));
        }
    }

    #[test]
    fn epoch_count_and_no_repeats() {
        let l = labels(10, 10);
        let mut s = BalancedSampler::new(&l, 4, 3).unwrap();
        let epoch = s.epoch();
        assert_eq!(epoch.len(), 5);
        let live: HashSet<_> = epoch.iter().flat_map(|b| b.live.clone()).collect();
        assert_eq!(live.len(), 10);
    }

    #[test]
    fn replay_with_same_seed() {
        let l = labels(7, 13);
        let a: Vec<_> = {
            let mut s = BalancedSampler::new(&l, 4, 42).unwrap();
            (0..20).map(|_| s.next_batch()).collect()
        };
        let mut s = BalancedSampler::new(&l, 4, 42).unwrap();
        let b: Vec<_> = (0..20).map(|_| s.next_batch()).collect();
        assert_eq!(a, b);
        let mut s = BalancedSampler::new(&l, 4, 43).unwrap();
        let c: Vec<_> = (0..20).map(|_| s.next_batch()).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_empty_class_and_odd_batch() {
        assert!(matches!(BalancedSampler::new(&labels(5, 0), 4, 0), Err(Error::Config(_))));
        assert!(matches!(BalancedSampler::new(&labels(5, 5), 3, 0), Err(Error::Config(_))));
        assert!(matches!(BalancedSampler::new(&labels(1, 5), 4, 0), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn every_batch_is_balanced_and_spoofs_cycle_fully(
            live in 1usize..20, spoof in 1usize..40, half in 1usize..4, seed in any::<u64>()
        ) {
            prop_assume!(live >= half && spoof >= half);
            let l = labels(live, spoof);
            let mut s = BalancedSampler::new(&l, 2 * half, seed).unwrap();
            let mut seen = Vec::new();
            for _ in 0..(spoof / half) {
                let b = s.next_batch();
                prop_assert_eq!(b.live.len(), half);
                prop_assert_eq!(b.spoof.len(), half);
                prop_assert!(b.live.iter().all(|&i| l[i] == Label::Live));
                prop_assert!(b.spoof.iter().all(|&i| l[i] == Label::Spoof));
                seen.extend(b.spoof);
            }
            // spoofs never repeat before the class is exhausted
            let uniq: HashSet<_> = seen.iter().collect();
            prop_assert_eq!(uniq.len(), seen.len());
        }
    }
}
