//! Modality-balanced batch sampling.
//!
//! Each modality owns a queue of sample indices. A batch picks `B` distinct
//! modalities (all of them when `B = M`, otherwise a uniform random subset)
//! and pops one sample from each selected queue. An exhausted queue is
//! refilled with a fresh shuffle seeded by `(seed, modality, refill count)`.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::synth::derive_seed;
use super::types::Sample;
use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Indices into the sampler's sample list, ordered by modality id.
    pub indices: Vec<usize>,
    pub modalities: Vec<usize>,
}

impl Batch {
    /// Pairwise-distinct modality ids.
    pub fn is_modality_distinct(&self) -> bool {
        let mut m = self.modalities.clone();
        m.sort_unstable();
        m.windows(2).all(|w| w[0] != w[1])
    }
}

#[derive(Clone, Debug)]
struct Queue {
    members: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    refills: u64,
    /// Per-member class key used by class interleaving.
    class_keys: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ModalityBatchSampler {
    queues: Vec<Queue>,
    batch_size: usize,
    seed: u64,
    class_interleave: bool,
    rng: ChaCha8Rng,
}

impl ModalityBatchSampler {
    /// `B > M` and empty modalities are contract violations.
    pub fn new(
        samples: &[Sample],
        num_modalities: usize,
        batch_size: usize,
        seed: u64,
        class_interleave: bool,
    ) -> Result<Self> {
        ensure!(batch_size >= 1, Contract, "batch size must be at least 1");
        ensure!(
            batch_size <= num_modalities,
            Contract,
            "batch size {batch_size} exceeds modality count {num_modalities}; batches must have distinct modalities"
        );
        let mut queues: Vec<Queue> = (0..num_modalities)
            .map(|_| Queue {
                members: Vec::new(),
                order: Vec::new(),
                pos: 0,
                refills: 0,
                class_keys: Vec::new(),
            })
            .collect();
        for (i, s) in samples.iter().enumerate() {
            ensure!(
                s.modality_id < num_modalities,
                Contract,
                "sample {} has modality {} >= {num_modalities}",
                s.sample_id,
                s.modality_id
            );
            let q = &mut queues[s.modality_id];
            q.members.push(i);
            q.class_keys
                .push(s.class_set().first().copied().unwrap_or(usize::MAX));
        }
        for (d, q) in queues.iter().enumerate() {
            ensure!(!q.members.is_empty(), Contract, "modality {d} has no samples");
        }
        Ok(Self {
            queues,
            batch_size,
            seed,
            class_interleave,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0xba7c])),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn num_modalities(&self) -> usize {
        self.queues.len()
    }

    fn refill(&mut self, d: usize) {
        let interleave = self.class_interleave;
        let q = &mut self.queues[d];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, d as u64, q.refills]));
        let mut slots: Vec<usize> = (0..q.members.len()).collect();
        slots.shuffle(&mut rng);
        if interleave {
            slots = interleave_by_key(&slots, &q.class_keys);
        }
        q.order = slots.into_iter().map(|s| q.members[s]).collect();
        q.pos = 0;
        q.refills += 1;
    }

    fn pop(&mut self, d: usize) -> usize {
        if self.queues[d].pos >= self.queues[d].order.len() {
            self.refill(d);
        }
        let q = &mut self.queues[d];
        let i = q.order[q.pos];
        q.pos += 1;
        i
    }

    pub fn next_batch(&mut self) -> Batch {
        let m = self.queues.len();
        let mut modalities: Vec<usize> = if self.batch_size == m {
            (0..m).collect()
        } else {
            index::sample(&mut self.rng, m, self.batch_size).into_vec()
        };
        modalities.sort_unstable();
        let indices = modalities.iter().map(|&d| self.pop(d)).collect();
        Batch { indices, modalities }
    }
}

/// Round-robin over class keys, keeping the shuffled order within each key.
/// Keys are visited in order of first appearance.
fn interleave_by_key(slots: &[usize], keys: &[usize]) -> Vec<usize> {
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for &s in slots {
        match groups.iter_mut().find(|(k, _)| *k == keys[s]) {
            Some((_, g)) => g.push(s),
            None => groups.push((keys[s], vec![s])),
        }
    }
    let mut out = Vec::with_capacity(slots.len());
    let mut round = 0;
    while out.len() < slots.len() {
        for (_, g) in &groups {
            if let Some(&s) = g.get(round) {
                out.push(s);
            }
        }
        round += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::data::types::Annotation;

    fn samples(per_modality: &[usize]) -> Vec<Sample> {
        let mut out = Vec::new();
        for (d, &n) in per_modality.iter().enumerate() {
            for i in 0..n {
                out.push(Sample {
                    sample_id: out.len() as u64,
                    image: Tensor::zeros(1, 1),
                    modality_id: d,
                    annotations: vec![Annotation {
                        bbox: [0.5; 4],
                        class_id: 10 * d + i % 3,
                    }],
                });
            }
        }
        out
    }

    #[test]
    fn full_batches_cover_every_modality() {
        let s = samples(&[3, 4, 5, 2, 7]);
        let mut sp = ModalityBatchSampler::new(&s, 5, 5, 1, false).unwrap();
        for _ in 0..50 {
            assert_eq!(sp.next_batch().modalities, vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn oversize_batch_and_empty_modality_rejected() {
        let s = samples(&[1, 1, 1, 1, 1]);
        assert!(ModalityBatchSampler::new(&s, 5, 6, 0, false).is_err());
        let s = samples(&[1, 0, 1]);
        assert!(ModalityBatchSampler::new(&s, 3, 2, 0, false).is_err());
    }

    #[test]
    fn every_sample_once_per_refill() {
        let s = samples(&[4, 6]);
        let mut sp = ModalityBatchSampler::new(&s, 2, 2, 9, false).unwrap();
        let mut seen: Vec<usize> = (0..4).map(|_| sp.next_batch().indices[0]).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3]);
        let next: Vec<usize> = (0..4).map(|_| sp.next_batch().indices[0]).collect();
        assert_ne!(next, (0..4).collect::<Vec<_>>(), "refill should reshuffle");
    }

    #[test]
    fn interleave_alternates_classes() {
        let keys = [0, 0, 0, 1, 1, 2];
        let out = interleave_by_key(&[0, 1, 2, 3, 4, 5], &keys);
        let k: Vec<usize> = out.iter().map(|&s| keys[s]).collect();
        assert_eq!(k, vec![0, 1, 2, 0, 1, 0]);
    }

    #[test]
    fn same_seed_same_stream() {
        let s = samples(&[5, 5, 5, 5, 5]);
        let mut a = ModalityBatchSampler::new(&s, 5, 3, 42, true).unwrap();
        let mut b = ModalityBatchSampler::new(&s, 5, 3, 42, true).unwrap();
        for _ in 0..100 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
    }
}
