use rand::Rng;

use crate::data::Transition;
use crate::nn::checksum_values;

/// Fixed-capacity FIFO of transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    head: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { capacity, items: Vec::new(), head: 0, inserted: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total transitions ever pushed, including evicted ones.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Appends, evicting the oldest transition once full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
        self.inserted += 1;
    }

    /// Transition by age, `0` being the oldest retained one.
    pub fn get(&self, i: usize) -> Option<&Transition> {
        if i >= self.items.len() {
            return None;
        }
        let start = if self.items.len() < self.capacity { 0 } else { self.head };
        self.items.get((start + i) % self.items.len())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        (0..self.len()).map(|i| self.get(i).expect("index in range"))
    }

    /// Uniform draw with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<usize> {
        assert!(!self.is_empty(), "cannot sample from an empty buffer");
        (0..n).map(|_| rng.random_range(0..self.items.len())).collect()
    }

    /// Storage-order access paired with [`ReplayBuffer::sample_indices`].
    pub(crate) fn slot(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    /// Digest of the contents in age order and the insertion counter.
    pub fn checksum(&self) -> u64 {
        let header = [self.capacity as f64, self.inserted as f64];
        let values = header.into_iter().chain(self.iter().flat_map(|t| {
            t.s.iter()
                .chain(&t.a)
                .chain(std::iter::once(&t.r))
                .chain(&t.s_next)
                .copied()
                .chain(std::iter::once(if t.restart { 1.0 } else { 0.0 }))
                .collect::<Vec<_>>()
        }));
        checksum_values(values)
    }
}
