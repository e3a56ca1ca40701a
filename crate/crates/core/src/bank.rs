//! Per-level FIFO queues of past momentum features used as negatives.

use rand_distr::{Distribution, StandardNormal};

use crate::ndiff::Array;
use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum BankError {
    #[error("config error: {0}")]
    Config(String),
    #[error("batch of {batch} keys exceeds bank capacity {capacity}")]
    BatchTooLarge { batch: usize, capacity: usize },
    #[error("key dimension {got} does not match bank dimension {expected}")]
    DimMismatch { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    Frame,
    Subword,
    Word,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Frame, Level::Subword, Level::Word];

    pub fn name(self) -> &'static str {
        match self {
            Level::Frame => "frame",
            Level::Subword => "subword",
            Level::Word => "word",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::str::FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "frame" => Ok(Level::Frame),
            "subword" => Ok(Level::Subword),
            "word" => Ok(Level::Word),
            other => Err(format!("unknown level {other:?} (frame, subword, word)")),
        }
    }
}

/// Ring buffer of `capacity` unit vectors. Slot `cursor` holds the oldest
/// row once the bank is full.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeBank {
    level: Level,
    capacity: usize,
    dim: usize,
    storage: Vec<f32>,
    cursor: usize,
    fill: usize,
}

fn random_unit(dim: usize, rng: &mut impl rand::Rng) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.iter().map(|x| (x / norm) as f32).collect();
        }
    }
}

impl NegativeBank {
    /// A full bank of random unit vectors.
    pub fn init(level: Level, capacity: usize, dim: usize, seed: u64) -> Result<Self, BankError> {
        if capacity == 0 || dim == 0 {
            return Err(BankError::Config(format!(
                "bank needs capacity ≥ 1 and dim ≥ 1, got {capacity}×{dim}"
            )));
        }
        let mut rng = seed::rng(seed);
        let storage = (0..capacity).flat_map(|_| random_unit(dim, &mut rng)).collect();
        Ok(Self {
            level,
            capacity,
            dim,
            storage,
            cursor: 0,
            fill: capacity,
        })
    }

    /// Restores a bank from checkpointed state.
    pub fn from_parts(level: Level, dim: usize, storage: Vec<f32>, cursor: usize, fill: usize) -> Result<Self, BankError> {
        if dim == 0 || storage.is_empty() || !storage.len().is_multiple_of(dim) {
            return Err(BankError::Config(format!("storage of {} values for dim {dim}", storage.len())));
        }
        let capacity = storage.len() / dim;
        if cursor >= capacity || fill > capacity {
            return Err(BankError::Config(format!(
                "cursor {cursor} / fill {fill} invalid for capacity {capacity}"
            )));
        }
        Ok(Self {
            level,
            capacity,
            dim,
            storage,
            cursor,
            fill,
        })
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    pub fn storage(&self) -> &[f32] {
        &self.storage
    }

    pub fn row(&self, slot: usize) -> &[f32] {
        &self.storage[slot * self.dim..(slot + 1) * self.dim]
    }

    /// Writes `keys` (row-major, `B' × dim`) over the oldest slots.
    pub fn enqueue_dequeue(&mut self, keys: &[f32]) -> Result<(), BankError> {
        if !keys.len().is_multiple_of(self.dim) {
            return Err(BankError::DimMismatch {
                got: keys.len(),
                expected: self.dim,
            });
        }
        let batch = keys.len() / self.dim;
        if batch > self.capacity {
            return Err(BankError::BatchTooLarge {
                batch,
                capacity: self.capacity,
            });
        }
        for key in keys.chunks_exact(self.dim) {
            let slot = self.cursor;
            self.storage[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(key);
            self.cursor = (self.cursor + 1) % self.capacity;
        }
        self.fill = (self.fill + batch).min(self.capacity);
        Ok(())
    }

    /// Rows from oldest to newest.
    pub fn rows_by_age(&self) -> Vec<&[f32]> {
        let start = if self.fill == self.capacity { self.cursor } else { 0 };
        (0..self.fill).map(|i| self.row((start + i) % self.capacity)).collect()
    }

    /// Snapshot of all `K` rows as a `[K, dim]` array; it carries no tape
    /// links when lifted with `Tape::constant`.
    pub fn as_negatives(&self) -> Array<f32> {
        Array::new(&[self.capacity, self.dim], self.storage.clone()).expect("bank shape")
    }
}
