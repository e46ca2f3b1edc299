//! Fixed-capacity rehearsal memory filled by reservoir sampling.

use crate::error::{Error, Result};
use crate::losses::LabeledBatch;
use crate::numerics::Matrix;
use crate::rng::RngState;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct BufferEntry<T> {
    pub x: Vec<T>,
    pub y: usize,
    /// Logits at insertion time, kept for DER++ replay.
    pub logits: Option<Vec<T>>,
    pub task_id: usize,
    /// Position of this example in the overall stream.
    pub insertion_index: u64,
}

#[derive(Clone, Debug)]
pub struct RehearsalBuffer<T> {
    capacity: usize,
    entries: Vec<BufferEntry<T>>,
    observed: u64,
    rng: RngState,
}

impl<T: Scalar> RehearsalBuffer<T> {
    pub fn new(capacity: usize, rng: RngState) -> Self {
        Self {
            capacity,
            entries: Vec::with_capacity(capacity),
            observed: 0,
            rng,
        }
    }

    /// Rebuilds a buffer from saved parts.
    pub fn from_parts(
        capacity: usize,
        entries: Vec<BufferEntry<T>>,
        observed: u64,
        rng: RngState,
    ) -> Result<Self> {
        if entries.len() > capacity || (entries.len() as u64) > observed {
            return Err(Error::Config(format!(
                "buffer with {} entries, capacity {capacity}, {observed} observed is inconsistent",
                entries.len()
            )));
        }
        Ok(Self {
            capacity,
            entries,
            observed,
            rng,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Length of the stream seen so far.
    pub fn observed(&self) -> u64 {
        self.observed
    }

    pub fn entries(&self) -> &[BufferEntry<T>] {
        &self.entries
    }

    pub fn rng(&self) -> &RngState {
        &self.rng
    }

    /// Algorithm R: the first `capacity` items fill the buffer; item number
    /// `k > capacity` (1-based) replaces a uniformly chosen slot with
    /// probability `capacity / k`. A zero-capacity buffer ignores everything.
    pub fn observe(&mut self, mut entry: BufferEntry<T>) {
        if self.capacity == 0 {
            return;
        }
        entry.insertion_index = self.observed;
        if self.entries.len() < self.capacity {
            self.entries.push(entry);
        } else {
            let r = self.rng.below((self.observed + 1) as usize);
            if r < self.capacity {
                self.entries[r] = entry;
            }
        }
        self.observed += 1;
    }

    /// Uniform mini-batch: without replacement when the buffer holds at least
    /// `batch_size` entries, with replacement otherwise.
    pub fn sample(&self, batch_size: usize, rng: &mut RngState) -> Result<Vec<&BufferEntry<T>>> {
        Ok(self
            .sample_indices(batch_size, rng)?
            .into_iter()
            .map(|i| &self.entries[i])
            .collect())
    }

    pub fn sample_indices(&self, batch_size: usize, rng: &mut RngState) -> Result<Vec<usize>> {
        let n = self.entries.len();
        if n == 0 {
            return Err(Error::EmptyBuffer);
        }
        if n < batch_size {
            return Ok((0..batch_size).map(|_| rng.below(n)).collect());
        }
        // partial Fisher-Yates
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..batch_size {
            let j = i + rng.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(batch_size);
        Ok(idx)
    }

    /// Samples a batch and packs it for the loss functions. Stored logits are
    /// included only if every sampled entry carries them.
    pub fn sample_batch(&self, batch_size: usize, rng: &mut RngState) -> Result<LabeledBatch<T>> {
        let picked = self.sample(batch_size, rng)?;
        let dim = picked[0].x.len();
        let mut x = Vec::with_capacity(picked.len() * dim);
        let mut labels = Vec::with_capacity(picked.len());
        let mut logits: Option<Vec<T>> = Some(Vec::new());
        let mut width = 0;
        for e in &picked {
            x.extend_from_slice(&e.x);
            labels.push(e.y);
            match (&mut logits, &e.logits) {
                (Some(acc), Some(l)) => {
                    width = l.len();
                    acc.extend_from_slice(l);
                }
                (slot, _) => *slot = None,
            }
        }
        let stored_logits = logits
            .map(|l| Matrix::from_vec(picked.len(), width, l))
            .transpose()?;
        Ok(LabeledBatch {
            x: Matrix::from_vec(picked.len(), dim, x)?,
            labels,
            stored_logits,
        })
    }
}
