//! Class-conditional FIFO memory bank with guidance dropout.
//!
//! The bank keeps `C + 1` bounded FIFO queues of clean data points:
//! one per class plus an unconditional queue at index `C` that receives
//! every push. Training draws the full contents of one queue as the
//! reference set for the weighted velocity target; with probability
//! `p_cfg` the draw is redirected to the unconditional queue, which is
//! how classifier-free guidance sees unlabelled batches.
//!
//! Prefill seeds each class queue with the first `capacity` points of
//! that class in dataset order and the unconditional queue with the last
//! `capacity` points overall, exactly the state an all-points FIFO
//! replay would leave behind. Storage is 32-bit; all arithmetic
//! downstream converts to 64-bit.

use crate::error::{Error, Result};
use crate::targets::ReferenceBatch;
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use std::collections::VecDeque;

/// Default queue capacity.
pub const DEFAULT_CAPACITY: usize = 256;

/// Class-conditional FIFO memory bank.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    capacity: usize,
    num_classes: u32,
    dim: usize,
    p_cfg: f64,
    /// `num_classes + 1` queues; index `num_classes` is unconditional.
    queues: Vec<VecDeque<Box<[f32]>>>,
}

impl MemoryBank {
    /// Creates an empty bank with `num_classes` class queues plus the
    /// unconditional queue.
    pub fn new(capacity: usize, num_classes: u32, dim: usize, p_cfg: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("bank capacity must be >= 1".into()));
        }
        if dim == 0 {
            return Err(Error::Config("bank dim must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&p_cfg) {
            return Err(Error::Config(format!("p_cfg={p_cfg} outside [0, 1]")));
        }
        Ok(MemoryBank {
            capacity,
            num_classes,
            dim,
            p_cfg,
            queues: vec![VecDeque::new(); num_classes as usize + 1],
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Index of the unconditional queue.
    pub fn unconditional_label(&self) -> u32 {
        self.num_classes
    }

    /// Current length of a queue (`label == num_classes` addresses the
    /// unconditional queue).
    pub fn queue_len(&self, label: u32) -> usize {
        self.queues[label as usize].len()
    }

    /// Bytes of point storage currently held.
    pub fn storage_bytes(&self) -> usize {
        self.queues
            .iter()
            .map(|q| q.len() * self.dim * std::mem::size_of::<f32>())
            .sum()
    }

    /// Seeds the bank from a dataset in its natural order: each class
    /// queue takes the first `capacity` points of its class, the
    /// unconditional queue the last `capacity` points overall.
    pub fn prefill(&mut self, points: ArrayView2<'_, f64>, labels: Option<&[u32]>) -> Result<()> {
        if points.ncols() != self.dim {
            return Err(Error::Shape(format!(
                "dataset dim {} does not match bank dim {}",
                points.ncols(),
                self.dim
            )));
        }
        let n = points.nrows();
        if self.num_classes > 0 {
            let labels = labels.ok_or_else(|| {
                Error::Config("labelled bank prefill requires dataset labels".into())
            })?;
            if labels.len() != n {
                return Err(Error::Shape(format!(
                    "dataset has {n} rows but {} labels",
                    labels.len()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= self.num_classes) {
                return Err(Error::Config(format!(
                    "dataset label {bad} out of range for {} classes",
                    self.num_classes
                )));
            }
        }
        for q in &mut self.queues {
            q.clear();
        }
        for (i, row) in points.rows().into_iter().enumerate() {
            let packed: Box<[f32]> = row.iter().map(|&x| x as f32).collect();
            if self.num_classes > 0 {
                let class = labels.expect("checked above")[i] as usize;
                if self.queues[class].len() < self.capacity {
                    self.queues[class].push_back(packed.clone());
                }
            }
            let uncond = self.num_classes as usize;
            if self.queues[uncond].len() == self.capacity {
                self.queues[uncond].pop_front();
            }
            self.queues[uncond].push_back(packed);
        }
        for label in 0..self.num_classes {
            let len = self.queue_len(label);
            if len < self.capacity {
                return Err(Error::Config(format!(
                    "class {label} has only {len} points; prefill needs {}",
                    self.capacity
                )));
            }
        }
        if self.queue_len(self.num_classes) < self.capacity {
            return Err(Error::Config(format!(
                "dataset has only {n} points; prefill needs {}",
                self.capacity
            )));
        }
        Ok(())
    }

    /// Appends a point to its class queue and the unconditional queue,
    /// evicting the oldest entry of each queue that would overflow.
    pub fn push(&mut self, x0: &[f64], label: u32) -> Result<()> {
        if label >= self.num_classes && !(self.num_classes == 0 && label == 0) {
            return Err(Error::Config(format!(
                "push label {label} out of range for {} classes",
                self.num_classes
            )));
        }
        if x0.len() != self.dim {
            return Err(Error::Shape(format!(
                "point dim {} does not match bank dim {}",
                x0.len(),
                self.dim
            )));
        }
        let packed: Box<[f32]> = x0.iter().map(|&x| x as f32).collect();
        if self.num_classes > 0 {
            let q = &mut self.queues[label as usize];
            if q.len() == self.capacity {
                q.pop_front();
            }
            q.push_back(packed.clone());
        }
        let uncond = self.num_classes as usize;
        let q = &mut self.queues[uncond];
        if q.len() == self.capacity {
            q.pop_front();
        }
        q.push_back(packed);
        Ok(())
    }

    /// Draws a reference batch: with probability `p_cfg` the
    /// unconditional queue (effective label `num_classes`), otherwise the
    /// queue for `label`. Passing `label == num_classes` forces the
    /// unconditional queue. The batch snapshots the full queue contents
    /// oldest-first.
    pub fn draw<R: Rng + ?Sized>(&self, label: u32, rng: &mut R) -> Result<(u32, ReferenceBatch)> {
        if label > self.num_classes {
            return Err(Error::Config(format!(
                "draw label {label} out of range for {} classes",
                self.num_classes
            )));
        }
        let effective = if label == self.num_classes || rng.random::<f64>() < self.p_cfg {
            self.num_classes
        } else {
            label
        };
        Ok((effective, self.snapshot(effective)?))
    }

    /// Snapshot of one queue as a reference batch, oldest-first.
    pub fn snapshot(&self, label: u32) -> Result<ReferenceBatch> {
        let q = &self.queues[label as usize];
        if q.is_empty() {
            return Err(Error::Config(format!(
                "queue {label} is empty; prefill the bank before drawing"
            )));
        }
        let mut points = Array2::zeros((q.len(), self.dim));
        for (i, row) in q.iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                points[(i, j)] = f64::from(x);
            }
        }
        ReferenceBatch::new(points)
    }
}
