use serde::{Deserialize, Serialize};

use crate::diffnum::Real;
use crate::error::{Error, Result};
use crate::redundancy::RedundancyMask;

/// Per-slot spatial attention, stored slot-major (`s x h x w`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    slots: usize,
    height: usize,
    width: usize,
    weights: Vec<f64>,
}

impl AttentionMap {
    pub fn new(slots: usize, height: usize, width: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != slots * height * width {
            return Err(Error::Dimension {
                op: "attention_map",
                lhs: vec![slots, height, width],
                rhs: vec![weights.len()],
            });
        }
        Ok(AttentionMap {
            slots,
            height,
            width,
            weights,
        })
    }

    /// From pixel-major `[n, s]` data as produced inside the model.
    pub fn from_pixel_major<T: Real>(
        data: &[T],
        slots: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let n = height * width;
        if data.len() != n * slots {
            return Err(Error::Dimension {
                op: "attention_map",
                lhs: vec![n, slots],
                rhs: vec![data.len()],
            });
        }
        let mut weights = vec![0.0; n * slots];
        for p in 0..n {
            for k in 0..slots {
                weights[k * n + p] = data[p * slots + k].as_f64();
            }
        }
        Self::new(slots, height, width, weights)
    }

    /// One-hot map from per-pixel labels.
    pub fn from_labels(labels: &[usize], slots: usize, height: usize, width: usize) -> Result<Self> {
        let n = height * width;
        if labels.len() != n || labels.iter().any(|&l| l >= slots) {
            return Err(Error::Dimension {
                op: "attention_from_labels",
                lhs: vec![n, slots],
                rhs: vec![labels.len()],
            });
        }
        let mut weights = vec![0.0; n * slots];
        for (p, &l) in labels.iter().enumerate() {
            weights[l * n + p] = 1.0;
        }
        Self::new(slots, height, width, weights)
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, slot: usize, pixel: usize) -> f64 {
        self.weights[slot * self.num_pixels() + pixel]
    }

    /// Row of one slot over all pixels.
    pub fn slot_row(&self, slot: usize) -> &[f64] {
        let n = self.num_pixels();
        &self.weights[slot * n..(slot + 1) * n]
    }

    /// Largest deviation from 1 of the per-pixel sum over kept slots.
    pub fn normalization_error(&self, mask: Option<&RedundancyMask>) -> f64 {
        (0..self.num_pixels())
            .map(|p| {
                let total: f64 = (0..self.slots)
                    .filter(|&k| mask.is_none_or(|m| m.keep()[k]))
                    .map(|k| self.weight(k, p))
                    .sum();
                (total - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Per-pixel argmax over kept slots; ties go to the lowest index.
    pub fn argmax_labels(&self, mask: Option<&RedundancyMask>) -> Vec<usize> {
        (0..self.num_pixels())
            .map(|p| {
                let mut best: Option<(usize, f64)> = None;
                for k in 0..self.slots {
                    if mask.is_some_and(|m| !m.keep()[k]) {
                        continue;
                    }
                    let v = self.weight(k, p);
                    if best.is_none_or(|(_, bv)| v > bv) {
                        best = Some((k, v));
                    }
                }
                best.map(|(k, _)| k).unwrap_or(0)
            })
            .collect()
    }

    /// Relabels slots: output slot `i` takes input slot `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut weights = Vec::with_capacity(self.weights.len());
        for &src in perm {
            weights.extend_from_slice(self.slot_row(src));
        }
        AttentionMap {
            weights,
            ..self.clone()
        }
    }
}
