use super::PackedBatch;
use crate::{Error, Result};

/// Boolean `queries × keys` matrix of legal attention edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub rows: usize,
    pub cols: usize,
    pub allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        Self { rows, cols, allowed }
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    /// Number of allowed (query, key) pairs.
    pub fn count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    /// `[self ∥ other]` along the key axis.
    pub fn concat_cols(&self, other: &AttentionMask) -> Result<AttentionMask> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "AttentionMask::concat_cols",
                format!("{} rows vs {}", self.rows, other.rows),
            ));
        }
        Ok(Self::from_fn(self.rows, self.cols + other.cols, |i, j| {
            if j < self.cols {
                self.get(i, j)
            } else {
                other.get(i, j - self.cols)
            }
        }))
    }
}

/// Band of radius `r` restricted to each token's own (non-padding) segment.
pub fn build_local_mask(batch: &PackedBatch, r: usize) -> AttentionMask {
    let seg = &batch.segment_ids;
    let l = batch.len();
    AttentionMask::from_fn(l, l, |i, j| i.abs_diff(j) <= r && seg[i] != 0 && seg[i] == seg[j])
}

/// Token-to-global edges: a token sees every global token of its own example.
pub fn build_global_mask(batch: &PackedBatch, global_segment: &[u32]) -> AttentionMask {
    let seg = &batch.segment_ids;
    AttentionMask::from_fn(batch.len(), global_segment.len(), |i, j| {
        seg[i] != 0 && seg[i] == global_segment[j]
    })
}

/// Full attention within segments: the dense baseline and cross-attention mask.
pub fn build_segment_mask(query_segments: &[u32], key_segments: &[u32]) -> AttentionMask {
    AttentionMask::from_fn(query_segments.len(), key_segments.len(), |i, j| {
        query_segments[i] != 0 && query_segments[i] == key_segments[j]
    })
}
