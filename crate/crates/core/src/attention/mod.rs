//! Encoder self-attention: the dense oracle, sliding-window local attention
//! and transient-global attention, all packing-aware.
//!
//! Masks and bias lookups are defined once here and shared by the kernels and
//! by the dense oracle, so the oracle-equivalence tests compare two
//! independent evaluation orders of the same definition.

mod bucket;
mod count;
mod dense;
mod global;
mod kernel;
mod layer;
mod mask;

use serde::{Deserialize, Serialize};

pub use bucket::{causal_position_bucket, relative_position_bucket};
pub use count::{count_kv_pairs, global_pairs_closed_form, local_pairs_closed_form};
pub use dense::{dense_attention, dense_attention_op, gather_bias, BiasIndex};
pub use global::{block_sum, compute_global_tokens, global_segments, num_blocks};
pub use kernel::{inject_mask_off_by_one, local_attention_op, tglobal_attention_op};
pub use layer::{self_attention, AttentionPath, AttentionWeights};
pub use mask::{build_global_mask, build_local_mask, build_segment_mask, AttentionMask};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Dense,
    Local,
    #[serde(rename = "tglobal")]
    TGlobal,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 3] = [AttentionMode::Dense, AttentionMode::Local, AttentionMode::TGlobal];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::Dense => "dense",
            AttentionMode::Local => "local",
            AttentionMode::TGlobal => "tglobal",
        }
    }
}

impl std::fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(AttentionMode::Dense),
            "local" => Ok(AttentionMode::Local),
            "tglobal" => Ok(AttentionMode::TGlobal),
            other => Err(Error::Invalid(format!("unknown attention mode {other:?}"))),
        }
    }
}

/// Geometry of encoder attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Tokens attended on each side in local attention.
    pub radius: usize,
    /// Tokens summed into one transient global token.
    pub block_size: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub num_buckets: usize,
    pub max_distance: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            radius: 127,
            block_size: 16,
            num_heads: 4,
            head_dim: 16,
            num_buckets: 32,
            max_distance: 128,
        }
    }
}

impl AttentionConfig {
    pub fn d_model(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("attention config: {m}")));
        if self.block_size == 0 {
            return bad("block_size must be >= 1");
        }
        if self.num_heads == 0 || self.head_dim == 0 {
            return bad("num_heads and head_dim must be >= 1");
        }
        if self.num_buckets < 4 || !self.num_buckets.is_multiple_of(2) {
            return bad("num_buckets must be even and >= 4");
        }
        if self.max_distance <= self.num_buckets / 2 {
            return bad("max_distance must exceed num_buckets / 2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasKind {
    /// Indexed by bucketed signed token distance.
    TokenToToken,
    /// Indexed by bucketed signed distance between a token's block and a
    /// global token's block.
    TokenToGlobal,
}

/// Learned relative-position bias logits, `[num_heads × num_buckets]`.
#[derive(Debug, Clone)]
pub struct BiasTable<T: crate::Real = f64> {
    pub kind: BiasKind,
    pub values: crate::Tensor<T>,
}

impl<T: crate::Real> BiasTable<T> {
    pub fn zeros(kind: BiasKind, num_heads: usize, num_buckets: usize) -> Self {
        Self {
            kind,
            values: crate::Tensor::zeros(&[num_heads, num_buckets]),
        }
    }

    pub fn get(&self, head: usize, bucket: usize) -> T {
        self.values.data()[head * self.values.last_dim() + bucket]
    }
}

/// One packed input sequence: tokens, the example each token belongs to
/// (0 = padding) and each token's position inside its example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedBatch {
    pub tokens: Vec<u32>,
    pub segment_ids: Vec<u32>,
    pub positions: Vec<u32>,
}

impl PackedBatch {
    /// Validate and wrap explicit arrays.
    pub fn new(tokens: Vec<u32>, segment_ids: Vec<u32>, positions: Vec<u32>) -> Result<Self> {
        let b = Self {
            tokens,
            segment_ids,
            positions,
        };
        b.validate()?;
        Ok(b)
    }

    /// A single unpadded example.
    pub fn single(tokens: Vec<u32>) -> Self {
        let l = tokens.len();
        Self {
            tokens,
            segment_ids: vec![1; l],
            positions: (0..l as u32).collect(),
        }
    }

    /// Derive positions from segment ids (restarting at every segment).
    pub fn from_segments(tokens: Vec<u32>, segment_ids: Vec<u32>) -> Result<Self> {
        let mut positions = Vec::with_capacity(segment_ids.len());
        let mut prev = 0u32;
        let mut run = 0u32;
        for &s in &segment_ids {
            if s == 0 {
                positions.push(0);
                prev = 0;
                continue;
            }
            run = if s == prev { run + 1 } else { 0 };
            positions.push(run);
            prev = s;
        }
        Self::new(tokens, segment_ids, positions)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_pad(&self, i: usize) -> bool {
        self.segment_ids[i] == 0
    }

    /// Row flags: true for real tokens.
    pub fn non_pad(&self) -> Vec<bool> {
        self.segment_ids.iter().map(|&s| s != 0).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.tokens.len();
        if self.segment_ids.len() != l || self.positions.len() != l {
            return Err(Error::Invalid(format!(
                "packed batch arrays differ in length: {l}, {}, {}",
                self.segment_ids.len(),
                self.positions.len()
            )));
        }
        let mut last_seg = 0u32;
        let mut prev = 0u32;
        for i in 0..l {
            let s = self.segment_ids[i];
            if s != 0 {
                let starts = s != prev;
                if starts && s <= last_seg {
                    return Err(Error::Invalid(format!(
                        "segment {s} at position {i} is not contiguous or out of order"
                    )));
                }
                let expected = if starts { 0 } else { self.positions[i - 1] + 1 };
                if self.positions[i] != expected {
                    return Err(Error::Invalid(format!(
                        "position {} at index {i} should be {expected}",
                        self.positions[i]
                    )));
                }
                last_seg = s;
            }
            prev = s;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions_restart_per_segment() {
        let b = PackedBatch::from_segments(vec![5; 7], vec![1, 1, 1, 0, 2, 2, 0]).unwrap();
        assert_eq!(b.positions, vec![0, 1, 2, 0, 0, 1, 0]);
    }

    #[test]
    fn rejects_bad_packing() {
        assert!(PackedBatch::new(vec![1, 1], vec![1], vec![0]).is_err());
        assert!(PackedBatch::new(vec![1; 3], vec![2, 1, 1], vec![0, 0, 1]).is_err());
        assert!(PackedBatch::new(vec![1; 3], vec![1, 2, 1], vec![0, 0, 0]).is_err());
        assert!(PackedBatch::new(vec![1; 2], vec![1, 1], vec![0, 0]).is_err());
    }

    #[test]
    fn config_invariants() {
        assert!(AttentionConfig::default().validate().is_ok());
        let odd = AttentionConfig {
            num_buckets: 31,
            ..Default::default()
        };
        assert!(odd.validate().is_err());
        let short = AttentionConfig {
            max_distance: 16,
            ..Default::default()
        };
        assert!(short.validate().is_err());
    }

    #[test]
    fn mode_round_trips_through_str() {
        for m in AttentionMode::ALL {
            assert_eq!(m.as_str().parse::<AttentionMode>().unwrap(), m);
        }
    }
}
