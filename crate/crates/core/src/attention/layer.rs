//! The encoder self-attention sublayer: projections, mode dispatch and the
//! output projection.

use super::dense::{dense_attention_op, gather_bias, BiasIndex};
use super::global::{block_sum, global_segments, num_blocks};
use super::kernel::{local_attention_op, tglobal_attention_op};
use super::mask::{build_global_mask, build_local_mask, build_segment_mask};
use super::{relative_position_bucket, AttentionConfig, AttentionMode, PackedBatch};
use crate::numerics::{Real, Tape, Var};
use crate::{Error, Result};

/// Parameter handles of one attention sublayer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub o: Var,
    /// Token-to-token bias table `[heads × buckets]`.
    pub rel_bias: Var,
    /// Token-to-global bias table, TGlobal only.
    pub side_bias: Option<Var>,
    /// Scale of the RMS norm applied to summed blocks, TGlobal only.
    pub global_norm: Option<Var>,
}

/// How the sparse modes are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionPath {
    /// Banded kernels.
    Kernel,
    /// Dense attention with the equivalent explicit mask and bias (augmented
    /// with the global keys for TGlobal). Used as a cross-check.
    Oracle,
}

fn token_bias_index(l: usize, cfg: &AttentionConfig) -> Vec<BiasIndex> {
    // by_offset[d] is the bucket of j − i = d − (l − 1).
    let by_offset: Vec<BiasIndex> = (0..2 * l - 1)
        .map(|d| BiasIndex {
            table: 0,
            bucket: relative_position_bucket(d as i64 - (l as i64 - 1), cfg.num_buckets, cfg.max_distance) as u16,
        })
        .collect();
    let mut idx = Vec::with_capacity(l * l);
    for i in 0..l {
        idx.extend_from_slice(&by_offset[l - 1 - i..2 * l - 1 - i]);
    }
    idx
}

/// Self-attention over the (already normalised) layer input `h: [l × d_model]`,
/// followed by the output projection.
pub fn self_attention<T: Real>(
    tape: &mut Tape<T>,
    h: Var,
    w: &AttentionWeights,
    batch: &PackedBatch,
    cfg: &AttentionConfig,
    mode: AttentionMode,
    path: AttentionPath,
) -> Result<Var> {
    let l = batch.len();
    if tape.value(h).rows() != l {
        return Err(Error::shape("self_attention", "input rows differ from batch length"));
    }
    let q = tape.matmul(h, w.q)?;
    let k = tape.matmul(h, w.k)?;
    let v = tape.matmul(h, w.v)?;
    let heads = cfg.num_heads;
    let attended = match (mode, path) {
        (AttentionMode::Dense, _) => {
            let mask = build_segment_mask(&batch.segment_ids, &batch.segment_ids);
            let bias = gather_bias(tape, &[w.rel_bias], token_bias_index(l, cfg), l, l)?;
            dense_attention_op(tape, q, k, v, Some(bias), &mask, heads)?
        }
        (AttentionMode::Local, AttentionPath::Kernel) => local_attention_op(tape, q, k, v, w.rel_bias, batch, cfg)?,
        (AttentionMode::Local, AttentionPath::Oracle) => {
            let mask = build_local_mask(batch, cfg.radius);
            let bias = gather_bias(tape, &[w.rel_bias], token_bias_index(l, cfg), l, l)?;
            dense_attention_op(tape, q, k, v, Some(bias), &mask, heads)?
        }
        (AttentionMode::TGlobal, path) => {
            let (Some(side), Some(gnorm)) = (w.side_bias, w.global_norm) else {
                return Err(Error::Invalid(
                    "tglobal attention needs side bias and global norm".into(),
                ));
            };
            let gsegs = global_segments(batch, cfg.block_size);
            let sums = block_sum(tape, h, batch, cfg.block_size)?;
            let globals = tape.rms_norm(sums, gnorm)?;
            let kg = tape.matmul(globals, w.k)?;
            let vg = tape.matmul(globals, w.v)?;
            match path {
                AttentionPath::Kernel => {
                    tglobal_attention_op(tape, q, k, v, kg, vg, w.rel_bias, side, batch, &gsegs, cfg)?
                }
                AttentionPath::Oracle => {
                    let g = num_blocks(l, cfg.block_size);
                    let mask = build_local_mask(batch, cfg.radius).concat_cols(&build_global_mask(batch, &gsegs))?;
                    let mut idx = Vec::with_capacity(l * (l + g));
                    for i in 0..l {
                        for j in 0..l {
                            let b = relative_position_bucket(j as i64 - i as i64, cfg.num_buckets, cfg.max_distance);
                            idx.push(BiasIndex {
                                table: 0,
                                bucket: b as u16,
                            });
                        }
                        for j in 0..g {
                            let rel = j as i64 - (i / cfg.block_size) as i64;
                            let b = relative_position_bucket(rel, cfg.num_buckets, cfg.max_distance);
                            idx.push(BiasIndex {
                                table: 1,
                                bucket: b as u16,
                            });
                        }
                    }
                    let bias = gather_bias(tape, &[w.rel_bias, side], idx, l, l + g)?;
                    let k_aug = tape.concat_rows(k, kg)?;
                    let v_aug = tape.concat_rows(v, vg)?;
                    dense_attention_op(tape, q, k_aug, v_aug, Some(bias), &mask, heads)?
                }
            }
        }
    };
    tape.matmul(attended, w.o)
}
