//! Transient global tokens: one per block of `k` input tokens, rebuilt from
//! the current layer input every time attention runs.

use std::collections::BTreeMap;

use super::PackedBatch;
use crate::numerics::{ops, Backward, Real, Tape, Tensor, Var};
use crate::{Error, Result};

pub fn num_blocks(len: usize, block_size: usize) -> usize {
    len.div_ceil(block_size)
}

/// Segment owning each block: the segment holding most of the block's
/// non-padding tokens, ties going to the lower id. All-padding blocks get 0,
/// which masks them for every query.
pub fn global_segments(batch: &PackedBatch, block_size: usize) -> Vec<u32> {
    batch
        .segment_ids
        .chunks(block_size)
        .map(|block| {
            let mut counts = BTreeMap::new();
            for &s in block.iter().filter(|&&s| s != 0) {
                *counts.entry(s).or_insert(0usize) += 1;
            }
            // BTreeMap iterates ids ascending; keep the first maximum.
            let mut best = (0u32, 0usize);
            for (s, c) in counts {
                if c > best.1 {
                    best = (s, c);
                }
            }
            best.0
        })
        .collect()
}

fn block_sum_values<T: Real>(x: &Tensor<T>, batch: &PackedBatch, block_size: usize) -> Tensor<T> {
    let d = x.last_dim();
    let g = num_blocks(x.rows(), block_size);
    let mut out = Tensor::zeros(&[g, d]);
    for i in 0..x.rows() {
        if batch.is_pad(i) {
            continue;
        }
        for (o, &v) in out.row_mut(i / block_size).iter_mut().zip(x.row(i)) {
            *o += v;
        }
    }
    out
}

/// Per-block sum of the non-padding rows of `x`, recorded on the tape.
pub fn block_sum<T: Real>(tape: &mut Tape<T>, x: Var, batch: &PackedBatch, block_size: usize) -> Result<Var> {
    let xv = tape.value(x);
    if xv.rows() != batch.len() {
        return Err(Error::shape(
            "block_sum",
            format!("{} rows for {} tokens", xv.rows(), batch.len()),
        ));
    }
    let out = block_sum_values(xv, batch, block_size);
    let keep = batch.non_pad();
    tape.push(out, vec![x], Box::new(BlockSum { block_size, keep }))
}

struct BlockSum {
    block_size: usize,
    keep: Vec<bool>,
}

impl<T: Real> Backward<T> for BlockSum {
    fn name(&self) -> &'static str {
        "block_sum"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        _wants: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let mut dx = Tensor::zeros(inputs[0].shape());
        for (i, &k) in self.keep.iter().enumerate() {
            if k {
                dx.row_mut(i).copy_from_slice(grad.row(i / self.block_size));
            }
        }
        Ok(vec![Some(dx)])
    }
}

/// Global token embeddings `rms_norm(Σ block rows, scale)` and the segment
/// each global token belongs to.
pub fn compute_global_tokens<T: Real>(
    x: &Tensor<T>,
    batch: &PackedBatch,
    block_size: usize,
    scale: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<u32>)> {
    if block_size == 0 {
        return Err(Error::Invalid("block size must be >= 1".into()));
    }
    if x.rows() != batch.len() {
        return Err(Error::shape(
            "compute_global_tokens",
            format!("{} rows for {} tokens", x.rows(), batch.len()),
        ));
    }
    let sums = block_sum_values(x, batch, block_size);
    Ok((ops::rms_norm(&sums, scale)?, global_segments(batch, block_size)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn block_count_is_ceiling() {
        assert_eq!(num_blocks(32, 16), 2);
        assert_eq!(num_blocks(33, 16), 3);
        assert_eq!(num_blocks(1, 16), 1);
    }

    #[test]
    fn identical_rows_sum_then_normalise() {
        let d = 3;
        let v = [0.5, -1.0, 2.0];
        let x = Tensor::<f64>::from_fn(&[8, d], |i| v[i % d]);
        let scale = Tensor::new(vec![d], vec![1.0, 2.0, 0.5]).unwrap();
        let batch = PackedBatch::single(vec![9; 8]);
        let (g, segs) = compute_global_tokens(&x, &batch, 4, &scale).unwrap();
        let kv = Tensor::new(vec![1, d], v.iter().map(|a| a * 4.0).collect()).unwrap();
        let want = ops::rms_norm(&kv, &scale).unwrap();
        assert_eq!(g.shape(), &[2, d]);
        assert!(g.row(0).iter().zip(want.data()).all(|(a, b)| (a - b).abs() < 1e-15));
        assert_eq!(segs, vec![1, 1]);
    }

    #[test]
    fn matches_direct_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let l = rng.gen_range(1..40);
            let k = rng.gen_range(1..9);
            let d = rng.gen_range(1..6);
            let x = Tensor::<f64>::from_fn(&[l, d], |_| rng.gen_range(-2.0..2.0));
            let scale = Tensor::<f64>::from_fn(&[d], |_| rng.gen_range(0.5..1.5));
            let batch = PackedBatch::single(vec![4; l]);
            let (g, _) = compute_global_tokens(&x, &batch, k, &scale).unwrap();
            for b in 0..l.div_ceil(k) {
                let mut sum = vec![0.0; d];
                for i in b * k..((b + 1) * k).min(l) {
                    for c in 0..d {
                        sum[c] += x.data()[i * d + c];
                    }
                }
                let ms = sum.iter().map(|v| v * v).sum::<f64>() / d as f64;
                let inv = 1.0 / (ms + 1e-6).sqrt();
                for c in 0..d {
                    let want = scale.data()[c] * sum[c] * inv;
                    assert!((g.data()[b * d + c] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dominant_segment_and_ties() {
        let b = PackedBatch::from_segments(vec![1; 8], vec![1, 2, 2, 2, 3, 3, 4, 4]).unwrap();
        assert_eq!(global_segments(&b, 4), vec![2, 3]);
        let b = PackedBatch::from_segments(vec![1; 8], vec![0, 0, 0, 0, 1, 1, 0, 0]).unwrap();
        assert_eq!(global_segments(&b, 4), vec![0, 1]);
    }

    #[test]
    fn all_padding_block_gives_zero_global() {
        let b = PackedBatch::from_segments(vec![1; 6], vec![1, 1, 1, 0, 0, 0]).unwrap();
        let x = Tensor::<f64>::ones(&[6, 2]);
        let (g, segs) = compute_global_tokens(&x, &b, 3, &Tensor::ones(&[2])).unwrap();
        assert_eq!(segs, vec![1, 0]);
        assert!(g.row(1).iter().all(|&v| v == 0.0));
    }
}
