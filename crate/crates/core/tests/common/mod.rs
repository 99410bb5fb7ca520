#![allow(dead_code)]

use rand::Rng;
use tglobal_core::{PackedBatch, Tensor};

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Random packing of `l` slots: segments of random length separated by
/// optional padding gaps, with trailing padding.
pub fn random_packing(rng: &mut impl Rng, l: usize) -> PackedBatch {
    let mut segs = Vec::with_capacity(l);
    let mut next = 1u32;
    while segs.len() < l {
        if rng.gen_bool(0.25) {
            let gap = rng.gen_range(1..=3).min(l - segs.len());
            segs.extend(std::iter::repeat_n(0, gap));
            continue;
        }
        let n = rng.gen_range(1..=l.max(2) / 2 + 1).min(l - segs.len());
        segs.extend(std::iter::repeat_n(next, n));
        next += 1;
    }
    let tokens = segs.iter().map(|&s| if s == 0 { 0 } else { 5 }).collect();
    PackedBatch::from_segments(tokens, segs).unwrap()
}

/// `[l × heads·hd]` → `[heads × l × hd]`.
pub fn per_head(t: &Tensor<f64>, heads: usize) -> Tensor<f64> {
    let (n, dm) = (t.rows(), t.last_dim());
    let hd = dm / heads;
    Tensor::from_fn(&[heads, n, hd], |idx| {
        let (h, rest) = (idx / (n * hd), idx % (n * hd));
        t.data()[(rest / hd) * dm + h * hd + rest % hd]
    })
}

/// `[heads × n × hd]` → `[n × heads·hd]`.
pub fn merge_heads(t: &Tensor<f64>) -> Tensor<f64> {
    let (h, n, hd) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    Tensor::from_fn(&[n, h * hd], |idx| {
        let (i, c) = (idx / (h * hd), idx % (h * hd));
        t.data()[((c / hd) * n + i) * hd + c % hd]
    })
}
