//! Banded sliding-window attention, optionally extended with transient
//! global keys.
//!
//! Scores are kept in a band layout: query `i` owns `2r + 1` slots for keys
//! `i − r ..= i + r` (slot `s` ↔ key `i + s − r`), followed by one slot per
//! global token. Queries are walked in blocks of `r + 1`; every key a block
//! needs lies in that block or one of its two neighbours, so per-head work is
//! `O(l · r)` for the band and `O(l · l/k)` for the global columns, and no
//! `l × l` matrix is ever formed.

use std::cell::Cell;

use super::dense::{merge_head, split_head};
use super::global::num_blocks;
use super::{relative_position_bucket, AttentionConfig, PackedBatch};
use crate::numerics::memtrack::{note_kv_pairs, note_score_buffer};
use crate::numerics::ops::{dot, softmax_row_backward, softmax_row_in_place};
use crate::numerics::{Backward, Real, Tape, Tensor, Var};
use crate::{Error, Result};

thread_local! {
    static MASK_OFF_BY_ONE: Cell<bool> = const { Cell::new(false) };
}

/// Make the band kernels on this thread stop one key short of `i + r`.
/// Exists so the verification suites can show that they catch a broken mask.
#[doc(hidden)]
pub fn inject_mask_off_by_one(on: bool) {
    MASK_OFF_BY_ONE.with(|c| c.set(on));
}

#[derive(Clone)]
struct Geometry {
    len: usize,
    radius: usize,
    heads: usize,
    head_dim: usize,
    /// Bucket of each band slot.
    band_buckets: Vec<usize>,
    segments: Vec<u32>,
    globals: Option<GlobalGeometry>,
    /// Injected fault: drop the last band slot.
    short_band: bool,
}

#[derive(Clone)]
struct GlobalGeometry {
    count: usize,
    block_size: usize,
    segments: Vec<u32>,
    /// `[query block × global]` side-bias buckets.
    buckets: Vec<usize>,
}

impl Geometry {
    fn band_width(&self) -> usize {
        2 * self.radius + 1
    }

    fn row_width(&self) -> usize {
        self.band_width() + self.globals.as_ref().map_or(0, |g| g.count)
    }

    /// Key index of band slot `s` for query `i`, if inside the sequence and
    /// the query's segment.
    #[inline]
    fn band_key(&self, i: usize, s: usize) -> Option<usize> {
        if self.short_band && s == 2 * self.radius {
            return None;
        }
        let j = (i + s).checked_sub(self.radius)?;
        (j < self.len && self.segments[j] == self.segments[i]).then_some(j)
    }

    #[inline]
    fn global_allowed(&self, i: usize, g: usize) -> bool {
        self.globals
            .as_ref()
            .is_some_and(|gg| gg.segments[g] == self.segments[i])
    }
}

fn check_projection<T: Real>(tape: &Tape<T>, v: Var, rows: usize, cols: usize, what: &str) -> Result<()> {
    let t = tape.value(v);
    if t.shape() != [rows, cols] {
        return Err(Error::shape(
            "banded_attention",
            format!("{what} is {:?}, expected [{rows}, {cols}]", t.shape()),
        ));
    }
    Ok(())
}

fn geometry(batch: &PackedBatch, cfg: &AttentionConfig) -> Result<Geometry> {
    cfg.validate()?;
    let len = batch.len();
    if len == 0 {
        return Err(Error::Invalid("attention over an empty sequence".into()));
    }
    let radius = cfg.radius.min(len - 1);
    let band_buckets = (0..2 * radius + 1)
        .map(|s| relative_position_bucket(s as i64 - radius as i64, cfg.num_buckets, cfg.max_distance))
        .collect();
    Ok(Geometry {
        len,
        radius,
        heads: cfg.num_heads,
        head_dim: cfg.head_dim,
        band_buckets,
        segments: batch.segment_ids.clone(),
        globals: None,
        short_band: MASK_OFF_BY_ONE.with(Cell::get),
    })
}

/// Sliding-window attention of radius `cfg.radius` within packed segments,
/// with a token-to-token bias table `[heads × buckets]`.
///
/// `q`, `k`, `v` are `[l × heads·head_dim]` projections; returns the same shape.
pub fn local_attention_op<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    rel_bias: Var,
    batch: &PackedBatch,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let geo = geometry(batch, cfg)?;
    banded(tape, vec![q, k, v, rel_bias], geo)
}

/// Local attention plus attention to transient global tokens under one joint
/// softmax.
///
/// `kg`, `vg` are the key/value projections of the `g = ceil(l / k)` global
/// embeddings; `global_segment[j]` is the example owning global `j`. The side
/// bias for query `i` and global `j` is looked up at bucketed block distance
/// `j − ⌊i / k⌋`.
#[allow(clippy::too_many_arguments)]
pub fn tglobal_attention_op<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    kg: Var,
    vg: Var,
    rel_bias: Var,
    side_bias: Var,
    batch: &PackedBatch,
    global_segment: &[u32],
    cfg: &AttentionConfig,
) -> Result<Var> {
    let mut geo = geometry(batch, cfg)?;
    let count = num_blocks(geo.len, cfg.block_size);
    if global_segment.len() != count {
        return Err(Error::shape(
            "tglobal_attention",
            format!("{} global segments for {count} blocks", global_segment.len()),
        ));
    }
    let mut buckets = Vec::with_capacity(count * count);
    for qb in 0..count {
        for g in 0..count {
            buckets.push(relative_position_bucket(
                g as i64 - qb as i64,
                cfg.num_buckets,
                cfg.max_distance,
            ));
        }
    }
    geo.globals = Some(GlobalGeometry {
        count,
        block_size: cfg.block_size,
        segments: global_segment.to_vec(),
        buckets,
    });
    banded(tape, vec![q, k, v, kg, vg, rel_bias, side_bias], geo)
}

fn banded<T: Real>(tape: &mut Tape<T>, inputs: Vec<Var>, geo: Geometry) -> Result<Var> {
    let (l, heads, hd) = (geo.len, geo.heads, geo.head_dim);
    let dm = heads * hd;
    for (idx, what) in [(0, "q"), (1, "k"), (2, "v")] {
        check_projection(tape, inputs[idx], l, dm, what)?;
    }
    let table_idx = if geo.globals.is_some() { 5 } else { 3 };
    if let Some(gg) = &geo.globals {
        check_projection(tape, inputs[3], gg.count, dm, "global keys")?;
        check_projection(tape, inputs[4], gg.count, dm, "global values")?;
    }
    for t in &inputs[table_idx..] {
        let shape = tape.value(*t).shape();
        if shape.len() != 2 || shape[0] != heads {
            return Err(Error::shape("banded_attention", format!("bias table {shape:?}")));
        }
    }

    let band = geo.band_width();
    let width = geo.row_width();
    let block = geo.radius + 1;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut probs = vec![T::zero(); heads * l * width];
    let mut out = Tensor::zeros(&[l, dm]);
    let mut allowed = vec![false; width];

    for h in 0..heads {
        note_score_buffer(l * width);
        let qh = split_head(tape.value(inputs[0]), h, hd);
        let kh = split_head(tape.value(inputs[1]), h, hd);
        let vh = split_head(tape.value(inputs[2]), h, hd);
        let (kgh, vgh) = match &geo.globals {
            Some(_) => (
                split_head(tape.value(inputs[3]), h, hd),
                split_head(tape.value(inputs[4]), h, hd),
            ),
            None => (Vec::new(), Vec::new()),
        };
        let rel = tape.value(inputs[table_idx]).row(h);
        let side = geo.globals.as_ref().map(|_| tape.value(inputs[6]).row(h));
        let mut oh = vec![T::zero(); l * hd];

        for b in 0..l.div_ceil(block) {
            let (q_lo, q_hi) = (b * block, ((b + 1) * block).min(l));
            let (k_lo, k_hi) = (b.saturating_sub(1) * block, ((b + 2) * block).min(l));
            for i in q_lo..q_hi {
                if geo.segments[i] == 0 {
                    continue;
                }
                let row = &mut probs[(h * l + i) * width..(h * l + i + 1) * width];
                let qi = &qh[i * hd..(i + 1) * hd];
                for s in 0..band {
                    allowed[s] = false;
                    if let Some(j) = geo.band_key(i, s) {
                        debug_assert!(j >= k_lo && j < k_hi);
                        row[s] = dot(qi, &kh[j * hd..(j + 1) * hd]) * scale + rel[geo.band_buckets[s]];
                        allowed[s] = true;
                    }
                }
                if let (Some(gg), Some(side)) = (&geo.globals, side) {
                    let qb = i / gg.block_size;
                    for g in 0..gg.count {
                        let a = geo.global_allowed(i, g);
                        allowed[band + g] = a;
                        if a {
                            row[band + g] =
                                dot(qi, &kgh[g * hd..(g + 1) * hd]) * scale + side[gg.buckets[qb * gg.count + g]];
                        }
                    }
                }
                if h == 0 {
                    note_kv_pairs(allowed.iter().filter(|&&a| a).count() as u64);
                }
                softmax_row_in_place(row, |s| allowed[s]);
                let oi = &mut oh[i * hd..(i + 1) * hd];
                for s in 0..band {
                    if allowed[s] {
                        let j = i + s - geo.radius;
                        for (o, &vj) in oi.iter_mut().zip(&vh[j * hd..(j + 1) * hd]) {
                            *o += row[s] * vj;
                        }
                    }
                }
                for g in 0..width - band {
                    if allowed[band + g] {
                        for (o, &vj) in oi.iter_mut().zip(&vgh[g * hd..(g + 1) * hd]) {
                            *o += row[band + g] * vj;
                        }
                    }
                }
            }
        }
        merge_head(&mut out, &oh, h, hd);
    }
    let probs = Tensor::from_parts(vec![heads, l, width], probs);
    let name = if geo.globals.is_some() {
        "tglobal_attention"
    } else {
        "local_attention"
    };
    tape.push(
        out,
        inputs,
        Box::new(Banded {
            geo,
            probs,
            scale,
            name,
        }),
    )
}

struct Banded<T: Real> {
    geo: Geometry,
    probs: Tensor<T>,
    scale: T,
    name: &'static str,
}

impl<T: Real> Backward<T> for Banded<T> {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        wants: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let geo = &self.geo;
        let (l, hd) = (geo.len, geo.head_dim);
        let band = geo.band_width();
        let width = geo.row_width();
        let n_glob = width - band;
        let has_globals = geo.globals.is_some();
        let table_idx = if has_globals { 5 } else { 3 };

        let mut grads: Vec<Tensor<T>> = inputs.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut dp = vec![T::zero(); width];
        let mut ds = vec![T::zero(); width];

        for h in 0..geo.heads {
            let qh = split_head(inputs[0], h, hd);
            let kh = split_head(inputs[1], h, hd);
            let vh = split_head(inputs[2], h, hd);
            let gh = split_head(grad, h, hd);
            let (kgh, vgh) = if has_globals {
                (split_head(inputs[3], h, hd), split_head(inputs[4], h, hd))
            } else {
                (Vec::new(), Vec::new())
            };
            let mut dqh = vec![T::zero(); l * hd];
            let mut dkh = vec![T::zero(); l * hd];
            let mut dvh = vec![T::zero(); l * hd];
            let mut dkgh = vec![T::zero(); n_glob * hd];
            let mut dvgh = vec![T::zero(); n_glob * hd];
            let mut drel = vec![T::zero(); inputs[table_idx].last_dim()];
            let mut dside = vec![T::zero(); if has_globals { inputs[6].last_dim() } else { 0 }];

            for i in 0..l {
                if geo.segments[i] == 0 {
                    continue;
                }
                let p = &self.probs.data()[(h * l + i) * width..(h * l + i + 1) * width];
                let gi = &gh[i * hd..(i + 1) * hd];
                for s in 0..width {
                    dp[s] = T::zero();
                    if p[s] == T::zero() {
                        continue;
                    }
                    let (vrow, dvrow) = if s < band {
                        let j = i + s - geo.radius;
                        (&vh[j * hd..(j + 1) * hd], &mut dvh[j * hd..(j + 1) * hd])
                    } else {
                        let g = s - band;
                        (&vgh[g * hd..(g + 1) * hd], &mut dvgh[g * hd..(g + 1) * hd])
                    };
                    dp[s] = dot(gi, vrow);
                    for (o, &gv) in dvrow.iter_mut().zip(gi) {
                        *o += p[s] * gv;
                    }
                }
                softmax_row_backward(p, &dp, &mut ds);
                let qi = &qh[i * hd..(i + 1) * hd];
                let dqi = &mut dqh[i * hd..(i + 1) * hd];
                for s in 0..width {
                    if p[s] == T::zero() {
                        continue;
                    }
                    let d = ds[s];
                    let sd = d * self.scale;
                    let (krow, dkrow) = if s < band {
                        drel[geo.band_buckets[s]] += d;
                        let j = i + s - geo.radius;
                        (&kh[j * hd..(j + 1) * hd], &mut dkh[j * hd..(j + 1) * hd])
                    } else {
                        let g = s - band;
                        let gg = geo.globals.as_ref().expect("global slot without globals");
                        dside[gg.buckets[(i / gg.block_size) * gg.count + g]] += d;
                        (&kgh[g * hd..(g + 1) * hd], &mut dkgh[g * hd..(g + 1) * hd])
                    };
                    for c in 0..hd {
                        dqi[c] += sd * krow[c];
                        dkrow[c] += sd * qi[c];
                    }
                }
            }
            merge_head(&mut grads[0], &dqh, h, hd);
            merge_head(&mut grads[1], &dkh, h, hd);
            merge_head(&mut grads[2], &dvh, h, hd);
            if has_globals {
                merge_head(&mut grads[3], &dkgh, h, hd);
                merge_head(&mut grads[4], &dvgh, h, hd);
                grads[6].row_mut(h).copy_from_slice(&dside);
            }
            grads[table_idx].row_mut(h).copy_from_slice(&drel);
        }
        Ok(grads.into_iter().zip(wants).map(|(g, &w)| w.then_some(g)).collect())
    }
}
