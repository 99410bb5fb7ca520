//! Full masked attention: the O(n²) oracle and its differentiable fused op.

use super::AttentionMask;
use crate::numerics::memtrack::{note_kv_pairs, note_score_buffer as memtrack_note_scores};
use crate::numerics::ops::{self, dot, softmax_row_backward, softmax_row_in_place};
use crate::numerics::{Backward, Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// Copy the columns of head `h` out of a `[n × heads·hd]` matrix.
pub(super) fn split_head<T: Real>(x: &Tensor<T>, h: usize, hd: usize) -> Vec<T> {
    let n = x.rows();
    let mut out = Vec::with_capacity(n * hd);
    for i in 0..n {
        out.extend_from_slice(&x.row(i)[h * hd..(h + 1) * hd]);
    }
    out
}

/// Add a contiguous `[n × hd]` head block into columns of `dst`.
pub(super) fn merge_head<T: Real>(dst: &mut Tensor<T>, src: &[T], h: usize, hd: usize) {
    for i in 0..dst.rows() {
        for (o, &s) in dst.row_mut(i)[h * hd..(h + 1) * hd]
            .iter_mut()
            .zip(&src[i * hd..(i + 1) * hd])
        {
            *o += s;
        }
    }
}

/// Head `h` of a `[n × heads·hd]` matrix, transposed to `[hd × n]`.
fn split_head_t<T: Real>(x: &Tensor<T>, h: usize, hd: usize) -> Vec<T> {
    let n = x.rows();
    let mut out = vec![T::zero(); n * hd];
    for i in 0..n {
        for (c, &v) in x.row(i)[h * hd..(h + 1) * hd].iter().enumerate() {
            out[c * n + i] = v;
        }
    }
    out
}

/// Add a transposed `[hd × n]` head block into columns of `dst`.
fn merge_head_t<T: Real>(dst: &mut Tensor<T>, src: &[T], h: usize, hd: usize) {
    let n = dst.rows();
    for i in 0..n {
        for (c, o) in dst.row_mut(i)[h * hd..(h + 1) * hd].iter_mut().enumerate() {
            *o += src[c * n + i];
        }
    }
}

#[inline]
fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Reference attention over explicit per-head tensors:
/// `softmax_masked(q·kᵀ/√d + bias, mask) · v` for every head.
///
/// `q: [h × n_q × d]`, `k: [h × n_k × d]`, `v: [h × n_k × d_v]`,
/// `bias: [h × n_q × n_k]`. Query rows with no allowed key produce zeros.
pub fn dense_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    mask: &AttentionMask,
) -> Result<Tensor<T>> {
    let (&[h, nq, d], &[h2, nk, d2], &[h3, nk2, dv]) = (q.shape(), k.shape(), v.shape()) else {
        return Err(Error::shape("dense_attention", "q, k, v must be rank 3"));
    };
    if h != h2 || h != h3 || d != d2 || nk != nk2 || mask.rows != nq || mask.cols != nk {
        return Err(Error::shape(
            "dense_attention",
            format!(
                "q {:?}, k {:?}, v {:?}, mask {}×{}",
                q.shape(),
                k.shape(),
                v.shape(),
                mask.rows,
                mask.cols
            ),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [h, nq, nk] {
            return Err(Error::shape("dense_attention", format!("bias {:?}", b.shape())));
        }
    }
    let scale = T::of(1.0 / (d as f64).sqrt());
    let mut out = Vec::with_capacity(h * nq * dv);
    for head in 0..h {
        let qh = Tensor::new(vec![nq, d], q.data()[head * nq * d..(head + 1) * nq * d].to_vec())?;
        let kh = Tensor::new(vec![nk, d], k.data()[head * nk * d..(head + 1) * nk * d].to_vec())?;
        let vh = Tensor::new(vec![nk, dv], v.data()[head * nk * dv..(head + 1) * nk * dv].to_vec())?;
        let mut logits = ops::matmul_nt(&qh, &kh).map(|x| x * scale);
        if let Some(b) = bias {
            let bh = &b.data()[head * nq * nk..(head + 1) * nq * nk];
            for (l, &bb) in logits.data_mut().iter_mut().zip(bh) {
                *l += bb;
            }
        }
        let probs = ops::softmax_masked(&logits, &mask.allowed)?.probs;
        out.extend(ops::matmul(&probs, &vh)?.into_data());
    }
    Tensor::new(vec![h, nq, dv], out)
}

/// Which table and bucket a dense bias entry reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BiasIndex {
    pub table: u8,
    pub bucket: u16,
}

/// Expand `[heads × buckets]` tables into a dense `[heads × n_q × n_k]` bias,
/// entry `(i, j)` reading `tables[index.table][head, index.bucket]`.
pub fn gather_bias<T: Real>(
    tape: &mut Tape<T>,
    tables: &[Var],
    index: Vec<BiasIndex>,
    n_q: usize,
    n_k: usize,
) -> Result<Var> {
    if index.len() != n_q * n_k || tables.is_empty() {
        return Err(Error::shape("gather_bias", "index size or table list"));
    }
    let heads = tape.value(tables[0]).rows();
    if tables.iter().any(|t| tape.value(*t).rows() != heads) {
        return Err(Error::shape("gather_bias", "tables disagree on head count"));
    }
    let mut data = Vec::with_capacity(heads * n_q * n_k);
    for h in 0..heads {
        let rows: Vec<&[T]> = tables.iter().map(|t| tape.value(*t).row(h)).collect();
        data.extend(index.iter().map(|ix| rows[ix.table as usize][ix.bucket as usize]));
    }
    let out = Tensor::from_parts(vec![heads, n_q, n_k], data);
    tape.push(out, tables.to_vec(), Box::new(GatherBias { index }))
}

struct GatherBias {
    index: Vec<BiasIndex>,
}

impl<T: Real> Backward<T> for GatherBias {
    fn name(&self) -> &'static str {
        "gather_bias"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        wants: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let mut out: Vec<Option<Tensor<T>>> = inputs
            .iter()
            .zip(wants)
            .map(|(t, &w)| w.then(|| Tensor::zeros(t.shape())))
            .collect();
        let per_head = self.index.len();
        let heads = inputs[0].rows();
        for h in 0..heads {
            let g = &grad.data()[h * per_head..(h + 1) * per_head];
            for (ix, &gv) in self.index.iter().zip(g) {
                if let Some(t) = out[ix.table as usize].as_mut() {
                    t.row_mut(h)[ix.bucket as usize] += gv;
                }
            }
        }
        Ok(out)
    }
}

/// Multi-head dense attention on the tape.
///
/// `q: [n_q × heads·hd]`, `k`, `v: [n_k × heads·hd]`; `bias` (if any) is
/// `[heads × n_q × n_k]`. Returns `[n_q × heads·hd]`; dead query rows are zero.
pub fn dense_attention_op<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
    mask: &AttentionMask,
    num_heads: usize,
) -> Result<Var> {
    let (qv, kv, vv) = (tape.value(q), tape.value(k), tape.value(v));
    let (nq, nk, dm) = (qv.rows(), kv.rows(), qv.last_dim());
    if kv.last_dim() != dm || vv.last_dim() != dm || vv.rows() != nk || dm % num_heads != 0 {
        return Err(Error::shape(
            "dense_attention_op",
            format!(
                "q {:?}, k {:?}, v {:?}, heads {num_heads}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            ),
        ));
    }
    if mask.rows != nq || mask.cols != nk {
        return Err(Error::shape("dense_attention_op", "mask extent"));
    }
    if let Some(b) = bias {
        if tape.value(b).shape() != [num_heads, nq, nk] {
            return Err(Error::shape(
                "dense_attention_op",
                format!("bias {:?}", tape.value(b).shape()),
            ));
        }
    }
    let hd = dm / num_heads;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut probs = vec![T::zero(); num_heads * nq * nk];
    let mut out = Tensor::zeros(&[nq, dm]);
    for h in 0..num_heads {
        memtrack_note_scores(nq * nk);
        let (qh, kt, vt) = (split_head(qv, h, hd), split_head_t(kv, h, hd), split_head_t(vv, h, hd));
        let ph = &mut probs[h * nq * nk..(h + 1) * nq * nk];
        let mut oh = vec![T::zero(); nq * hd];
        for i in 0..nq {
            let row = &mut ph[i * nk..(i + 1) * nk];
            let allowed = &mask.allowed[i * nk..(i + 1) * nk];
            if h == 0 {
                note_kv_pairs(allowed.iter().filter(|&&a| a).count() as u64);
            }
            if !allowed.iter().any(|&a| a) {
                continue;
            }
            for (c, &qc) in qh[i * hd..(i + 1) * hd].iter().enumerate() {
                axpy(qc * scale, &kt[c * nk..(c + 1) * nk], row);
            }
            if let Some(b) = bias {
                let bh = &tape.value(b).data()[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                row.iter_mut().zip(bh).for_each(|(r, &bv)| *r += bv);
            }
            softmax_row_in_place(row, |j| allowed[j]);
            for (c, o) in oh[i * hd..(i + 1) * hd].iter_mut().enumerate() {
                *o = dot(row, &vt[c * nk..(c + 1) * nk]);
            }
        }
        merge_head(&mut out, &oh, h, hd);
    }
    let probs = Tensor::from_parts(vec![num_heads, nq, nk], probs);
    let mut inputs = vec![q, k, v];
    inputs.extend(bias);
    tape.push(
        out,
        inputs,
        Box::new(DenseAttention {
            probs,
            num_heads,
            scale,
        }),
    )
}

struct DenseAttention<T: Real> {
    probs: Tensor<T>,
    num_heads: usize,
    scale: T,
}

impl<T: Real> Backward<T> for DenseAttention<T> {
    fn name(&self) -> &'static str {
        "dense_attention"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        wants: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let (nq, nk, dm) = (q.rows(), k.rows(), q.last_dim());
        let hd = dm / self.num_heads;
        let mut dq = Tensor::zeros(q.shape());
        let mut dk = Tensor::zeros(k.shape());
        let mut dv = Tensor::zeros(v.shape());
        let mut dbias = (inputs.len() > 3 && wants[3]).then(|| Tensor::zeros(inputs[3].shape()));
        let mut dp = vec![T::zero(); nk];
        let mut ds = vec![T::zero(); nk];
        for h in 0..self.num_heads {
            let (qh, kt, vt, gh) = (
                split_head(q, h, hd),
                split_head_t(k, h, hd),
                split_head_t(v, h, hd),
                split_head(grad, h, hd),
            );
            let mut dqh = vec![T::zero(); nq * hd];
            let mut dkt = vec![T::zero(); nk * hd];
            let mut dvt = vec![T::zero(); nk * hd];
            for i in 0..nq {
                let p = &self.probs.data()[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                if p.iter().all(|&x| x == T::zero()) {
                    continue;
                }
                let gi = &gh[i * hd..(i + 1) * hd];
                dp.iter_mut().for_each(|x| *x = T::zero());
                for (c, &g) in gi.iter().enumerate() {
                    axpy(g, &vt[c * nk..(c + 1) * nk], &mut dp);
                    axpy(g, p, &mut dvt[c * nk..(c + 1) * nk]);
                }
                softmax_row_backward(p, &dp, &mut ds);
                if let Some(db) = dbias.as_mut() {
                    db.data_mut()[(h * nq + i) * nk..(h * nq + i + 1) * nk].copy_from_slice(&ds);
                }
                ds.iter_mut().for_each(|x| *x *= self.scale);
                let qi = &qh[i * hd..(i + 1) * hd];
                for (c, (dq, &qc)) in dqh[i * hd..(i + 1) * hd].iter_mut().zip(qi).enumerate() {
                    *dq = dot(&ds, &kt[c * nk..(c + 1) * nk]);
                    axpy(qc, &ds, &mut dkt[c * nk..(c + 1) * nk]);
                }
            }
            merge_head(&mut dq, &dqh, h, hd);
            merge_head_t(&mut dk, &dkt, h, hd);
            merge_head_t(&mut dv, &dvt, h, hd);
        }
        let mut out = vec![wants[0].then_some(dq), wants[1].then_some(dk), wants[2].then_some(dv)];
        if inputs.len() > 3 {
            out.push(dbias);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::build_local_mask;
    use crate::attention::PackedBatch;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = rand_tensor(&mut rng, &[2, 3, 4]);
        let k = rand_tensor(&mut rng, &[2, 1, 4]);
        let v = rand_tensor(&mut rng, &[2, 1, 4]);
        let mask = AttentionMask::from_fn(3, 1, |_, _| true);
        let out = dense_attention(&q, &k, &v, None, &mask).unwrap();
        for h in 0..2 {
            for i in 0..3 {
                for c in 0..4 {
                    assert!((out.data()[(h * 3 + i) * 4 + c] - v.data()[h * 4 + c]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn uniform_scores_average_allowed_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = Tensor::<f64>::zeros(&[1, 4, 3]);
        let k = rand_tensor(&mut rng, &[1, 4, 3]);
        let v = rand_tensor(&mut rng, &[1, 4, 3]);
        let mask = build_local_mask(&PackedBatch::single(vec![1; 4]), 1);
        let out = dense_attention(&q, &k, &v, None, &mask).unwrap();
        for i in 0..4usize {
            let keys: Vec<usize> = (0..4).filter(|&j| i.abs_diff(j) <= 1).collect();
            for c in 0..3 {
                let mean = keys.iter().map(|&j| v.data()[j * 3 + c]).sum::<f64>() / keys.len() as f64;
                assert!((out.data()[i * 3 + c] - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn fused_op_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, hd, nq, nk) = (3, 4, 7, 9);
        let q = rand_tensor(&mut rng, &[nq, h * hd]);
        let k = rand_tensor(&mut rng, &[nk, h * hd]);
        let v = rand_tensor(&mut rng, &[nk, h * hd]);
        let bias = rand_tensor(&mut rng, &[h, nq, nk]);
        let mask = AttentionMask::from_fn(nq, nk, |i, j| (i * 7 + j * 3) % 5 != 0 && i != 4);
        let mut tape = Tape::new();
        let vars: Vec<Var> = [&q, &k, &v, &bias].iter().map(|t| tape.input((*t).clone())).collect();
        let out = dense_attention_op(&mut tape, vars[0], vars[1], vars[2], Some(vars[3]), &mask, h).unwrap();
        let per_head = |t: &Tensor<f64>, n: usize| {
            Tensor::from_fn(&[h, n, hd], |idx| {
                let (hh, rest) = (idx / (n * hd), idx % (n * hd));
                t.data()[(rest / hd) * h * hd + hh * hd + rest % hd]
            })
        };
        let want = dense_attention(
            &per_head(&q, nq),
            &per_head(&k, nk),
            &per_head(&v, nk),
            Some(&bias),
            &mask,
        )
        .unwrap();
        let got = per_head(tape.value(out), nq);
        assert!(got.max_abs_diff(&want) < 1e-14);
        assert!(tape.value(out).row(4).iter().all(|&x| x == 0.0));
    }
}
