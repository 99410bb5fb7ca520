//! Forward kernels of the closed op set, plus the raw GEMM loops shared with
//! the attention kernels.

use super::{Real, Tensor};
use crate::{Error, Result};

/// Epsilon inside the RMS normaliser.
pub const RMS_EPS: f64 = 1e-6;

/// `c[m×n] += a[m×p] · b[p×n]`.
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, p: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in a[i * p..(i + 1) * p].iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×p] · b[n×p]ᵀ`.
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, p: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * p..(i + 1) * p];
        for j in 0..n {
            c[i * n + j] += dot(a_row, &b[j * p..(j + 1) * p]);
        }
    }
}

/// `c[m×n] += a[p×m]ᵀ · b[p×n]`.
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], p: usize, m: usize, n: usize) {
    for kk in 0..p {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * n..(kk + 1) * n];
        for (i, &aki) in a_row.iter().enumerate() {
            if aki == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aki * bv;
            }
        }
    }
}

/// Dot product with eight interleaved partial sums (lets the loop vectorise).
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn matrix_dims<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

/// Matrix product `[m×p] · [p×n] -> [m×n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, p) = matrix_dims(a, "matmul")?;
    let (p2, n) = matrix_dims(b, "matmul")?;
    if p != p2 {
        return Err(Error::shape(
            "matmul",
            format!("inner extents differ: [{m}×{p}] · [{p2}×{n}]"),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_nn(a.data(), b.data(), &mut out, m, p, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `a · bᵀ` for `a: [m×p]`, `b: [n×p]`.
pub(crate) fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, p) = (a.rows(), a.last_dim());
    let n = b.rows();
    let mut out = vec![T::zero(); m * n];
    gemm_nt(a.data(), b.data(), &mut out, m, p, n);
    Tensor::from_parts(vec![m, n], out)
}

/// `aᵀ · b` for `a: [p×m]`, `b: [p×n]`.
pub(crate) fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (p, m) = (a.rows(), a.last_dim());
    let n = b.last_dim();
    let mut out = vec![T::zero(); m * n];
    gemm_tn(a.data(), b.data(), &mut out, p, m, n);
    Tensor::from_parts(vec![m, n], out)
}

/// Result of [`softmax_masked`]. `dead_rows` lists rows with no allowed
/// entry; those rows are all zero and callers must treat them as padding.
#[derive(Debug, Clone)]
pub struct MaskedSoftmax<T: Real> {
    pub probs: Tensor<T>,
    pub dead_rows: Vec<usize>,
}

impl<T: Real> MaskedSoftmax<T> {
    pub fn has_dead_rows(&self) -> bool {
        !self.dead_rows.is_empty()
    }
}

/// Softmax over one row in place, restricted to `allowed`. Returns `false`
/// for a dead row (no allowed entry), which is left all zero.
pub(crate) fn softmax_row_in_place<T: Real>(row: &mut [T], allowed: impl Fn(usize) -> bool) -> bool {
    let mut max = T::neg_infinity();
    for (j, &x) in row.iter().enumerate() {
        if allowed(j) && x > max {
            max = x;
        }
    }
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|x| *x = T::zero());
        return false;
    }
    let mut sum = T::zero();
    for (j, x) in row.iter_mut().enumerate() {
        if allowed(j) {
            *x = (*x - max).exp();
            sum += *x;
        } else {
            *x = T::zero();
        }
    }
    let inv = sum.recip();
    row.iter_mut().for_each(|x| *x *= inv);
    true
}

/// Row-wise softmax over the last axis, with masked-out entries at exactly 0.
pub fn softmax_masked<T: Real>(logits: &Tensor<T>, mask: &[bool]) -> Result<MaskedSoftmax<T>> {
    if mask.len() != logits.len() {
        return Err(Error::shape(
            "softmax_masked",
            format!("mask has {} entries, logits {}", mask.len(), logits.len()),
        ));
    }
    let n = logits.last_dim();
    let mut probs = logits.clone();
    let mut dead_rows = Vec::new();
    for r in 0..logits.rows() {
        let m = &mask[r * n..(r + 1) * n];
        if !softmax_row_in_place(probs.row_mut(r), |j| m[j]) {
            dead_rows.push(r);
        }
    }
    if !probs.all_finite() {
        return Err(Error::NonFinite { op: "softmax_masked" });
    }
    Ok(MaskedSoftmax { probs, dead_rows })
}

/// Given softmax output `p` and upstream gradient `dp` for one row, write the
/// logit gradient `p ⊙ (dp − Σ p·dp)` into `out`.
#[inline]
pub(crate) fn softmax_row_backward<T: Real>(p: &[T], dp: &[T], out: &mut [T]) {
    let inner = dot(p, dp);
    for ((o, &pj), &dpj) in out.iter_mut().zip(p).zip(dp) {
        *o = pj * (dpj - inner);
    }
}

/// T5-style RMS normalisation over the last axis: `scale ⊙ x / sqrt(mean(x²) + ε)`.
/// No mean subtraction, no additive bias.
pub fn rms_norm<T: Real>(x: &Tensor<T>, scale: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if d == 0 || scale.len() != d {
        return Err(Error::shape(
            "rms_norm",
            format!("last axis {d} vs scale of {} values", scale.len()),
        ));
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        let inv = rms_inverse(x.row(r));
        for ((o, &xi), &s) in out.row_mut(r).iter_mut().zip(x.row(r)).zip(scale.data()) {
            *o = s * xi * inv;
        }
    }
    Ok(out)
}

#[inline]
pub(crate) fn rms_inverse<T: Real>(row: &[T]) -> T {
    let d = T::of(row.len() as f64);
    let ms = row.iter().map(|&v| v * v).sum::<T>() / d;
    (ms + T::of(RMS_EPS)).sqrt().recip()
}

/// Mean token-level negative log-likelihood over positions whose target is
/// not `pad_id`.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[u32], pad_id: u32) -> Result<T> {
    let (probs, count) = cross_entropy_parts(logits, targets, pad_id)?;
    let v = logits.last_dim();
    let mut total = T::zero();
    for (i, &t) in targets.iter().enumerate() {
        if t != pad_id {
            total -= probs[i * v + t as usize].1;
        }
    }
    Ok(total / T::of(count as f64))
}

/// Per-row log-softmax; returns `(prob, log_prob)` pairs and the number of
/// non-pad rows.
pub(crate) fn cross_entropy_parts<T: Real>(
    logits: &Tensor<T>,
    targets: &[u32],
    pad_id: u32,
) -> Result<(Vec<(T, T)>, usize)> {
    let v = logits.last_dim();
    if logits.ndim() != 2 || logits.rows() != targets.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {:?} vs {} targets", logits.shape(), targets.len()),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= v) {
        return Err(Error::UnknownToken { id: bad, vocab: v });
    }
    let count = targets.iter().filter(|&&t| t != pad_id).count();
    if count == 0 {
        return Err(Error::AllPadding);
    }
    let mut out = Vec::with_capacity(logits.len());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
        out.extend(row.iter().map(|&z| ((z - lse).exp(), z - lse)));
    }
    Ok((out, count))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul_returns_operand() {
        let b = Tensor::<f64>::from_fn(&[3, 4], |i| i as f64 * 0.5 - 1.0);
        let out = matmul(&Tensor::eye(3), &b).unwrap();
        assert_eq!(out, b);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::<f64>::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::<f64>::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.item(), 11.0);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn transposed_products_agree_with_plain() {
        let a = Tensor::<f64>::from_fn(&[4, 3], |i| (i as f64).sin());
        let b = Tensor::<f64>::from_fn(&[5, 3], |i| (i as f64 * 0.7).cos());
        let nt = matmul_nt(&a, &b);
        let bt = Tensor::from_fn(&[3, 5], |idx| b.data()[(idx % 5) * 3 + idx / 5]);
        assert!(nt.max_abs_diff(&matmul(&a, &bt).unwrap()) < 1e-15);
        let at = Tensor::from_fn(&[3, 4], |idx| a.data()[(idx % 4) * 3 + idx / 4]);
        let c = Tensor::<f64>::from_fn(&[4, 2], |i| i as f64);
        let tn = matmul_tn(&a, &c);
        assert!(tn.max_abs_diff(&matmul(&at, &c).unwrap()) < 1e-15);
    }

    #[test]
    fn softmax_uniform_and_single_allowed() {
        let x = Tensor::<f64>::zeros(&[1, 3]);
        let s = softmax_masked(&x, &[true; 3]).unwrap();
        for &p in s.probs.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = Tensor::<f64>::from_rows(&[vec![5.0, -1e9]]).unwrap();
        let s = softmax_masked(&x, &[true, false]).unwrap();
        assert_eq!(s.probs.data(), &[1.0, 0.0]);
        assert!(!s.has_dead_rows());
    }

    #[test]
    fn dead_row_is_zero_and_flagged() {
        let x = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let s = softmax_masked(&x, &[false, false, true, true]).unwrap();
        assert_eq!(s.dead_rows, vec![0]);
        assert_eq!(&s.probs.data()[..2], &[0.0, 0.0]);
        assert!((s.probs.data()[2] + s.probs.data()[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rms_norm_of_zeros_is_zero() {
        let x = Tensor::<f64>::zeros(&[2, 4]);
        let out = rms_norm(&x, &Tensor::ones(&[4])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rms_norm_unit_scale_gives_unit_rms() {
        let x = Tensor::<f64>::from_rows(&[vec![3.0, -4.0, 12.0, 0.5]]).unwrap();
        let out = rms_norm(&x, &Tensor::ones(&[4])).unwrap();
        let rms = (out.data().iter().map(|v| v * v).sum::<f64>() / 4.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-7);
    }

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let logits = Tensor::<f64>::zeros(&[3, 4]);
        let loss = cross_entropy(&logits, &[1, 2, 3], 0).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn peaked_logits_give_vanishing_loss() {
        let targets = [2u32, 3, 1];
        let logits = Tensor::<f64>::from_fn(&[3, 4], |i| if (i % 4) as u32 == targets[i / 4] { 60.0 } else { 0.0 });
        assert!(cross_entropy(&logits, &targets, 0).unwrap() < 1e-20);
    }

    #[test]
    fn cross_entropy_errors() {
        let logits = Tensor::<f64>::zeros(&[2, 4]);
        assert!(matches!(cross_entropy(&logits, &[0, 0], 0), Err(Error::AllPadding)));
        assert!(matches!(
            cross_entropy(&logits, &[1, 9], 0),
            Err(Error::UnknownToken { id: 9, .. })
        ));
    }
}
