//! Reverse-mode tape over a closed set of differentiable ops.
//!
//! Forward ops append a node holding their output and whatever they saved
//! for the backward pass. [`Tape::backward`] walks the nodes in reverse and
//! returns gradients for every leaf registered with [`Tape::param`] or
//! [`Tape::input`]. Constants never receive gradients.

use rand::Rng;

use super::ops::{self, cross_entropy_parts, softmax_row_backward};
use super::{Real, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded op.
///
/// `inputs` are the values of the op's input nodes in recorded order and
/// `wants[i]` tells whether input `i` needs a gradient. Returned vector must
/// have one entry per input.
pub trait Backward<T: Real> {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        wants: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Node<T: Real> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

pub struct Tape<T: Real = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient (masks, fixed inputs).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A trainable parameter.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A differentiable input (e.g. activations fed to a layer under test).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record an op output. Fails if the output holds a NaN or infinity.
    pub fn push(&mut self, value: Tensor<T>, inputs: Vec<Var>, op: Box<dyn Backward<T>>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs,
            op: requires_grad.then_some(op),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else {
                continue;
            };
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| self.value(*v)).collect();
            let wants: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = op.backward(&g, &inputs, &node.value, &wants)?;
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
            for (v, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { grads })
    }

    // ---- closed op set -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        self.push(out, vec![a, b], Box::new(MatMul))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", x.shape(), y.shape())));
        }
        let mut out = x.clone();
        out.add_assign(y);
        self.push(out, vec![a, b], Box::new(Add))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("mul", format!("{:?} * {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, vec![a, b], Box::new(Mul))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, vec![a], Box::new(Scale(c)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(out, vec![a], Box::new(Relu))
    }

    /// Zero the rows of `a` whose entry in `keep` is false.
    pub fn mask_rows(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let x = self.value(a);
        if keep.len() != x.rows() {
            return Err(Error::shape(
                "mask_rows",
                format!("{} flags for {} rows", keep.len(), x.rows()),
            ));
        }
        let mut out = x.clone();
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                out.row_mut(r).iter_mut().for_each(|v| *v = T::zero());
            }
        }
        self.push(out, vec![a], Box::new(MaskRows(keep.to_vec())))
    }

    /// Inverted dropout. A rate of zero records nothing and returns `a`.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(a);
        }
        if rate >= 1.0 {
            return Err(Error::Invalid(format!("dropout rate {rate} must be < 1")));
        }
        let keep_scale = T::of(1.0 / (1.0 - rate));
        let x = self.value(a);
        let factors: Vec<T> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep_scale })
            .collect();
        let data = x.data().iter().zip(&factors).map(|(&v, &f)| v * f).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, vec![a], Box::new(Dropout(factors)))
    }

    /// Row-wise masked softmax. Dead rows (no allowed entry) come back as
    /// zeros; their indices are returned alongside the node.
    pub fn softmax_masked(&mut self, a: Var, mask: &[bool]) -> Result<(Var, Vec<usize>)> {
        let s = ops::softmax_masked(self.value(a), mask)?;
        let v = self.push(s.probs, vec![a], Box::new(SoftmaxMasked))?;
        Ok((v, s.dead_rows))
    }

    pub fn rms_norm(&mut self, x: Var, scale: Var) -> Result<Var> {
        let out = ops::rms_norm(self.value(x), self.value(scale))?;
        self.push(out, vec![x, scale], Box::new(RmsNorm))
    }

    /// Gather rows of `table` (`[vocab × d]`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, d) = (t.rows(), t.last_dim());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::UnknownToken { id, vocab });
            }
            data.extend_from_slice(t.row(id as usize));
        }
        let out = Tensor::from_parts(vec![ids.len(), d], data);
        self.push(out, vec![table], Box::new(Embedding(ids.to_vec())))
    }

    /// Mean NLL over non-pad targets; see [`ops::cross_entropy`].
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], pad_id: u32) -> Result<Var> {
        let (parts, count) = cross_entropy_parts(self.value(logits), targets, pad_id)?;
        let v = self.value(logits).last_dim();
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            if t != pad_id {
                total -= parts[i * v + t as usize].1;
            }
        }
        let n = T::of(count as f64);
        let probs = parts.into_iter().map(|(p, _)| p).collect();
        let op = CrossEntropy {
            probs,
            targets: targets.to_vec(),
            pad_id,
            inv_count: n.recip(),
        };
        self.push(Tensor::scalar(total / n), vec![logits], Box::new(op))
    }

    /// Stack `a: [m × d]` on top of `b: [n × d]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.ndim() != 2 || y.ndim() != 2 || x.last_dim() != y.last_dim() {
            return Err(Error::shape(
                "concat_rows",
                format!("{:?} on {:?}", x.shape(), y.shape()),
            ));
        }
        let mut data = x.data().to_vec();
        data.extend_from_slice(y.data());
        let out = Tensor::from_parts(vec![x.rows() + y.rows(), x.last_dim()], data);
        let split = x.len();
        self.push(out, vec![a, b], Box::new(ConcatRows(split)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), vec![a], Box::new(Sum))
    }

    /// Mean of squared entries; a convenient scalar loss for layer tests.
    pub fn mean_square(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let n = T::of(x.len().max(1) as f64);
        let s = x.data().iter().map(|&v| v * v).sum::<T>() / n;
        self.push(Tensor::scalar(s), vec![a], Box::new(MeanSquare))
    }

    /// `Σ x ⊙ w` for a constant weight tensor `w`; a generic random-projection
    /// loss used by gradient checks.
    pub fn weighted_sum(&mut self, a: Var, weights: &Tensor<T>) -> Result<Var> {
        let x = self.value(a);
        if x.len() != weights.len() {
            return Err(Error::shape("weighted_sum", "weight count differs"));
        }
        let s = ops::dot(x.data(), weights.data());
        self.push(Tensor::scalar(s), vec![a], Box::new(WeightedSum(weights.clone())))
    }
}

fn scaled<T: Real>(t: &Tensor<T>, c: T) -> Tensor<T> {
    t.map(|x| x * c)
}

fn scalar_grad<T: Real>(grad: &Tensor<T>) -> T {
    grad.item()
}

struct MatMul;

impl<T: Real> Backward<T> for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        wants: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let da = wants[0].then(|| ops::matmul_nt(grad, b));
        let db = wants[1].then(|| ops::matmul_tn(a, grad));
        Ok(vec![da, db])
    }
}

struct Add;

impl<T: Real> Backward<T> for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        wants: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(wants.iter().map(|&w| w.then(|| grad.clone())).collect())
    }
}

struct Mul;

impl<T: Real> Backward<T> for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        wants: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let prod = |other: &Tensor<T>| {
            let data = grad.data().iter().zip(other.data()).map(|(&g, &o)| g * o).collect();
            Tensor::from_parts(grad.shape().to_vec(), data)
        };
        Ok(vec![
            wants[0].then(|| prod(inputs[1])),
            wants[1].then(|| prod(inputs[0])),
        ])
    }
}

struct Scale<T>(T);

impl<T: Real> Backward<T> for Scale<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        _wants: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(scaled(grad, self.0))])
    }
}

struct Relu;

impl<T: Real> Backward<T> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        _wants: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let data = grad
            .data()
            .iter()
            .zip(inputs[0].data())
            .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
            .collect();
        Ok(vec![Some(Tensor::from_parts(grad.shape().to_vec(), data))])
    }
}

struct MaskRows(Vec<bool>);

impl<T: Real> Backward<T> for MaskRows {
    fn name(&self) -> &'static str {
        "mask_rows"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        _wants: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let mut g = grad.clone();
        for (r, &k) in self.0.iter().enumerate() {
            if !k {
                g.row_mut(r).iter_mut().for_each(|v| *v = T::zero());
            }
        }
        Ok(vec![Some(g)])
    }
}

struct Dropout<T>(Vec<T>);

impl<T: Real> Backward<T> for Dropout<T> {
    fn name(&self) -> &'static str {
        "dropout"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        _wants: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let data = grad.data().iter().zip(&self.0).map(|(&g, &f)| g * f).collect();
        Ok(vec![Some(Tensor::from_parts(grad.shape().to_vec(), data))])
    }
}

struct SoftmaxMasked;

impl<T: Real> Backward<T> for SoftmaxMasked {
    fn name(&self) -> &'static str {
        "softmax_masked"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        _wants: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let mut dx = Tensor::zeros(grad.shape());
        for r in 0..grad.rows() {
            softmax_row_backward(output.row(r), grad.row(r), dx.row_mut(r));
        }
        Ok(vec![Some(dx)])
    }
}

struct RmsNorm;

impl<T: Real> Backward<T> for RmsNorm {
    fn name(&self) -> &'static str {
        "rms_norm"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        wants: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, scale) = (inputs[0], inputs[1]);
        let d = x.last_dim();
        let dn = T::of(d as f64);
        let mut dx = wants[0].then(|| Tensor::zeros(x.shape()));
        let mut ds = wants[1].then(|| Tensor::zeros(scale.shape()));
        for r in 0..x.rows() {
            let (xr, gr) = (x.row(r), grad.row(r));
            let inv = ops::rms_inverse(xr);
            if let Some(ds) = ds.as_mut() {
                for ((s, &xi), &gi) in ds.data_mut().iter_mut().zip(xr).zip(gr) {
                    *s += gi * xi * inv;
                }
            }
            if let Some(dx) = dx.as_mut() {
                // g = scale ⊙ dy; dx = inv·g − x·inv³·(g·x)/d
                let gx: T = (0..d).map(|j| scale.data()[j] * gr[j] * xr[j]).sum();
                let coef = inv * inv * inv * gx / dn;
                for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                    *o = inv * scale.data()[j] * gr[j] - xr[j] * coef;
                }
            }
        }
        Ok(vec![dx, ds])
    }
}

struct Embedding(Vec<u32>);

impl<T: Real> Backward<T> for Embedding {
    fn name(&self) -> &'static str {
        "embedding"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        _wants: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let mut dt = Tensor::zeros(inputs[0].shape());
        for (r, &id) in self.0.iter().enumerate() {
            for (o, &g) in dt.row_mut(id as usize).iter_mut().zip(grad.row(r)) {
                *o += g;
            }
        }
        Ok(vec![Some(dt)])
    }
}

struct CrossEntropy<T> {
    probs: Vec<T>,
    targets: Vec<u32>,
    pad_id: u32,
    inv_count: T,
}

impl<T: Real> Backward<T> for CrossEntropy<T> {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        _wants: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let logits = inputs[0];
        let v = logits.last_dim();
        let c = scalar_grad(grad) * self.inv_count;
        let mut dl = Tensor::zeros(logits.shape());
        for (r, &t) in self.targets.iter().enumerate() {
            if t == self.pad_id {
                continue;
            }
            let row = dl.row_mut(r);
            for (j, o) in row.iter_mut().enumerate() {
                *o = c * self.probs[r * v + j];
            }
            row[t as usize] -= c;
        }
        Ok(vec![Some(dl)])
    }
}

struct ConcatRows(usize);

impl<T: Real> Backward<T> for ConcatRows {
    fn name(&self) -> &'static str {
        "concat_rows"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        wants: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (head, tail) = grad.data().split_at(self.0);
        Ok(vec![
            wants[0].then(|| Tensor::from_parts(inputs[0].shape().to_vec(), head.to_vec())),
            wants[1].then(|| Tensor::from_parts(inputs[1].shape().to_vec(), tail.to_vec())),
        ])
    }
}

struct Sum;

impl<T: Real> Backward<T> for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        _wants: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(Tensor::full(inputs[0].shape(), scalar_grad(grad)))])
    }
}

struct MeanSquare;

impl<T: Real> Backward<T> for MeanSquare {
    fn name(&self) -> &'static str {
        "mean_square"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        _wants: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let x = inputs[0];
        let c = scalar_grad(grad) * T::of(2.0) / T::of(x.len().max(1) as f64);
        Ok(vec![Some(scaled(x, c))])
    }
}

struct WeightedSum<T: Real>(Tensor<T>);

impl<T: Real> Backward<T> for WeightedSum<T> {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        _wants: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let w = self.0.clone().reshape(inputs[0].shape())?;
        Ok(vec![Some(scaled(&w, scalar_grad(grad)))])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_of_shared_input_accumulate() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::eye(2));
        let c = tape.constant(Tensor::ones(&[2, 2]));
        let y = tape.matmul(c, w).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::full(&[1], f64::MAX));
        let b = tape.param(Tensor::full(&[1], f64::MAX));
        assert!(matches!(tape.add(a, b), Err(Error::NonFinite { op: "add" })));
    }

    #[test]
    fn zero_dropout_is_identity_node() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::ones(&[4]));
        let mut rng = rand::thread_rng();
        assert_eq!(tape.dropout(a, 0.0, &mut rng).unwrap(), a);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::ones(&[4]));
        assert!(tape.backward(a).is_err());
    }
}
