use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{bind, Forward, Seq2SeqBatch};
use super::Model;
use crate::attention::AttentionPath;
use crate::numerics::{Tape, Tensor};
use crate::{Error, Result};

/// `1 / sqrt(max(step, warmup))`.
pub fn lr_schedule(step: u64, warmup: u64) -> f64 {
    1.0 / (step.max(warmup) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    InverseSqrt { warmup: u64 },
}

impl LrSchedule {
    /// Rate used by the update that brings the step counter to `step`.
    pub fn rate(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::InverseSqrt { warmup } => lr_schedule(step, warmup),
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

/// Adam moments, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor<f64>>,
    pub v: Vec<Tensor<f64>>,
    pub step: u64,
}

impl Adam {
    pub fn new(model: &Model) -> Self {
        let zeros = || model.params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [Tensor<f64>], grads: &[Tensor<f64>], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, &g), (m, v)) in it {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub tokens: usize,
}

/// Loss and parameter gradients over a minibatch; the loss is the mean over
/// all non-pad targets of all sequences. Each sequence gets its own tape.
pub fn loss_and_grads(model: &Model, batch: &[Seq2SeqBatch], dropout_seed: u64) -> Result<(f64, Vec<Tensor<f64>>)> {
    let total: usize = batch.iter().map(|b| b.target_count()).sum();
    if total == 0 {
        return Err(Error::AllPadding);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let mut grads: Vec<Tensor<f64>> = model.params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut loss = 0.0;
    for b in batch {
        let n = b.target_count();
        if n == 0 {
            continue;
        }
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &model.params, true);
        let mut fwd = Forward {
            tape: &mut tape,
            vars: &vars,
            layout: &model.layout,
            cfg: &model.config,
            path: AttentionPath::Kernel,
            rng: Some(&mut rng),
        };
        let l = fwd.loss(b)?;
        let w = n as f64 / total as f64;
        let l = tape.scale(l, w)?;
        loss += tape.value(l).item();
        let mut g = tape.backward(l)?;
        for (acc, v) in grads.iter_mut().zip(&vars) {
            if let Some(gv) = g.take(*v) {
                acc.add_assign(&gv);
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    Ok((loss, grads))
}

/// One Adam update. The rate comes from `schedule` at the post-update step.
pub fn train_step(
    model: &mut Model,
    opt: &mut Adam,
    batch: &[Seq2SeqBatch],
    schedule: &LrSchedule,
    dropout_seed: u64,
) -> Result<StepStats> {
    if !model.params.all_finite() {
        return Err(Error::NonFinite { op: "params" });
    }
    let (loss, grads) = loss_and_grads(model, batch, dropout_seed)?;
    let lr = schedule.rate(opt.step + 1);
    opt.update(&mut model.params.tensors, &grads, lr);
    Ok(StepStats {
        step: opt.step,
        loss,
        lr,
        tokens: batch.iter().map(|b| b.target_count()).sum(),
    })
}
