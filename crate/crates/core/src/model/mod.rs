//! Toy T5-style encoder-decoder built on the attention kernels: pre-norm
//! residual blocks, ReLU feed-forward, untied output projection, Adam.

mod checkpoint;
mod config;
mod forward;
mod optim;
mod params;
mod tasks;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{ModelConfig, BOS_ID, EOS_ID, PAD_ID};
pub use forward::{bind, shift_right, Forward, Seq2SeqBatch};
pub use optim::{
    loss_and_grads, lr_schedule, train_step, Adam, LrSchedule, StepStats, ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
};
pub use params::{DecoderLayerIx, EncoderLayerIx, Layout, Params};
pub use tasks::{copy_batch, CopyTask};

use crate::attention::{AttentionPath, PackedBatch};
use crate::numerics::{Real, Tape, Tensor};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real = f64> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Params<T>,
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = Params::<f64>::init(&layout, seed).cast();
        Ok(Model { config, layout, params })
    }

    pub fn from_params(config: ModelConfig, params: Params<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        params.check(&layout)?;
        Ok(Model { config, layout, params })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    fn with_forward<R>(&self, path: AttentionPath, f: impl FnOnce(&mut Forward<'_, T>) -> Result<R>) -> Result<R> {
        let mut tape = Tape::new();
        let vars = forward::bind(&mut tape, &self.params, false);
        let mut fwd = Forward {
            tape: &mut tape,
            vars: &vars,
            layout: &self.layout,
            cfg: &self.config,
            path,
            rng: None,
        };
        f(&mut fwd)
    }

    /// Encoder output `[l × d_model]` (no dropout).
    pub fn encode(&self, batch: &PackedBatch) -> Result<Tensor<T>> {
        self.encode_with(batch, AttentionPath::Kernel)
    }

    pub fn encode_with(&self, batch: &PackedBatch, path: AttentionPath) -> Result<Tensor<T>> {
        self.with_forward(path, |f| {
            let v = f.encoder(batch)?;
            Ok(f.tape.value(v).clone())
        })
    }

    /// Teacher-forced logits `[t × vocab]`.
    pub fn logits(&self, batch: &Seq2SeqBatch) -> Result<Tensor<T>> {
        self.with_forward(AttentionPath::Kernel, |f| {
            let enc = f.encoder(&batch.encoder)?;
            let v = f.decoder(&batch.decoder, enc, &batch.encoder.segment_ids)?;
            Ok(f.tape.value(v).clone())
        })
    }

    pub fn loss(&self, batch: &Seq2SeqBatch) -> Result<f64> {
        self.with_forward(AttentionPath::Kernel, |f| {
            let v = f.loss(batch)?;
            Ok(f.tape.value(v).item().as_f64())
        })
    }

    /// Teacher-forced argmax hits and the number of scored targets.
    pub fn token_accuracy(&self, batches: &[Seq2SeqBatch]) -> Result<(usize, usize)> {
        let (mut hit, mut total) = (0, 0);
        for b in batches {
            let logits = self.logits(b)?;
            for (i, &t) in b.loss_targets().iter().enumerate() {
                if t != PAD_ID {
                    total += 1;
                    hit += (argmax(logits.row(i)) == t as usize) as usize;
                }
            }
        }
        Ok((hit, total))
    }

    /// Greedy decoding, one output per encoder segment in segment order.
    /// Each output stops after EOS or `max_len` tokens and includes the EOS.
    pub fn greedy_decode(&self, encoder: &PackedBatch, max_len: usize) -> Result<Vec<Vec<u32>>> {
        let max_len = max_len.min(self.config.max_target_len);
        let enc = self.encode(encoder)?;
        let mut segments: Vec<u32> = encoder.segment_ids.iter().copied().filter(|&s| s != 0).collect();
        segments.dedup();
        let mut outputs = Vec::with_capacity(segments.len());
        for seg in segments {
            let mut out: Vec<u32> = Vec::new();
            while out.len() < max_len {
                let mut inputs = vec![BOS_ID];
                inputs.extend_from_slice(&out);
                let dec = PackedBatch::from_segments(inputs, vec![seg; out.len() + 1])?;
                let logits = self.with_forward(AttentionPath::Kernel, |f| {
                    let e = f.tape.constant(enc.clone());
                    let v = f.decoder(&dec, e, &encoder.segment_ids)?;
                    Ok(f.tape.value(v).row(out.len()).to_vec())
                })?;
                let next = argmax(&logits) as u32;
                out.push(next);
                if next == EOS_ID {
                    break;
                }
            }
            outputs.push(out);
        }
        Ok(outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lower_index_on_ties() {
        assert_eq!(argmax(&[0.5, 2.0, 2.0, 1.0]), 1);
        assert_eq!(argmax(&[3.0f64; 4]), 0);
    }
}
