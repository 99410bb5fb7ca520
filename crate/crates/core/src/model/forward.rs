use rand_chacha::ChaCha8Rng;

use super::params::{DecoderLayerIx, EncoderLayerIx, Layout, Params};
use super::{ModelConfig, BOS_ID, PAD_ID};
use crate::attention::{
    causal_position_bucket, dense_attention_op, gather_bias, self_attention, AttentionMask, AttentionPath,
    AttentionWeights, BiasIndex, PackedBatch,
};
use crate::numerics::{Real, Tape, Var};
use crate::{Error, Result};

/// One encoder input with its teacher-forced decoder side.
///
/// `decoder` holds the right-shifted decoder inputs (BOS-led per segment);
/// `targets[i]` is the token the decoder must emit at position `i`. Decoder
/// segment `s` cross-attends encoder segment `s` only.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqBatch {
    pub encoder: PackedBatch,
    pub decoder: PackedBatch,
    pub targets: Vec<u32>,
}

impl Seq2SeqBatch {
    pub fn single(input: Vec<u32>, target: Vec<u32>) -> Result<Self> {
        let segs = vec![1; target.len()];
        Self::packed(PackedBatch::single(input), target, segs)
    }

    /// Packed targets aligned by segment id with the packed encoder input.
    pub fn packed(encoder: PackedBatch, targets: Vec<u32>, target_segments: Vec<u32>) -> Result<Self> {
        if targets.len() != target_segments.len() {
            return Err(Error::shape("Seq2SeqBatch", "targets and segment ids differ in length"));
        }
        let inputs = shift_right(&targets, &target_segments);
        let decoder = PackedBatch::from_segments(inputs, target_segments)?;
        Ok(Seq2SeqBatch {
            encoder,
            decoder,
            targets,
        })
    }

    /// Number of positions contributing to the loss.
    pub fn target_count(&self) -> usize {
        self.targets
            .iter()
            .zip(&self.decoder.segment_ids)
            .filter(|(&t, &s)| t != PAD_ID && s != 0)
            .count()
    }

    /// Targets with padding positions forced to PAD so the loss skips them.
    pub(crate) fn loss_targets(&self) -> Vec<u32> {
        self.targets
            .iter()
            .zip(&self.decoder.segment_ids)
            .map(|(&t, &s)| if s == 0 { PAD_ID } else { t })
            .collect()
    }
}

/// BOS followed by each segment's targets minus the last; padding stays PAD.
pub fn shift_right(targets: &[u32], segments: &[u32]) -> Vec<u32> {
    (0..targets.len())
        .map(|i| match segments[i] {
            0 => PAD_ID,
            s if i == 0 || segments[i - 1] != s => BOS_ID,
            _ => targets[i - 1],
        })
        .collect()
}

/// Register every parameter on `tape`, as trainable leaves or constants.
pub fn bind<T: Real>(tape: &mut Tape<T>, params: &Params<T>, trainable: bool) -> Vec<Var> {
    params
        .tensors
        .iter()
        .map(|t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect()
}

/// State shared by the encoder and decoder passes.
pub struct Forward<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    pub vars: &'a [Var],
    pub layout: &'a Layout,
    pub cfg: &'a ModelConfig,
    pub path: AttentionPath,
    /// Dropout source; `None` (or a zero rate) disables dropout.
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a, T: Real> Forward<'a, T> {
    fn var(&self, ix: usize) -> Var {
        self.vars[ix]
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.cfg.dropout_rate > 0.0 => self.tape.dropout(x, self.cfg.dropout_rate, rng),
            _ => Ok(x),
        }
    }

    fn feed_forward(&mut self, x: Var, norm: usize, wi: usize, wo: usize) -> Result<Var> {
        let h = self.tape.rms_norm(x, self.var(norm))?;
        let h = self.tape.matmul(h, self.var(wi))?;
        let h = self.tape.relu(h)?;
        let h = self.tape.matmul(h, self.var(wo))?;
        let h = self.dropout(h)?;
        self.tape.add(x, h)
    }

    fn encoder_layer(&mut self, x: Var, ix: &EncoderLayerIx, batch: &PackedBatch) -> Result<Var> {
        let h = self.tape.rms_norm(x, self.var(ix.attn_norm))?;
        let w = AttentionWeights {
            q: self.var(ix.q),
            k: self.var(ix.k),
            v: self.var(ix.v),
            o: self.var(ix.o),
            rel_bias: self.var(ix.rel_bias),
            side_bias: ix.side_bias.map(|i| self.var(i)),
            global_norm: ix.global_norm.map(|i| self.var(i)),
        };
        let a = self_attention(
            self.tape,
            h,
            &w,
            batch,
            &self.cfg.attention,
            self.cfg.encoder_mode,
            self.path,
        )?;
        let a = self.dropout(a)?;
        let x = self.tape.add(x, a)?;
        self.feed_forward(x, ix.ffn_norm, ix.wi, ix.wo)
    }

    /// `[l × d_model]` encoder output with padding rows zeroed.
    pub fn encoder(&mut self, batch: &PackedBatch) -> Result<Var> {
        batch.validate()?;
        let mut x = self.tape.embedding(self.var(self.layout.embedding), &batch.tokens)?;
        x = self.dropout(x)?;
        for ix in &self.layout.encoder {
            x = self.encoder_layer(x, ix, batch)?;
        }
        let x = self.tape.rms_norm(x, self.var(self.layout.encoder_norm))?;
        let x = self.dropout(x)?;
        self.tape.mask_rows(x, &batch.non_pad())
    }

    fn decoder_layer(
        &mut self,
        y: Var,
        ix: &DecoderLayerIx,
        enc: Var,
        self_mask: &AttentionMask,
        self_bias: &[BiasIndex],
        cross_mask: &AttentionMask,
    ) -> Result<Var> {
        let heads = self.cfg.attention.num_heads;
        let t = self_mask.rows;
        let h = self.tape.rms_norm(y, self.var(ix.self_norm))?;
        let q = self.tape.matmul(h, self.var(ix.q))?;
        let k = self.tape.matmul(h, self.var(ix.k))?;
        let v = self.tape.matmul(h, self.var(ix.v))?;
        let bias = gather_bias(self.tape, &[self.var(ix.rel_bias)], self_bias.to_vec(), t, t)?;
        let a = dense_attention_op(self.tape, q, k, v, Some(bias), self_mask, heads)?;
        let a = self.tape.matmul(a, self.var(ix.o))?;
        let a = self.dropout(a)?;
        let y = self.tape.add(y, a)?;

        let h = self.tape.rms_norm(y, self.var(ix.cross_norm))?;
        let q = self.tape.matmul(h, self.var(ix.cq))?;
        let k = self.tape.matmul(enc, self.var(ix.ck))?;
        let v = self.tape.matmul(enc, self.var(ix.cv))?;
        let a = dense_attention_op(self.tape, q, k, v, None, cross_mask, heads)?;
        let a = self.tape.matmul(a, self.var(ix.co))?;
        let a = self.dropout(a)?;
        let y = self.tape.add(y, a)?;
        self.feed_forward(y, ix.ffn_norm, ix.wi, ix.wo)
    }

    /// Logits `[t × vocab]` for right-shifted decoder inputs.
    ///
    /// Self-attention is causal within each decoder segment with a
    /// unidirectional relative bias; cross-attention sees the non-pad encoder
    /// rows of the matching segment and carries no bias.
    pub fn decoder(&mut self, dec: &PackedBatch, enc: Var, enc_segments: &[u32]) -> Result<Var> {
        let t = dec.len();
        if t > self.cfg.max_target_len {
            return Err(Error::TooLong {
                len: t,
                capacity: self.cfg.max_target_len,
            });
        }
        dec.validate()?;
        if self.tape.value(enc).rows() != enc_segments.len() {
            return Err(Error::shape("decoder", "encoder rows differ from encoder segment ids"));
        }
        let s = &dec.segment_ids;
        let self_mask = AttentionMask::from_fn(t, t, |i, j| j <= i && s[i] != 0 && s[i] == s[j]);
        let att = &self.cfg.attention;
        let mut self_bias = Vec::with_capacity(t * t);
        for i in 0..t {
            for j in 0..t {
                let rel = dec.positions[j] as i64 - dec.positions[i] as i64;
                let bucket = causal_position_bucket(rel, att.num_buckets, att.max_distance);
                self_bias.push(BiasIndex {
                    table: 0,
                    bucket: bucket as u16,
                });
            }
        }
        let cross_mask = AttentionMask::from_fn(t, enc_segments.len(), |i, j| s[i] != 0 && enc_segments[j] == s[i]);

        let mut y = self.tape.embedding(self.var(self.layout.embedding), &dec.tokens)?;
        y = self.dropout(y)?;
        for ix in &self.layout.decoder {
            y = self.decoder_layer(y, ix, enc, &self_mask, &self_bias, &cross_mask)?;
        }
        let y = self.tape.rms_norm(y, self.var(self.layout.decoder_norm))?;
        let y = self.dropout(y)?;
        self.tape.matmul(y, self.var(self.layout.lm_head))
    }

    /// Mean cross-entropy over the batch's non-pad targets.
    pub fn loss(&mut self, batch: &Seq2SeqBatch) -> Result<Var> {
        let enc = self.encoder(&batch.encoder)?;
        let logits = self.decoder(&batch.decoder, enc, &batch.encoder.segment_ids)?;
        self.tape.cross_entropy(logits, &batch.loss_targets(), PAD_ID)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shift_right_restarts_per_segment() {
        let t = [5, 6, 2, 7, 2, 0];
        let s = [1, 1, 1, 2, 2, 0];
        assert_eq!(shift_right(&t, &s), vec![BOS_ID, 5, 6, BOS_ID, 7, PAD_ID]);
    }
}
