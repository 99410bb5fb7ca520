use serde::{Deserialize, Serialize};

use super::{Objective, Seq2SeqExample};
use crate::attention::PackedBatch;
use crate::model::{Seq2SeqBatch, PAD_ID};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overflow {
    Truncate,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackConfig {
    pub input_len: usize,
    pub block_size: usize,
    /// Fixed packed target length; `None` leaves targets unpadded.
    pub target_len: Option<usize>,
    pub overflow: Overflow,
}

impl PackConfig {
    pub fn new(input_len: usize, block_size: usize) -> Self {
        Self {
            input_len,
            block_size,
            target_len: None,
            overflow: Overflow::Reject,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_len == 0 || self.block_size == 0 {
            return Err(Error::Invalid("packing needs input_len > 0 and block_size > 0".into()));
        }
        if self.target_len == Some(0) {
            return Err(Error::Invalid("packed target length must be positive".into()));
        }
        Ok(())
    }

    /// Slot an input of `len` tokens occupies: the next multiple of the block
    /// size, capped at the sequence length.
    pub fn slot_len(&self, len: usize) -> usize {
        len.div_ceil(self.block_size)
            .saturating_mul(self.block_size)
            .min(self.input_len)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedMember {
    /// Index of the example in the packed stream.
    pub example: usize,
    pub origin: String,
    pub objective: Objective,
    pub offset: usize,
    pub input_len: usize,
    pub target_offset: usize,
    pub target_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSequence {
    pub encoder: PackedBatch,
    pub targets: Vec<u32>,
    pub target_segments: Vec<u32>,
    pub members: Vec<PackedMember>,
}

impl PackedSequence {
    pub fn to_batch(&self) -> Result<Seq2SeqBatch> {
        Seq2SeqBatch::packed(self.encoder.clone(), self.targets.clone(), self.target_segments.clone())
    }

    /// Tokens used by examples (excluding alignment and tail padding).
    pub fn used(&self) -> usize {
        self.members.iter().map(|m| m.input_len).sum()
    }
}

struct Open {
    tokens: Vec<u32>,
    targets: Vec<u32>,
    members: Vec<PackedMember>,
}

fn fit(ex: &Seq2SeqExample, idx: usize, cfg: &PackConfig) -> Result<(Vec<u32>, Vec<u32>)> {
    let mut input = ex.input_ids.clone();
    let mut target = ex.target_ids.clone();
    if target.is_empty() {
        return Err(Error::Invalid(format!("example {idx} has an empty target")));
    }
    if input.is_empty() {
        return Err(Error::Invalid(format!("example {idx} has an empty input")));
    }
    let over_in = input.len() > cfg.input_len;
    let over_tgt = cfg.target_len.is_some_and(|t| target.len() > t);
    if over_in || over_tgt {
        match cfg.overflow {
            Overflow::Reject => {
                let (len, capacity) = if over_in {
                    (input.len(), cfg.input_len)
                } else {
                    (target.len(), cfg.target_len.unwrap_or(0))
                };
                return Err(Error::TooLong { len, capacity });
            }
            Overflow::Truncate => {
                input.truncate(cfg.input_len);
                if let Some(t) = cfg.target_len {
                    target.truncate(t);
                }
            }
        }
    }
    Ok((input, target))
}

/// First-fit packing. Each example starts on a block boundary and occupies
/// `slot_len(input)` positions, so no block holds two examples; targets are
/// concatenated in the same order with matching segment ids.
pub fn pack_examples(examples: &[Seq2SeqExample], cfg: &PackConfig) -> Result<Vec<PackedSequence>> {
    cfg.validate()?;
    let mut open: Vec<Open> = Vec::new();
    for (idx, ex) in examples.iter().enumerate() {
        let (input, target) = fit(ex, idx, cfg)?;
        let slot = cfg.slot_len(input.len());
        let fits = |o: &Open| {
            o.tokens.len() + slot <= cfg.input_len && cfg.target_len.is_none_or(|t| o.targets.len() + target.len() <= t)
        };
        let at = match open.iter().position(fits) {
            Some(i) => i,
            None => {
                open.push(Open {
                    tokens: Vec::new(),
                    targets: Vec::new(),
                    members: Vec::new(),
                });
                open.len() - 1
            }
        };
        let o = &mut open[at];
        o.members.push(PackedMember {
            example: idx,
            origin: ex.origin.clone(),
            objective: ex.objective,
            offset: o.tokens.len(),
            input_len: input.len(),
            target_offset: o.targets.len(),
            target_len: target.len(),
        });
        o.tokens.extend_from_slice(&input);
        o.tokens.resize(o.tokens.len() + slot - input.len(), PAD_ID);
        o.targets.extend_from_slice(&target);
    }
    open.into_iter().map(|o| finish(o, cfg)).collect()
}

fn finish(o: Open, cfg: &PackConfig) -> Result<PackedSequence> {
    let l = cfg.input_len;
    let mut tokens = vec![PAD_ID; l];
    let mut segs = vec![0u32; l];
    let t = cfg.target_len.unwrap_or(o.targets.len());
    let mut targets = vec![PAD_ID; t];
    let mut tsegs = vec![0u32; t];
    for (s, m) in o.members.iter().enumerate() {
        let id = s as u32 + 1;
        tokens[m.offset..m.offset + m.input_len].copy_from_slice(&o.tokens[m.offset..m.offset + m.input_len]);
        segs[m.offset..m.offset + m.input_len].fill(id);
        let tr = m.target_offset..m.target_offset + m.target_len;
        targets[tr.clone()].copy_from_slice(&o.targets[tr.clone()]);
        tsegs[tr].fill(id);
    }
    Ok(PackedSequence {
        encoder: PackedBatch::from_segments(tokens, segs)?,
        targets,
        target_segments: tsegs,
        members: o.members,
    })
}

/// Recover the examples from their segment ids, in original stream order.
pub fn unpack(seqs: &[PackedSequence]) -> Result<Vec<Seq2SeqExample>> {
    let mut out: Vec<(usize, Seq2SeqExample)> = Vec::new();
    for seq in seqs {
        for (s, m) in seq.members.iter().enumerate() {
            let id = s as u32 + 1;
            let input: Vec<u32> = seq
                .encoder
                .tokens
                .iter()
                .zip(&seq.encoder.segment_ids)
                .filter(|&(_, &g)| g == id)
                .map(|(&t, _)| t)
                .collect();
            let target: Vec<u32> = seq
                .targets
                .iter()
                .zip(&seq.target_segments)
                .filter(|&(_, &g)| g == id)
                .map(|(&t, _)| t)
                .collect();
            if input.len() != m.input_len || target.len() != m.target_len {
                return Err(Error::Format(format!("segment {id} disagrees with its member record")));
            }
            out.push((
                m.example,
                Seq2SeqExample {
                    input_ids: input,
                    target_ids: target,
                    origin: m.origin.clone(),
                    objective: m.objective,
                },
            ));
        }
    }
    out.sort_by_key(|(i, _)| *i);
    Ok(out.into_iter().map(|(_, e)| e).collect())
}
