use rand::Rng;

use super::{Seq2SeqBatch, EOS_ID};
use crate::Result;

/// Synthetic copy task: a uniformly random input sequence whose target is
/// the input read from `offset` onwards, for `target_len` tokens.
///
/// Tokens are drawn from `[first_token, vocab_size)`, leaving the reserved
/// ids unused.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CopyTask {
    pub vocab_size: u32,
    pub first_token: u32,
    pub input_len: usize,
    pub target_len: usize,
    pub offset: usize,
}

impl CopyTask {
    pub fn new(vocab_size: u32, input_len: usize) -> Self {
        CopyTask {
            vocab_size,
            first_token: EOS_ID + 1,
            input_len,
            target_len: input_len,
            offset: 0,
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<Seq2SeqBatch> {
        let input: Vec<u32> = (0..self.input_len)
            .map(|_| rng.gen_range(self.first_token..self.vocab_size))
            .collect();
        let end = (self.offset + self.target_len).min(self.input_len);
        let target = input[self.offset.min(end)..end].to_vec();
        Seq2SeqBatch::single(input, target)
    }
}

pub fn copy_batch(task: &CopyTask, n: usize, rng: &mut impl Rng) -> Result<Vec<Seq2SeqBatch>> {
    (0..n).map(|_| task.sample(rng)).collect()
}
