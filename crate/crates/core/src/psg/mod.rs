//! Pre-training data: sentence splitting, a word-level vocabulary,
//! principle-sentence selection, span corruption and block-aligned packing.

mod examples;
pub mod io;
mod pack;
mod rouge;
mod sentences;
mod vocab;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use examples::{build_psg_example, build_span_corruption_example, splice_spans, Objective, Seq2SeqExample};
pub use pack::{pack_examples, unpack, Overflow, PackConfig, PackedMember, PackedSequence};
pub use rouge::{
    ngram_set, num_selected, rouge1_f1_uniq, rouge_n_f1_uniq, score_sentences_ind_uniq, score_sentences_ind_uniq_n,
    select_principle_sentences, SentenceScore,
};
pub use sentences::{split_sentences, ABBREVIATIONS};
pub use vocab::{tokenize, Vocab, DEFAULT_SENTINELS, DEFAULT_VOCAB_CAP};

use crate::Result;

pub const DEFAULT_MASK_RATIO: f64 = 0.2;
pub const DEFAULT_CORRUPTION_RATE: f64 = 0.15;
pub const DEFAULT_MEAN_SPAN: f64 = 3.0;

/// A document as a list of tokenized sentences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub sentences: Vec<Vec<u32>>,
    pub raw_text: String,
}

impl Document {
    pub fn from_text(id: impl Into<String>, text: &str, vocab: &Vocab) -> Self {
        let sentences = split_sentences(text)
            .iter()
            .map(|s| vocab.encode(s))
            .filter(|s| !s.is_empty())
            .collect();
        Document {
            id: id.into(),
            sentences,
            raw_text: text.to_string(),
        }
    }

    pub fn tokens(&self) -> Vec<u32> {
        self.sentences.concat()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mask_ratio: f64,
    pub corruption_rate: f64,
    pub mean_span: f64,
    /// Fraction of documents turned into span-corruption examples instead of
    /// principle-sentence examples (0 = all PSG, 1 = all span corruption).
    pub span_fraction: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mask_ratio: DEFAULT_MASK_RATIO,
            corruption_rate: DEFAULT_CORRUPTION_RATE,
            mean_span: DEFAULT_MEAN_SPAN,
            span_fraction: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PipelineStats {
    pub documents: usize,
    pub skipped_empty: usize,
    pub psg_examples: usize,
    pub span_examples: usize,
    pub mean_sentences: f64,
    /// Masked sentences over sentences, across PSG examples.
    pub realized_mask_ratio: f64,
}

/// Build one example per non-empty document. Document `i` draws from its own
/// random stream, so output does not depend on how documents are scheduled.
pub fn build_examples(
    docs: &[Document],
    vocab: &Vocab,
    cfg: &PipelineConfig,
) -> Result<(Vec<Seq2SeqExample>, PipelineStats)> {
    let mut out = Vec::with_capacity(docs.len());
    let mut stats = PipelineStats {
        documents: docs.len(),
        ..Default::default()
    };
    let (mut sentences, mut psg_sentences, mut masked) = (0usize, 0usize, 0usize);
    for (i, doc) in docs.iter().enumerate() {
        if doc.sentences.is_empty() {
            stats.skipped_empty += 1;
            continue;
        }
        sentences += doc.sentences.len();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let span = cfg.span_fraction > 0.0 && rng.gen::<f64>() < cfg.span_fraction;
        if span {
            out.push(build_span_corruption_example(
                &doc.tokens(),
                cfg.corruption_rate,
                cfg.mean_span,
                vocab,
                &doc.id,
                &mut rng,
            )?);
            stats.span_examples += 1;
        } else {
            out.push(build_psg_example(doc, cfg.mask_ratio, vocab)?);
            psg_sentences += doc.sentences.len();
            masked += num_selected(doc.sentences.len(), cfg.mask_ratio);
            stats.psg_examples += 1;
        }
    }
    let built = stats.psg_examples + stats.span_examples;
    stats.mean_sentences = if built == 0 {
        0.0
    } else {
        sentences as f64 / built as f64
    };
    stats.realized_mask_ratio = if psg_sentences == 0 {
        0.0
    } else {
        masked as f64 / psg_sentences as f64
    };
    Ok((out, stats))
}
