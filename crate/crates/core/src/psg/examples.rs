use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::rouge::{score_sentences_ind_uniq, select_principle_sentences};
use super::{Document, Vocab};
use crate::model::EOS_ID;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Psg,
    SpanCorruption,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seq2SeqExample {
    pub input_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
    pub origin: String,
    pub objective: Objective,
}

/// Mask the principle sentences of `doc`, each with its own sentinel in
/// document order; the target is the masked sentences in order, then EOS.
pub fn build_psg_example(doc: &Document, ratio: f64, vocab: &Vocab) -> Result<Seq2SeqExample> {
    if doc.sentences.is_empty() {
        return Err(Error::Invalid(format!("document {:?} has no sentences", doc.id)));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Invalid(format!("mask ratio {ratio} outside (0, 1]")));
    }
    let selected = select_principle_sentences(&score_sentences_ind_uniq(doc), ratio);
    let mut input = Vec::new();
    let mut target = Vec::new();
    let mut next = selected.iter().peekable();
    let mut k = 0;
    for (i, s) in doc.sentences.iter().enumerate() {
        if next.peek() == Some(&&i) {
            next.next();
            input.push(vocab.sentinel(k)?);
            k += 1;
            target.extend_from_slice(s);
        } else {
            input.extend_from_slice(s);
        }
    }
    target.push(EOS_ID);
    Ok(Seq2SeqExample {
        input_ids: input,
        target_ids: target,
        origin: doc.id.clone(),
        objective: Objective::Psg,
    })
}

/// Split `total` into `parts` positive lengths uniformly at random.
fn random_segmentation(total: usize, parts: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut cuts = index::sample(rng, total - 1, parts - 1).into_vec();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts {
        out.push(c + 1 - prev);
        prev = c + 1;
    }
    out.push(total - prev);
    out
}

/// Span corruption: `round(rate · len)` tokens (at most `len − 1`) are split
/// into `round(noise / mean_span)` spans placed between non-empty kept runs;
/// each span becomes the next sentinel. The target lists every sentinel
/// followed by the tokens it replaced, then EOS.
pub fn build_span_corruption_example(
    tokens: &[u32],
    rate: f64,
    mean_span: f64,
    vocab: &Vocab,
    origin: &str,
    rng: &mut impl Rng,
) -> Result<Seq2SeqExample> {
    if tokens.is_empty() {
        return Err(Error::Invalid("span corruption needs at least one token".into()));
    }
    if !(0.0..1.0).contains(&rate) || mean_span < 1.0 {
        return Err(Error::Invalid(format!(
            "corruption rate {rate} / mean span {mean_span}"
        )));
    }
    let len = tokens.len();
    let noise = ((rate * len as f64).round() as usize).min(len - 1);
    let mut input = Vec::with_capacity(len);
    let mut target = Vec::new();
    if noise == 0 {
        input.extend_from_slice(tokens);
    } else {
        let spans = ((noise as f64 / mean_span).round() as usize).clamp(1, noise.min(len - noise));
        let noise_lens = random_segmentation(noise, spans, rng);
        let keep_lens = random_segmentation(len - noise, spans, rng);
        let mut pos = 0;
        for (s, (&keep, &drop)) in keep_lens.iter().zip(&noise_lens).enumerate() {
            input.extend_from_slice(&tokens[pos..pos + keep]);
            pos += keep;
            let sentinel = vocab.sentinel(s)?;
            input.push(sentinel);
            target.push(sentinel);
            target.extend_from_slice(&tokens[pos..pos + drop]);
            pos += drop;
        }
        debug_assert_eq!(pos, len);
    }
    target.push(EOS_ID);
    Ok(Seq2SeqExample {
        input_ids: input,
        target_ids: target,
        origin: origin.to_string(),
        objective: Objective::SpanCorruption,
    })
}

/// Inverse of span corruption: put each target span back at its sentinel.
pub fn splice_spans(input: &[u32], target: &[u32], vocab: &Vocab) -> Result<Vec<u32>> {
    let body = match target.split_last() {
        Some((&EOS_ID, rest)) => rest,
        _ => return Err(Error::Invalid("target does not end with EOS".into())),
    };
    let mut spans: Vec<(u32, &[u32])> = Vec::new();
    let mut i = 0;
    while i < body.len() {
        let s = body[i];
        if !vocab.is_sentinel(s) {
            return Err(Error::Invalid(format!(
                "target position {i}: expected a sentinel, got {s}"
            )));
        }
        let end = body[i + 1..]
            .iter()
            .position(|&t| vocab.is_sentinel(t))
            .map_or(body.len(), |p| i + 1 + p);
        spans.push((s, &body[i + 1..end]));
        i = end;
    }
    let mut spans = spans.into_iter();
    let mut out = Vec::new();
    for &t in input {
        if vocab.is_sentinel(t) {
            match spans.next() {
                Some((s, span)) if s == t => out.extend_from_slice(span),
                _ => return Err(Error::Invalid(format!("sentinel {t} has no matching target span"))),
            }
        } else {
            out.push(t);
        }
    }
    if spans.next().is_some() {
        return Err(Error::Invalid("target has spans without sentinels in the input".into()));
    }
    Ok(out)
}
