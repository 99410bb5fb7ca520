use std::collections::BTreeSet;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use super::Document;

/// Set of distinct n-grams; repeated n-grams count once.
pub fn ngram_set<T: Ord + Clone>(tokens: &[T], n: usize) -> BTreeSet<Vec<T>> {
    if n == 0 || tokens.len() < n {
        return BTreeSet::new();
    }
    tokens.windows(n).map(|w| w.to_vec()).collect()
}

fn f1_of_sets<T: Ord>(cand: &BTreeSet<T>, reference: &BTreeSet<T>) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let overlap = cand.intersection(reference).count();
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand.len() as f64;
    let r = overlap as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// ROUGE-N F1 over distinct n-grams.
pub fn rouge_n_f1_uniq<T: Ord + Clone + Hash>(cand: &[T], reference: &[T], n: usize) -> f64 {
    f1_of_sets(&ngram_set(cand, n), &ngram_set(reference, n))
}

/// ROUGE-1 F1 over distinct unigrams.
pub fn rouge1_f1_uniq<T: Ord + Clone + Hash>(cand: &[T], reference: &[T]) -> f64 {
    rouge_n_f1_uniq(cand, reference, 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentenceScore {
    pub index: usize,
    pub score: f64,
}

/// Score every sentence independently against the concatenation of all the
/// other sentences (ROUGE-1, distinct unigrams).
pub fn score_sentences_ind_uniq(doc: &Document) -> Vec<SentenceScore> {
    score_sentences_ind_uniq_n(doc, 1)
}

pub fn score_sentences_ind_uniq_n(doc: &Document, n: usize) -> Vec<SentenceScore> {
    (0..doc.sentences.len())
        .map(|i| {
            let rest: Vec<u32> = doc
                .sentences
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .flat_map(|(_, s)| s.iter().copied())
                .collect();
            SentenceScore {
                index: i,
                score: rouge_n_f1_uniq(&doc.sentences[i], &rest, n),
            }
        })
        .collect()
}

/// `max(1, round(ratio · n))`, capped at `n`.
pub fn num_selected(n: usize, ratio: f64) -> usize {
    if n == 0 {
        return 0;
    }
    ((ratio * n as f64).round() as usize).clamp(1, n)
}

/// Top-m sentence indices by score (ties to the earlier sentence), returned
/// in document order.
pub fn select_principle_sentences(scores: &[SentenceScore], ratio: f64) -> Vec<usize> {
    let m = num_selected(scores.len(), ratio);
    let mut ranked: Vec<&SentenceScore> = scores.iter().collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    let mut picked: Vec<usize> = ranked[..m].iter().map(|s| s.index).collect();
    picked.sort_unstable();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_f1() {
        let f = rouge1_f1_uniq(&['a', 'b', 'c'], &['b', 'c', 'd', 'e']);
        assert!((f - 4.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn identical_and_disjoint() {
        assert_eq!(rouge1_f1_uniq(&[1, 2, 3], &[3, 2, 1]), 1.0);
        assert_eq!(rouge1_f1_uniq(&[1, 2], &[3, 4]), 0.0);
        assert_eq!(rouge1_f1_uniq::<u32>(&[], &[1]), 0.0);
    }

    #[test]
    fn duplicates_do_not_count() {
        assert_eq!(rouge1_f1_uniq(&[1, 1, 1, 2], &[1, 2]), 1.0);
    }

    #[test]
    fn bigrams() {
        assert_eq!(rouge_n_f1_uniq(&[1, 2, 3], &[1, 2, 3], 2), 1.0);
        assert_eq!(rouge_n_f1_uniq(&[1, 2, 3], &[3, 2, 1], 2), 0.0);
    }

    #[test]
    fn selection_counts_and_ties() {
        let flat: Vec<SentenceScore> = (0..10).map(|i| SentenceScore { index: i, score: 0.5 }).collect();
        assert_eq!(select_principle_sentences(&flat, 0.2), vec![0, 1]);
        assert_eq!(num_selected(5, 0.2), 1);
        assert_eq!(num_selected(1, 0.2), 1);
        assert_eq!(num_selected(7, 0.2), 1);
        assert_eq!(num_selected(8, 0.2), 2);
        assert_eq!(num_selected(3, 1.0), 3);
        let s = [0.1, 0.9, 0.3, 0.9, 0.2]
            .iter()
            .enumerate()
            .map(|(index, &score)| SentenceScore { index, score });
        assert_eq!(select_principle_sentences(&s.collect::<Vec<_>>(), 0.4), vec![1, 3]);
    }
}
