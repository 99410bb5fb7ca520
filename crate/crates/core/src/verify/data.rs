use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{case_seed, digest_of, u32_bytes, Suite, Tally, VerifyOptions};
use crate::psg::{
    build_psg_example, build_span_corruption_example, pack_examples, score_sentences_ind_uniq,
    select_principle_sentences, splice_spans, unpack, Document, Objective, PackConfig, Seq2SeqExample, Vocab,
    DEFAULT_MASK_RATIO, DEFAULT_SENTINELS,
};
use crate::Result;

/// Set F1 of every sentence against the distinct tokens of all others,
/// written with plain loops over sorted vectors.
pub fn brute_force_scores(sentences: &[Vec<u32>]) -> Vec<f64> {
    (0..sentences.len())
        .map(|i| {
            let mut cand = sentences[i].clone();
            cand.sort_unstable();
            cand.dedup();
            let mut reference: Vec<u32> = Vec::new();
            for (j, s) in sentences.iter().enumerate() {
                if j != i {
                    for &t in s {
                        if !reference.contains(&t) {
                            reference.push(t);
                        }
                    }
                }
            }
            let overlap = cand.iter().filter(|t| reference.contains(t)).count();
            if cand.is_empty() || reference.is_empty() || overlap == 0 {
                return 0.0;
            }
            let p = overlap as f64 / cand.len() as f64;
            let r = overlap as f64 / reference.len() as f64;
            2.0 * p * r / (p + r)
        })
        .collect()
}

/// Take the highest remaining score `m` times (earliest on ties).
pub fn brute_force_select(scores: &[f64], m: usize) -> Vec<usize> {
    let mut taken = vec![false; scores.len()];
    for _ in 0..m.min(scores.len()) {
        let mut best: Option<usize> = None;
        for i in 0..scores.len() {
            if !taken[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        if let Some(b) = best {
            taken[b] = true;
        }
    }
    (0..scores.len()).filter(|&i| taken[i]).collect()
}

fn random_sentences(rng: &mut impl Rng) -> Vec<Vec<u32>> {
    let n = rng.gen_range(1..=8);
    let alphabet = rng.gen_range(3..20);
    (0..n)
        .map(|_| {
            (0..rng.gen_range(1..10))
                .map(|_| 200 + rng.gen_range(0..alphabet))
                .collect()
        })
        .collect()
}

fn sentences_digest(s: &[Vec<u32>]) -> String {
    let parts: Vec<Vec<u8>> = s.iter().map(|x| u32_bytes(x)).collect();
    digest_of(&parts.iter().map(Vec::as_slice).collect::<Vec<_>>())
}

/// Scores, selection and example layout against brute force, plus the
/// span-corruption round trip. The metric counts mismatching cases.
pub(super) fn run_psg(opts: &VerifyOptions) -> Result<Tally> {
    let mut tally = Tally::new(Suite::PsgOracle, "mismatches", 0.5);
    let vocab = Vocab::new(DEFAULT_SENTINELS, Vec::new())?;
    for i in 0..opts.seeds {
        let seed = case_seed(opts, i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sentences = random_sentences(&mut rng);
        let n = sentences.len();
        let doc = Document {
            id: format!("case{seed}"),
            sentences: sentences.clone(),
            raw_text: String::new(),
        };
        let scores = score_sentences_ind_uniq(&doc);
        let brute = brute_force_scores(&sentences);
        let m = ((n + 2) / 5).max(1);
        let selected = select_principle_sentences(&scores, DEFAULT_MASK_RATIO);
        let want = brute_force_select(&brute, m);
        let example = build_psg_example(&doc, DEFAULT_MASK_RATIO, &vocab)?;
        let mut target: Vec<u32> = want.iter().flat_map(|&s| sentences[s].clone()).collect();
        target.push(crate::model::EOS_ID);

        let mut problems = Vec::new();
        if scores.iter().zip(&brute).any(|(a, b)| (a.score - b).abs() > 1e-15) {
            problems.push(format!(
                "scores {:?} vs brute force {brute:?}",
                scores.iter().map(|s| s.score).collect::<Vec<_>>()
            ));
        }
        if selected != want {
            problems.push(format!("selected {selected:?}, brute force {want:?}"));
        }
        if example.target_ids != target {
            problems.push("target is not the selected sentences in order".into());
        }

        let tokens = doc.tokens();
        let rate = rng.gen_range(0.0..0.5);
        let sc = build_span_corruption_example(&tokens, rate, 3.0, &vocab, &doc.id, &mut rng)?;
        if splice_spans(&sc.input_ids, &sc.target_ids, &vocab)? != tokens {
            problems.push(format!("span corruption at rate {rate} does not splice back"));
        }
        tally.record(
            seed,
            problems.len() as f64,
            || sentences_digest(&sentences),
            || format!("{n} sentences: {}", problems.join("; ")),
        );
    }
    Ok(tally)
}

fn random_examples(rng: &mut impl Rng, max_len: usize) -> Vec<Seq2SeqExample> {
    (0..rng.gen_range(1..30))
        .map(|e| Seq2SeqExample {
            input_ids: (0..rng.gen_range(1..=max_len))
                .map(|i| 104 + (e * 7 + i) as u32 % 500)
                .collect(),
            target_ids: (0..rng.gen_range(1..12)).map(|i| 104 + i as u32).collect(),
            origin: format!("e{e}"),
            objective: if rng.gen_bool(0.5) {
                Objective::Psg
            } else {
                Objective::SpanCorruption
            },
        })
        .collect()
}

fn packing_problems(examples: &[Seq2SeqExample], cfg: &PackConfig) -> Result<Vec<String>> {
    let seqs = pack_examples(examples, cfg)?;
    let mut problems = Vec::new();
    for (n, s) in seqs.iter().enumerate() {
        let pad = s.encoder.segment_ids.iter().filter(|&&g| g == 0).count();
        if s.encoder.len() != cfg.input_len || s.used() + pad != cfg.input_len {
            problems.push(format!("sequence {n}: lengths do not add up to {}", cfg.input_len));
        }
        if let Err(e) = s.encoder.validate() {
            problems.push(format!("sequence {n}: {e}"));
        }
        for (b, block) in s.encoder.segment_ids.chunks(cfg.block_size).enumerate() {
            let ids: BTreeSet<u32> = block.iter().copied().filter(|&g| g != 0).collect();
            if ids.len() > 1 {
                problems.push(format!("sequence {n}: block {b} holds segments {ids:?}"));
            }
        }
    }
    if unpack(&seqs)? != examples {
        problems.push("unpack(pack(x)) != x".into());
    }
    Ok(problems)
}

/// Block alignment, exact fill and the unpack round trip.
pub(super) fn run_packing(opts: &VerifyOptions) -> Result<Tally> {
    let mut tally = Tally::new(Suite::Packing, "violations", 0.5);
    for i in 0..opts.seeds {
        let seed = case_seed(opts, i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = [1, 2, 4, 8, 16][rng.gen_range(0..5)];
        let l = rng.gen_range(16..=192);
        let examples = random_examples(&mut rng, l);
        let mut cfg = PackConfig::new(l, k);
        if rng.gen_bool(0.5) {
            cfg.target_len = Some(16);
        }
        let problems = packing_problems(&examples, &cfg)?;
        let digest = || {
            let parts: Vec<Vec<u8>> = examples.iter().map(|e| u32_bytes(&e.input_ids)).collect();
            digest_of(&parts.iter().map(Vec::as_slice).collect::<Vec<_>>())
        };
        tally.record(seed, problems.len() as f64, digest, || {
            format!("l={l} k={k} {} examples: {}", examples.len(), problems.join("; "))
        });
    }
    Ok(tally)
}
