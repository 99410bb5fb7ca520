//! Acceptance run: criteria 1-9, one PASS/FAIL line each. Exits non-zero if
//! any criterion fails.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tglobal_bench::{mask_timing, memory_ceiling, report_csv, run_benchmark, BenchConfig};
use tglobal_core::attention::{build_global_mask, build_local_mask, count_kv_pairs};
use tglobal_core::model::lr_schedule;
use tglobal_core::psg::io::{read_corpus, read_examples};
use tglobal_core::psg::{
    build_span_corruption_example, score_sentences_ind_uniq, select_principle_sentences, splice_spans,
    DEFAULT_SENTINELS, DEFAULT_VOCAB_CAP,
};
use tglobal_core::verify::{run_suite, Suite, VerifyOptions};
use tglobal_core::{AttentionMode, Document, PackedBatch, Vocab};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tglobal"))
}

fn run_ok(args: &[&str], dir: &Path) -> Result<String, String> {
    let out = bin().args(args).current_dir(dir).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn core_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
}

fn read_bytes(p: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn metrics(path: &Path) -> Result<Vec<Value>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
        .collect()
}

fn c1_attention_equivalence() -> Outcome {
    let t = Instant::now();
    let v = run_suite(Suite::AttnEquiv, &VerifyOptions::default()).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    check(
        v.passed && v.value < 1e-9 && v.cases >= 200 && secs < 60.0,
        format!(
            "{} cases over 100 seeds, max abs diff {:.3e}, {secs:.1}s",
            v.cases, v.value
        ),
    )
}

fn c2_gradients() -> Outcome {
    let t = Instant::now();
    let v = run_suite(Suite::Gradcheck, &VerifyOptions::default()).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    check(
        v.passed && v.value < 1e-5 && secs < 120.0,
        format!("{} layer checks, max rel err {:.3e}, {secs:.1}s", v.cases, v.value),
    )
}

fn random_packing(rng: &mut ChaCha8Rng, l: usize) -> PackedBatch {
    let mut segs = Vec::with_capacity(l);
    let mut next = 1u32;
    while segs.len() < l {
        let n = rng.gen_range(1..=l).min(l - segs.len());
        if rng.gen_bool(0.2) {
            segs.extend(std::iter::repeat_n(0, n.min(4)));
        } else {
            segs.extend(std::iter::repeat_n(next, n));
            next += 1;
        }
    }
    let tokens = segs.iter().map(|&s| if s == 0 { 0 } else { 7 }).collect();
    PackedBatch::from_segments(tokens, segs).unwrap()
}

/// Majority segment of each block's non-pad tokens, ties to the lower id.
fn block_owners(segs: &[u32], k: usize) -> Vec<u32> {
    segs.chunks(k)
        .map(|block| {
            let ids: BTreeSet<u32> = block.iter().copied().filter(|&s| s != 0).collect();
            let mut best = (0usize, 0u32);
            for id in ids {
                let n = block.iter().filter(|&&s| s == id).count();
                if n > best.0 {
                    best = (n, id);
                }
            }
            best.1
        })
        .collect()
}

fn brute_pairs(b: &PackedBatch, r: usize, k: usize, mode: AttentionMode) -> u64 {
    let s = &b.segment_ids;
    let l = s.len();
    let mut n = 0u64;
    for i in 0..l {
        for j in 0..l {
            let same = s[i] != 0 && s[i] == s[j];
            n += u64::from(same && (mode == AttentionMode::Dense || i.abs_diff(j) <= r));
        }
    }
    if mode == AttentionMode::TGlobal {
        let owners = block_owners(s, k);
        n += build_global_mask(b, &owners).count() as u64;
    }
    n
}

fn c3_complexity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..1000 {
        let l = rng.gen_range(1..=96);
        let r = rng.gen_range(0..=24);
        let k = rng.gen_range(1..=16);
        let b = random_packing(&mut rng, l);
        for mode in AttentionMode::ALL {
            let got = count_kv_pairs(l, r, k, mode, Some(&b));
            let want = brute_pairs(&b, r, k, mode);
            if got != want {
                return Err(format!(
                    "case {case} {mode} l={l} r={r} k={k}: counted {got}, popcount {want}"
                ));
            }
        }
    }
    let (l, r, k) = (1024usize, 127usize, 16usize);
    let single = PackedBatch::single(vec![7; l]);
    let local_brute = build_local_mask(&single, r).count() as u64;
    let tglobal_brute = brute_pairs(&single, r, k, AttentionMode::TGlobal);
    let local_closed = (l * (2 * r + 1) - r * (r + 1)) as u64;
    let tglobal_closed = local_closed + (l * l.div_ceil(k)) as u64;
    if local_brute != local_closed || tglobal_brute != tglobal_closed {
        return Err(format!(
            "l=1024: brute {local_brute}/{tglobal_brute}, closed forms {local_closed}/{tglobal_closed}"
        ));
    }
    let count = |l, mode| count_kv_pairs(l, r, k, mode, None) as f64;
    let local_ratio = count(4096, AttentionMode::Local) / count(2048, AttentionMode::Local);
    let global = |l| count(l, AttentionMode::TGlobal) - count(l, AttentionMode::Local);
    let global_ratio = global(4096) / global(2048);
    check(
        (local_ratio - 2.0).abs() < 0.05 && global_ratio == 4.0,
        format!(
            "1000 configs exact; l=1024 local {local_brute}, tglobal {tglobal_brute}; 2048->4096 local x{local_ratio:.4}, global x{global_ratio}"
        ),
    )
}

fn c4_speed() -> Outcome {
    let t = Instant::now();
    let cfg = BenchConfig::default();
    let points = run_benchmark(&cfg, &[512, 4096], &AttentionMode::ALL).map_err(|e| e.to_string())?;
    let speed = |l: usize, m: AttentionMode| {
        points
            .iter()
            .find(|p| p.l == l && p.mode == m)
            .map(|p| p.sequences_per_second)
            .unwrap_or(0.0)
    };
    let [d5, l5, t5] = AttentionMode::ALL.map(|m| speed(512, m));
    let [d4, l4, t4] = AttentionMode::ALL.map(|m| speed(4096, m));
    let spread =
        [d5, l5, t5].iter().cloned().fold(0.0, f64::max) / [d5, l5, t5].iter().cloned().fold(f64::INFINITY, f64::min);
    let secs = t.elapsed().as_secs_f64();
    check(
        l4 >= t4 && t4 >= d4 && l4 >= 1.1 * d4 && spread <= 2.0 && secs < 600.0,
        format!(
            "seq/s at 4096: local {l4:.3}, tglobal {t4:.3}, dense {d4:.3}; at 512: dense {d5:.2}, local {l5:.2}, tglobal {t5:.2} (spread x{spread:.2}); {secs:.0}s"
        ),
    )
}

fn c5_memory() -> Outcome {
    let cfg = BenchConfig::default();
    let lengths = [512, 1024, 2048, 4096, 8192];
    let budget = 16_000_000;
    let mut ceilings = Vec::new();
    for mode in AttentionMode::ALL {
        let c = memory_ceiling(&cfg, mode, &lengths, budget).map_err(|e| e.to_string())?;
        ceilings.push(c.unwrap_or(0));
    }
    check(
        ceilings[0] < ceilings[2] && ceilings[2] < ceilings[1],
        format!(
            "budget {budget} floats: dense {}, tglobal {}, local {}",
            ceilings[0], ceilings[2], ceilings[1]
        ),
    )
}

/// ROUGE-1 F1 over distinct unigrams.
fn f1(cand: &[u32], reference: &[u32]) -> f64 {
    let a: BTreeSet<u32> = cand.iter().copied().collect();
    let b: BTreeSet<u32> = reference.iter().copied().collect();
    let overlap = a.intersection(&b).count() as f64;
    if overlap == 0.0 {
        return 0.0;
    }
    let (p, r) = (overlap / a.len() as f64, overlap / b.len() as f64);
    2.0 * p * r / (p + r)
}

/// Every size-`m` subset whose members all outrank every non-member
/// (higher score, or equal score and earlier position).
fn subsets_outranking(scores: &[f64], m: usize) -> Vec<Vec<usize>> {
    let n = scores.len();
    let beats = |i: usize, j: usize| scores[i] > scores[j] || (scores[i] == scores[j] && i < j);
    (0u32..1 << n)
        .filter(|mask| mask.count_ones() as usize == m)
        .map(|mask| (0..n).filter(|&i| mask >> i & 1 == 1).collect::<Vec<_>>())
        .filter(|set| {
            (0..n)
                .filter(|j| !set.contains(j))
                .all(|j| set.iter().all(|&i| beats(i, j)))
        })
        .collect()
}

fn c6_psg() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..50 {
        let n = rng.gen_range(1..=8);
        let sentences: Vec<Vec<u32>> = (0..n)
            .map(|_| (0..rng.gen_range(1..=10)).map(|_| rng.gen_range(104..124)).collect())
            .collect();
        let doc = Document {
            id: format!("r{case}"),
            sentences: sentences.clone(),
            raw_text: String::new(),
        };
        let scores: Vec<f64> = (0..n)
            .map(|i| {
                let rest: Vec<u32> = sentences
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .flat_map(|(_, s)| s.clone())
                    .collect();
                f1(&sentences[i], &rest)
            })
            .collect();
        let got = score_sentences_ind_uniq(&doc);
        if got.iter().zip(&scores).any(|(g, &s)| (g.score - s).abs() > 1e-12) {
            return Err(format!("doc {case}: scores differ"));
        }
        let m = ((0.2 * n as f64).round() as usize).max(1);
        let want = subsets_outranking(&scores, m);
        let sel = select_principle_sentences(&got, 0.2);
        if want.len() != 1 || sel != want[0] {
            return Err(format!("doc {case}: selected {sel:?}, brute force {want:?}"));
        }
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = core_fixture("golden_corpus.jsonl");
    let c = corpus.to_str().unwrap();
    run_ok(&["prepare-data", c, "--out-dir", "a"], dir.path())?;
    run_ok(&["prepare-data", c, "--out-dir", "b"], dir.path())?;
    let a = read_bytes(&dir.path().join("a/examples.jsonl"))?;
    let golden = read_bytes(&core_fixture("golden_psg.jsonl"))?;
    if a != golden || a != read_bytes(&dir.path().join("b/examples.jsonl"))? {
        return Err("golden corpus output differs from snapshot".into());
    }

    let records = read_corpus(&corpus).map_err(|e| e.to_string())?;
    let vocab = Vocab::build(
        records.iter().map(|r| r.text.as_str()),
        DEFAULT_VOCAB_CAP,
        DEFAULT_SENTINELS,
    );
    let examples = read_examples(&dir.path().join("a/examples.jsonl")).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for ex in &examples {
        let r = records.iter().find(|r| r.id == ex.origin).ok_or("unknown origin")?;
        let n = Document::from_text(&r.id, &r.text, &vocab).sentences.len();
        let masked = ex.input_ids.iter().filter(|&&t| vocab.is_sentinel(t)).count();
        if masked != ((0.2 * n as f64).round() as usize).max(1) {
            return Err(format!("{}: {masked} masked of {n} sentences", ex.origin));
        }
        checked += 1;
    }
    Ok(format!(
        "50 random docs match brute force; {checked} golden docs mask max(1, round(0.2n)); snapshot byte-identical"
    ))
}

fn c7_span_round_trip() -> Outcome {
    let vocab =
        Vocab::new(DEFAULT_SENTINELS, (0..500).map(|i| format!("w{i}")).collect()).map_err(|e| e.to_string())?;
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = rng.gen_range(1..=200);
        let tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(104..604)).collect();
        let ex = build_span_corruption_example(&tokens, 0.15, 3.0, &vocab, "x", &mut rng).map_err(|e| e.to_string())?;
        let back = splice_spans(&ex.input_ids, &ex.target_ids, &vocab).map_err(|e| e.to_string())?;
        if back != tokens {
            return Err(format!("seed {seed}: reconstruction differs"));
        }
    }
    Ok("1000 seeds reconstruct exactly".into())
}

fn c8_copy_task() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let t = Instant::now();
    run_ok(
        &["train", "--task", "copy", "--mode", "tglobal", "--steps", "2000"],
        dir.path(),
    )?;
    let secs = t.elapsed().as_secs_f64();
    let lines = metrics(&dir.path().join("metrics.jsonl"))?;
    let best = lines
        .iter()
        .filter_map(|m| Some((m["step"].as_u64()?, m["accuracy"].as_f64()?)))
        .find(|&(_, a)| a >= 0.95);

    run_ok(
        &[
            "train",
            "--task",
            "copy",
            "--input-len",
            "16",
            "--vocab-size",
            "16",
            "--num-heads",
            "2",
            "--head-dim",
            "4",
            "--d-ff",
            "16",
            "--num-layers",
            "1",
            "--radius",
            "2",
            "--block-size",
            "4",
            "--num-buckets",
            "8",
            "--max-distance",
            "16",
            "--batch-size",
            "1",
            "--steps",
            "250",
            "--lr-schedule",
            "inverse-sqrt",
            "--warmup",
            "100",
            "--no-early-stop",
            "--metrics",
            "lr.jsonl",
            "--out",
            "lr.bin",
        ],
        dir.path(),
    )?;
    let lr_lines = metrics(&dir.path().join("lr.jsonl"))?;
    let lr_ok = lr_lines.len() == 250
        && lr_lines.iter().enumerate().all(|(i, m)| {
            let step = i as u64 + 1;
            m["step"].as_u64() == Some(step) && m["lr"].as_f64() == Some(lr_schedule(step, 100))
        });
    match best {
        Some((step, acc)) => check(
            lr_ok && secs < 900.0,
            format!("held-out accuracy {acc:.3} at step {step} ({secs:.0}s); lr matches 1/sqrt(max(step, 100)) on all 250 steps: {lr_ok}"),
        ),
        None => Err(format!("accuracy never reached 0.95 in {} steps", lines.len())),
    }
}

fn c9_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let tiny = [
        "train",
        "--task",
        "copy",
        "--input-len",
        "16",
        "--vocab-size",
        "16",
        "--num-heads",
        "2",
        "--head-dim",
        "4",
        "--d-ff",
        "16",
        "--num-layers",
        "1",
        "--radius",
        "2",
        "--block-size",
        "4",
        "--num-buckets",
        "8",
        "--max-distance",
        "16",
        "--batch-size",
        "2",
        "--steps",
        "10",
        "--seed",
        "9",
    ];
    for tag in ["a", "b"] {
        let mut args = tiny.to_vec();
        let (out, m) = (format!("{tag}.bin"), format!("{tag}.jsonl"));
        args.extend_from_slice(&["--out", &out, "--metrics", &m]);
        run_ok(&args, d)?;
    }
    let ckpt = read_bytes(&d.join("a.bin"))? == read_bytes(&d.join("b.bin"))?;

    let corpus = core_fixture("golden_corpus.jsonl");
    for out in ["pa", "pb"] {
        run_ok(
            &[
                "prepare-data",
                corpus.to_str().unwrap(),
                "--objective",
                "mix",
                "--seed",
                "9",
                "--pack",
                "--input-len",
                "512",
                "--out-dir",
                out,
            ],
            d,
        )?;
    }
    let mut examples = true;
    for f in ["examples.jsonl", "packed.bin", "stats.json", "vocab.json"] {
        examples &= read_bytes(&d.join("pa").join(f))? == read_bytes(&d.join("pb").join(f))?;
    }

    let cfg = BenchConfig {
        d_model: 16,
        num_heads: 2,
        d_ff: 32,
        radius: 8,
        block_size: 4,
        batch: 2,
        repetitions: 1,
        ..BenchConfig::default()
    };
    let csv = || -> Result<String, String> {
        let p = run_benchmark(&cfg, &[32, 64], &AttentionMode::ALL).map_err(|e| e.to_string())?;
        Ok(mask_timing(&report_csv(&p).map_err(|e| e.to_string())?))
    };
    let csvs = csv()? == csv()?;
    check(
        ckpt && examples && csvs,
        format!("checkpoints identical: {ckpt}; example files identical: {examples}; masked CSVs identical: {csvs}"),
    )
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("attention oracle equivalence", c1_attention_equivalence),
        ("gradient correctness", c2_gradients),
        ("complexity accounting", c3_complexity),
        ("speed ordering", c4_speed),
        ("memory-budget ceilings", c5_memory),
        ("PSG pipeline fidelity", c6_psg),
        ("span-corruption round trip", c7_span_round_trip),
        ("copy-task training", c8_copy_task),
        ("determinism", c9_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = f();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {} PASS {name}: {msg} [{secs:.1}s]", i + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {} FAIL {name}: {msg} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
