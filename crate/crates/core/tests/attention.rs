mod common;

use common::{merge_heads, per_head, rand_tensor, random_packing};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tglobal_core::attention::{
    build_global_mask, build_local_mask, count_kv_pairs, dense_attention, global_segments, local_attention_op,
    num_blocks, relative_position_bucket, self_attention, tglobal_attention_op, AttentionMask, AttentionPath,
    AttentionWeights,
};
use tglobal_core::numerics::{grad_check, memtrack, GradCheckOptions};
use tglobal_core::{AttentionConfig, AttentionMode, PackedBatch, Tape, Tensor};

struct Case {
    cfg: AttentionConfig,
    batch: PackedBatch,
    q: Tensor<f64>,
    k: Tensor<f64>,
    v: Tensor<f64>,
    kg: Tensor<f64>,
    vg: Tensor<f64>,
    rel: Tensor<f64>,
    side: Tensor<f64>,
}

fn random_case(rng: &mut ChaCha8Rng, l: usize, r: usize, k: usize) -> Case {
    let heads = rng.gen_range(1..=4);
    let head_dim = rng.gen_range(1..=4);
    let cfg = AttentionConfig {
        radius: r,
        block_size: k,
        num_heads: heads,
        head_dim,
        num_buckets: 16,
        max_distance: 40,
    };
    let dm = cfg.d_model();
    let g = num_blocks(l, k);
    Case {
        batch: random_packing(rng, l),
        q: rand_tensor(rng, &[l, dm], 1.5),
        k: rand_tensor(rng, &[l, dm], 1.5),
        v: rand_tensor(rng, &[l, dm], 1.0),
        kg: rand_tensor(rng, &[g, dm], 1.5),
        vg: rand_tensor(rng, &[g, dm], 1.0),
        rel: rand_tensor(rng, &[heads, 16], 1.0),
        side: rand_tensor(rng, &[heads, 16], 1.0),
        cfg,
    }
}

fn token_bias(c: &Case, l: usize) -> Tensor<f64> {
    let h = c.cfg.num_heads;
    Tensor::from_fn(&[h, l, l], |idx| {
        let (hh, i, j) = (idx / (l * l), (idx / l) % l, idx % l);
        let b = relative_position_bucket(j as i64 - i as i64, c.cfg.num_buckets, c.cfg.max_distance);
        c.rel.data()[hh * c.cfg.num_buckets + b]
    })
}

fn local_kernel(c: &Case) -> Tensor<f64> {
    let mut tape = Tape::new();
    let vars: Vec<_> = [&c.q, &c.k, &c.v, &c.rel]
        .iter()
        .map(|t| tape.input((*t).clone()))
        .collect();
    let out = local_attention_op(&mut tape, vars[0], vars[1], vars[2], vars[3], &c.batch, &c.cfg).unwrap();
    tape.value(out).clone()
}

fn local_oracle(c: &Case) -> Tensor<f64> {
    let l = c.batch.len();
    let h = c.cfg.num_heads;
    let mask = build_local_mask(&c.batch, c.cfg.radius);
    let out = dense_attention(
        &per_head(&c.q, h),
        &per_head(&c.k, h),
        &per_head(&c.v, h),
        Some(&token_bias(c, l)),
        &mask,
    )
    .unwrap();
    merge_heads(&out)
}

fn tglobal_kernel(c: &Case) -> Tensor<f64> {
    let mut tape = Tape::new();
    let vars: Vec<_> = [&c.q, &c.k, &c.v, &c.kg, &c.vg, &c.rel, &c.side]
        .iter()
        .map(|t| tape.input((*t).clone()))
        .collect();
    let gsegs = global_segments(&c.batch, c.cfg.block_size);
    let out = tglobal_attention_op(
        &mut tape, vars[0], vars[1], vars[2], vars[3], vars[4], vars[5], vars[6], &c.batch, &gsegs, &c.cfg,
    )
    .unwrap();
    tape.value(out).clone()
}

/// Dense attention over keys `[tokens ⊕ globals]` with mask `[band ∥ global]`.
fn tglobal_oracle(c: &Case) -> Tensor<f64> {
    let l = c.batch.len();
    let (h, k) = (c.cfg.num_heads, c.cfg.block_size);
    let g = num_blocks(l, k);
    let gsegs = global_segments(&c.batch, k);
    let mask = build_local_mask(&c.batch, c.cfg.radius)
        .concat_cols(&build_global_mask(&c.batch, &gsegs))
        .unwrap();
    let nb = c.cfg.num_buckets;
    let bias = Tensor::from_fn(&[h, l, l + g], |idx| {
        let (hh, i, j) = (idx / (l * (l + g)), (idx / (l + g)) % l, idx % (l + g));
        if j < l {
            c.rel.data()[hh * nb + relative_position_bucket(j as i64 - i as i64, nb, c.cfg.max_distance)]
        } else {
            let rel = (j - l) as i64 - (i / k) as i64;
            c.side.data()[hh * nb + relative_position_bucket(rel, nb, c.cfg.max_distance)]
        }
    });
    let cat = |a: &Tensor<f64>, b: &Tensor<f64>| {
        let mut d = a.data().to_vec();
        d.extend_from_slice(b.data());
        Tensor::new(vec![a.rows() + b.rows(), a.last_dim()], d).unwrap()
    };
    let out = dense_attention(
        &per_head(&c.q, h),
        &per_head(&cat(&c.k, &c.kg), h),
        &per_head(&cat(&c.v, &c.vg), h),
        Some(&bias),
        &mask,
    )
    .unwrap();
    merge_heads(&out)
}

#[test]
fn local_equals_dense_oracle_across_seeds() {
    let mut worst = 0.0f64;
    for seed in 0..120 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = rng.gen_range(1..=128);
        let r = rng.gen_range(0..=l);
        let c = random_case(&mut rng, l, r, 8);
        worst = worst.max(local_kernel(&c).max_abs_diff(&local_oracle(&c)));
    }
    assert!(worst < 1e-9, "max abs diff {worst}");
}

#[test]
fn tglobal_equals_augmented_oracle_across_seeds() {
    let mut worst = 0.0f64;
    for seed in 0..120 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let l = rng.gen_range(1..=128);
        let r = rng.gen_range(0..=l.min(16));
        let k = [4, 8, 16][rng.gen_range(0..3)];
        let c = random_case(&mut rng, l, r, k);
        worst = worst.max(tglobal_kernel(&c).max_abs_diff(&tglobal_oracle(&c)));
    }
    assert!(worst < 1e-9, "max abs diff {worst}");
}

#[test]
fn band_covering_sequence_is_full_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let l = 9;
    let mut c = random_case(&mut rng, l, 8, 4);
    c.batch = PackedBatch::single(vec![3; l]);
    let h = c.cfg.num_heads;
    let full = AttentionMask::from_fn(l, l, |_, _| true);
    let dense = dense_attention(
        &per_head(&c.q, h),
        &per_head(&c.k, h),
        &per_head(&c.v, h),
        Some(&token_bias(&c, l)),
        &full,
    )
    .unwrap();
    assert!(local_kernel(&c).max_abs_diff(&merge_heads(&dense)) <= 1e-12);
}

#[test]
fn one_block_tglobal_is_dense_over_tokens_plus_one_global() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let l = 12;
    let mut c = random_case(&mut rng, l, l - 1, 16);
    c.batch = PackedBatch::single(vec![3; l]);
    assert_eq!(c.kg.rows(), 1);
    assert!(tglobal_kernel(&c).max_abs_diff(&tglobal_oracle(&c)) <= 1e-12);
}

#[test]
fn stated_examples_l64_r4_and_l32_r4_k8() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let c = random_case(&mut rng, 64, 4, 8);
    assert!(local_kernel(&c).max_abs_diff(&local_oracle(&c)) < 1e-9);
    let c = random_case(&mut rng, 32, 4, 8);
    assert!(tglobal_kernel(&c).max_abs_diff(&tglobal_oracle(&c)) < 1e-9);
}

#[test]
fn score_memory_per_head_is_band_sized() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (l, r) in [(200, 5), (64, 4), (10, 30)] {
        let c = random_case(&mut rng, l, r, 8);
        memtrack::reset_peak();
        local_kernel(&c);
        assert!(memtrack::score_peak_per_head() <= l * (2 * r + 1));
        assert!(memtrack::score_peak_per_head() < l * l || l <= 2 * r + 1);
    }
}

#[test]
fn kernel_work_equals_kv_pair_count() {
    for seed in 0..40 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let l = rng.gen_range(1..=100);
        let r = rng.gen_range(0..=12);
        let k = rng.gen_range(1..=10);
        let c = random_case(&mut rng, l, r, k);
        memtrack::reset_kv_pairs();
        local_kernel(&c);
        assert_eq!(
            memtrack::kv_pairs(),
            count_kv_pairs(l, r, k, AttentionMode::Local, Some(&c.batch))
        );
        memtrack::reset_kv_pairs();
        tglobal_kernel(&c);
        assert_eq!(
            memtrack::kv_pairs(),
            count_kv_pairs(l, r, k, AttentionMode::TGlobal, Some(&c.batch))
        );
    }
}

fn brute_popcount(l: usize, r: usize, k: usize, mode: AttentionMode, b: &PackedBatch) -> u64 {
    let s = &b.segment_ids;
    let mut n = 0u64;
    for i in 0..l {
        for j in 0..l {
            let same = s[i] != 0 && s[i] == s[j];
            n += match mode {
                AttentionMode::Dense => same,
                _ => same && i.abs_diff(j) <= r,
            } as u64;
        }
    }
    if mode == AttentionMode::TGlobal {
        n += build_global_mask(b, &global_segments(b, k)).count() as u64;
    }
    n
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn kv_counts_match_brute_force(seed in any::<u64>(), l in 1usize..80, r in 0usize..20, k in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = random_packing(&mut rng, l);
        for mode in AttentionMode::ALL {
            let got = count_kv_pairs(l, r, k, mode, Some(&b));
            prop_assert_eq!(got, brute_popcount(l, r, k, mode, &b));
        }
        let local = count_kv_pairs(l, r, k, AttentionMode::Local, Some(&b));
        let tg = count_kv_pairs(l, r, k, AttentionMode::TGlobal, Some(&b));
        prop_assert!(local <= (l * (2 * r + 1)) as u64);
        prop_assert!(tg <= (l * (2 * r + 1) + l * l.div_ceil(k)) as u64);
    }
}

struct Layer {
    cfg: AttentionConfig,
    x: Tensor<f64>,
    params: Vec<Tensor<f64>>,
}

/// x, pre-norm scale, q, k, v, o, rel bias, side bias, global norm.
fn random_layer(rng: &mut ChaCha8Rng, l: usize, cfg: AttentionConfig) -> Layer {
    let dm = cfg.d_model();
    let w = 1.0 / (dm as f64).sqrt();
    let mut params = vec![rand_tensor(rng, &[dm], 1.0).map(|v| 1.0 + 0.3 * v)];
    for _ in 0..4 {
        params.push(rand_tensor(rng, &[dm, dm], 2.0 * w));
    }
    params.push(rand_tensor(rng, &[cfg.num_heads, cfg.num_buckets], 0.5));
    params.push(rand_tensor(rng, &[cfg.num_heads, cfg.num_buckets], 0.5));
    params.push(rand_tensor(rng, &[dm], 1.0).map(|v| 1.0 + 0.3 * v));
    Layer {
        x: rand_tensor(rng, &[l, dm], 1.0),
        params,
        cfg,
    }
}

fn run_layer(
    tape: &mut Tape<f64>,
    vars: &[tglobal_core::Var],
    batch: &PackedBatch,
    cfg: &AttentionConfig,
    mode: AttentionMode,
    path: AttentionPath,
) -> tglobal_core::Result<tglobal_core::Var> {
    let x = vars[0];
    let h = tape.rms_norm(x, vars[1])?;
    let w = AttentionWeights {
        q: vars[2],
        k: vars[3],
        v: vars[4],
        o: vars[5],
        rel_bias: vars[6],
        side_bias: Some(vars[7]),
        global_norm: Some(vars[8]),
    };
    let a = self_attention(tape, h, &w, batch, cfg, mode, path)?;
    tape.add(x, a)
}

fn layer_output(
    layer: &Layer,
    x: &Tensor<f64>,
    batch: &PackedBatch,
    mode: AttentionMode,
    path: AttentionPath,
) -> Tensor<f64> {
    let mut tape = Tape::new();
    let mut vars = vec![tape.input(x.clone())];
    vars.extend(layer.params.iter().map(|p| tape.param(p.clone())));
    let out = run_layer(&mut tape, &vars, batch, &layer.cfg, mode, path).unwrap();
    tape.value(out).clone()
}

#[test]
fn layer_kernel_path_matches_oracle_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..10 {
        let l = rng.gen_range(4..60);
        let cfg = AttentionConfig {
            radius: rng.gen_range(0..8),
            block_size: rng.gen_range(2..9),
            num_heads: 2,
            head_dim: 3,
            num_buckets: 16,
            max_distance: 32,
        };
        let layer = random_layer(&mut rng, l, cfg);
        let batch = random_packing(&mut rng, l);
        for mode in [AttentionMode::Local, AttentionMode::TGlobal] {
            let a = layer_output(&layer, &layer.x, &batch, mode, AttentionPath::Kernel);
            let b = layer_output(&layer, &layer.x, &batch, mode, AttentionPath::Oracle);
            assert!(a.max_abs_diff(&b) < 1e-10, "{mode}");
        }
    }
}

fn segment_rows(batch: &PackedBatch, seg: u32) -> Vec<usize> {
    (0..batch.len()).filter(|&i| batch.segment_ids[i] == seg).collect()
}

#[test]
fn no_cross_segment_leakage() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let cfg = AttentionConfig {
        radius: 6,
        block_size: 4,
        num_heads: 2,
        head_dim: 3,
        num_buckets: 16,
        max_distance: 32,
    };
    let segs: Vec<u32> = [vec![1; 13], vec![0; 2], vec![2; 9], vec![3; 8]].concat();
    let batch = PackedBatch::from_segments(vec![4; segs.len()], segs).unwrap();
    let gsegs = global_segments(&batch, cfg.block_size);
    let layer = random_layer(&mut rng, batch.len(), cfg);
    let dm = cfg.d_model();
    for mode in [AttentionMode::Local, AttentionMode::TGlobal] {
        let base = layer_output(&layer, &layer.x, &batch, mode, AttentionPath::Kernel);
        for a in 1..=3u32 {
            for &t in &segment_rows(&batch, a) {
                let mut x = layer.x.clone();
                for c in 0..dm {
                    x.data_mut()[t * dm + c] += rng.gen_range(-3.0..3.0);
                }
                let out = layer_output(&layer, &x, &batch, mode, AttentionPath::Kernel);
                for b in (1..=3u32).filter(|&b| b != a) {
                    if mode == AttentionMode::TGlobal && gsegs[t / cfg.block_size] == b {
                        continue;
                    }
                    for &i in &segment_rows(&batch, b) {
                        assert_eq!(
                            out.row(i),
                            base.row(i),
                            "{mode}: token {t} of {a} leaked into row {i} of {b}"
                        );
                    }
                }
            }
        }
    }
}

fn layer_grad_check(mode: AttentionMode) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let cfg = AttentionConfig {
        radius: 3,
        block_size: 4,
        num_heads: 2,
        head_dim: 4,
        num_buckets: 16,
        max_distance: 32,
    };
    let l = 20;
    let layer = random_layer(&mut rng, l, cfg);
    let batch = PackedBatch::from_segments(vec![4; l], [vec![1; 11], vec![0; 1], vec![2; 8]].concat()).unwrap();
    let proj = rand_tensor(&mut rng, &[l, cfg.d_model()], 1.0);
    let mut params = vec![layer.x.clone()];
    params.extend(layer.params.iter().cloned());
    let used = if mode == AttentionMode::TGlobal {
        params.len()
    } else {
        params.len() - 2
    };
    params.truncate(used);
    let report = grad_check(
        |tape, vars| {
            let mut all = vars.to_vec();
            while all.len() < 9 {
                all.push(tape.constant(Tensor::ones(&[1])));
            }
            let out = run_layer(tape, &all, &batch, &cfg, mode, AttentionPath::Kernel)?;
            tape.weighted_sum(out, &proj)
        },
        &params,
        &GradCheckOptions::default(),
    )
    .unwrap();
    for (p, c) in params.iter().zip(&report.params) {
        assert_eq!(c.checked, p.len().min(64));
    }
    report.max_rel_err()
}

#[test]
fn local_layer_gradients_match_finite_differences() {
    let err = layer_grad_check(AttentionMode::Local);
    assert!(err < 1e-5, "max rel err {err}");
}

#[test]
fn tglobal_layer_gradients_match_finite_differences() {
    let err = layer_grad_check(AttentionMode::TGlobal);
    assert!(err < 1e-5, "max rel err {err}");
}
