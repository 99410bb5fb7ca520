use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{case_seed, digest_of, f64_bytes, u32_bytes, Suite, Tally, VerifyOptions};
use crate::attention::{
    build_global_mask, build_local_mask, dense_attention, global_segments, local_attention_op, num_blocks,
    relative_position_bucket, tglobal_attention_op,
};
use crate::{AttentionConfig, PackedBatch, Result, Tape, Tensor};

/// Random inputs for one attention-equivalence case.
#[derive(Debug, Clone)]
pub struct AttentionCase {
    pub cfg: AttentionConfig,
    pub batch: PackedBatch,
    pub q: Tensor<f64>,
    pub k: Tensor<f64>,
    pub v: Tensor<f64>,
    pub kg: Tensor<f64>,
    pub vg: Tensor<f64>,
    pub rel: Tensor<f64>,
    pub side: Tensor<f64>,
}

impl AttentionCase {
    pub fn digest(&self) -> String {
        let cfg = serde_json::to_vec(&self.cfg).expect("config serialises");
        let mut parts: Vec<Vec<u8>> = vec![cfg, u32_bytes(&self.batch.segment_ids)];
        for t in [&self.q, &self.k, &self.v, &self.kg, &self.vg, &self.rel, &self.side] {
            parts.push(f64_bytes(t.data()));
        }
        digest_of(&parts.iter().map(Vec::as_slice).collect::<Vec<_>>())
    }
}

fn rand_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Segments of random length with occasional padding gaps.
pub(crate) fn random_packing(rng: &mut impl Rng, l: usize) -> PackedBatch {
    let mut segs = Vec::with_capacity(l);
    let mut next = 1u32;
    while segs.len() < l {
        if rng.gen_bool(0.25) {
            let gap = rng.gen_range(1..=3).min(l - segs.len());
            segs.extend(std::iter::repeat_n(0, gap));
            continue;
        }
        let n = rng.gen_range(1..=l.max(2) / 2 + 1).min(l - segs.len());
        segs.extend(std::iter::repeat_n(next, n));
        next += 1;
    }
    let tokens = segs.iter().map(|&s| if s == 0 { 0 } else { 5 }).collect();
    PackedBatch::from_segments(tokens, segs).expect("generated packing is valid")
}

/// `l ≤ 128`, `r ≤ 16`, `k ∈ {4, 8, 16}`, up to four heads, random packing.
pub fn attention_case(seed: u64) -> AttentionCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = rng.gen_range(1..=128);
    let r = rng.gen_range(0..=16);
    let k = [4, 8, 16][rng.gen_range(0..3)];
    let heads = rng.gen_range(1..=4);
    let cfg = AttentionConfig {
        radius: r,
        block_size: k,
        num_heads: heads,
        head_dim: rng.gen_range(1..=4),
        num_buckets: 16,
        max_distance: 40,
    };
    let dm = cfg.d_model();
    let g = num_blocks(l, k);
    AttentionCase {
        batch: random_packing(&mut rng, l),
        q: rand_tensor(&mut rng, &[l, dm], 1.5),
        k: rand_tensor(&mut rng, &[l, dm], 1.5),
        v: rand_tensor(&mut rng, &[l, dm], 1.0),
        kg: rand_tensor(&mut rng, &[g, dm], 1.5),
        vg: rand_tensor(&mut rng, &[g, dm], 1.0),
        rel: rand_tensor(&mut rng, &[heads, 16], 1.0),
        side: rand_tensor(&mut rng, &[heads, 16], 1.0),
        cfg,
    }
}

/// `[l × heads·hd]` → `[heads × l × hd]`.
fn per_head(t: &Tensor<f64>, heads: usize) -> Tensor<f64> {
    let (n, dm) = (t.rows(), t.last_dim());
    let hd = dm / heads;
    Tensor::from_fn(&[heads, n, hd], |idx| {
        let (h, rest) = (idx / (n * hd), idx % (n * hd));
        t.data()[(rest / hd) * dm + h * hd + rest % hd]
    })
}

/// `[heads × n × hd]` → `[n × heads·hd]`.
fn merge_heads(t: &Tensor<f64>) -> Tensor<f64> {
    let (h, n, hd) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    Tensor::from_fn(&[n, h * hd], |idx| {
        let (i, c) = (idx / (h * hd), idx % (h * hd));
        t.data()[((c / hd) * n + i) * hd + c % hd]
    })
}

pub fn local_kernel(c: &AttentionCase) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<_> = [&c.q, &c.k, &c.v, &c.rel]
        .iter()
        .map(|t| tape.input((*t).clone()))
        .collect();
    let out = local_attention_op(&mut tape, vars[0], vars[1], vars[2], vars[3], &c.batch, &c.cfg)?;
    Ok(tape.value(out).clone())
}

/// Dense attention under the band-and-segment mask, bias expanded per pair.
pub fn local_oracle(c: &AttentionCase) -> Result<Tensor<f64>> {
    let l = c.batch.len();
    let (h, nb) = (c.cfg.num_heads, c.cfg.num_buckets);
    let mask = build_local_mask(&c.batch, c.cfg.radius);
    let bias = Tensor::from_fn(&[h, l, l], |idx| {
        let (hh, i, j) = (idx / (l * l), (idx / l) % l, idx % l);
        c.rel.data()[hh * nb + relative_position_bucket(j as i64 - i as i64, nb, c.cfg.max_distance)]
    });
    let out = dense_attention(
        &per_head(&c.q, h),
        &per_head(&c.k, h),
        &per_head(&c.v, h),
        Some(&bias),
        &mask,
    )?;
    Ok(merge_heads(&out))
}

pub fn tglobal_kernel(c: &AttentionCase) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<_> = [&c.q, &c.k, &c.v, &c.kg, &c.vg, &c.rel, &c.side]
        .iter()
        .map(|t| tape.input((*t).clone()))
        .collect();
    let gsegs = global_segments(&c.batch, c.cfg.block_size);
    let out = tglobal_attention_op(
        &mut tape, vars[0], vars[1], vars[2], vars[3], vars[4], vars[5], vars[6], &c.batch, &gsegs, &c.cfg,
    )?;
    Ok(tape.value(out).clone())
}

/// Dense attention over keys `[tokens ⊕ globals]` with mask `[band ∥ global]`.
pub fn tglobal_oracle(c: &AttentionCase) -> Result<Tensor<f64>> {
    let l = c.batch.len();
    let (h, k, nb) = (c.cfg.num_heads, c.cfg.block_size, c.cfg.num_buckets);
    let g = num_blocks(l, k);
    let gsegs = global_segments(&c.batch, k);
    let mask = build_local_mask(&c.batch, c.cfg.radius).concat_cols(&build_global_mask(&c.batch, &gsegs))?;
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
        Tensor::new(vec![a.rows() + b.rows(), a.last_dim()], d)
    };
    let out = dense_attention(
        &per_head(&c.q, h),
        &per_head(&cat(&c.k, &c.kg)?, h),
        &per_head(&cat(&c.v, &c.vg)?, h),
        Some(&bias),
        &mask,
    )?;
    Ok(merge_heads(&out))
}

pub(super) fn run(opts: &VerifyOptions) -> Result<Tally> {
    let mut tally = Tally::new(Suite::AttnEquiv, "max_abs_diff", 1e-9);
    for i in 0..opts.seeds {
        let seed = case_seed(opts, i);
        let c = attention_case(seed);
        let local = local_kernel(&c)?.max_abs_diff(&local_oracle(&c)?);
        let tglobal = tglobal_kernel(&c)?.max_abs_diff(&tglobal_oracle(&c)?);
        let describe = |what: &str, d: f64| {
            format!(
                "{what}: l={} r={} k={} heads={} head_dim={} max abs diff {d:e}",
                c.batch.len(),
                c.cfg.radius,
                c.cfg.block_size,
                c.cfg.num_heads,
                c.cfg.head_dim
            )
        };
        tally.record(seed, local, || c.digest(), || describe("local", local));
        tally.record(seed, tglobal, || c.digest(), || describe("tglobal", tglobal));
    }
    Ok(tally)
}
