use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attn::random_packing;
use super::{case_seed, digest_of, f64_bytes, u32_bytes, Suite, Tally, VerifyOptions};
use crate::attention::{self_attention, AttentionPath, AttentionWeights};
use crate::numerics::{grad_check, GradCheckOptions};
use crate::{AttentionConfig, AttentionMode, Result, Tensor};

/// Cases per run; each checks a Local and a TGlobal layer.
const MAX_CASES: usize = 3;

fn rand_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Residual pre-norm attention layer `x + Attn(norm(x))` with every parameter
/// holding at least 64 entries, reduced to a scalar by a fixed projection.
pub(super) fn run(opts: &VerifyOptions) -> Result<Tally> {
    let mut tally = Tally::new(Suite::Gradcheck, "max_rel_err", 1e-5);
    for i in 0..opts.seeds.min(MAX_CASES) {
        let seed = case_seed(opts, i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = AttentionConfig {
            radius: rng.gen_range(1..=4),
            block_size: [4, 8][rng.gen_range(0..2)],
            num_heads: 2,
            head_dim: 32,
            num_buckets: 32,
            max_distance: 64,
        };
        let dm = cfg.d_model();
        let l = rng.gen_range(12..=24);
        let batch = random_packing(&mut rng, l);
        let w = 1.0 / (dm as f64).sqrt();
        let mut params = vec![
            rand_tensor(&mut rng, &[l, dm], 1.0),
            rand_tensor(&mut rng, &[dm], 0.3).map(|v| 1.0 + v),
        ];
        for _ in 0..4 {
            params.push(rand_tensor(&mut rng, &[dm, dm], 2.0 * w));
        }
        params.push(rand_tensor(&mut rng, &[2, 32], 0.5));
        params.push(rand_tensor(&mut rng, &[2, 32], 0.5));
        params.push(rand_tensor(&mut rng, &[dm], 0.3).map(|v| 1.0 + v));
        let proj = rand_tensor(&mut rng, &[l, dm], 1.0);
        for mode in [AttentionMode::Local, AttentionMode::TGlobal] {
            let used = if mode == AttentionMode::TGlobal { 9 } else { 7 };
            let report = grad_check(
                |tape, v| {
                    let h = tape.rms_norm(v[0], v[1])?;
                    let weights = AttentionWeights {
                        q: v[2],
                        k: v[3],
                        v: v[4],
                        o: v[5],
                        rel_bias: v[6],
                        side_bias: v.get(7).copied(),
                        global_norm: v.get(8).copied(),
                    };
                    let a = self_attention(tape, h, &weights, &batch, &cfg, mode, AttentionPath::Kernel)?;
                    let y = tape.add(v[0], a)?;
                    tape.weighted_sum(y, &proj)
                },
                &params[..used],
                &GradCheckOptions {
                    seed,
                    ..GradCheckOptions::default()
                },
            )?;
            let err = report.max_rel_err();
            let under_sampled = report.min_checked() < 64;
            let digest = || {
                let mut parts = vec![u32_bytes(&batch.segment_ids)];
                parts.extend(params.iter().map(|p| f64_bytes(p.data())));
                digest_of(&parts.iter().map(Vec::as_slice).collect::<Vec<_>>())
            };
            let detail = || {
                format!(
                    "{mode}: l={l} r={} k={} max rel err {err:e}, fewest coordinates checked {}",
                    cfg.radius,
                    cfg.block_size,
                    report.min_checked()
                )
            };
            tally.record(seed, if under_sampled { f64::INFINITY } else { err }, digest, detail);
        }
    }
    Ok(tally)
}
