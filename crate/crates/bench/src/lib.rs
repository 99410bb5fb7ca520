//! Throughput and memory measurements for the three encoder attention modes.
//!
//! One benchmark step is a forward and backward pass of a one-layer encoder
//! (attention plus feed-forward, `f32`) over a batch of random
//! single-example sequences. Memory is reported as the peak number of live
//! tensor floats for one sequence, which is deterministic.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tglobal_core::attention::{count_kv_pairs, AttentionPath};
use tglobal_core::model::{bind, Forward};
use tglobal_core::numerics::memtrack;
use tglobal_core::{AttentionConfig, AttentionMode, Model, ModelConfig, PackedBatch, Tape, Tensor};

/// Environment variable overriding the number of worker threads.
pub const THREADS_ENV: &str = "TGLOBAL_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] tglobal_core::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, BenchError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub radius: usize,
    pub block_size: usize,
    pub batch: usize,
    pub warmup_steps: usize,
    pub timed_steps: usize,
    pub repetitions: usize,
    /// Points whose peak live floats exceed this are recorded as exhausted.
    pub memory_budget: Option<usize>,
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            num_heads: 4,
            d_ff: 256,
            radius: 127,
            block_size: 16,
            batch: 8,
            warmup_steps: 1,
            timed_steps: 1,
            repetitions: 3,
            memory_budget: None,
            threads: 1,
            seed: 0,
        }
    }
}

impl BenchConfig {
    /// Thread count from [`THREADS_ENV`] when set, otherwise `self.threads`.
    pub fn with_env_threads(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(THREADS_ENV) {
            self.threads = v
                .parse()
                .ok()
                .filter(|&t| t > 0)
                .ok_or_else(|| BenchError::Invalid(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
        }
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(BenchError::Invalid("d_model must be a multiple of num_heads".into()));
        }
        if self.batch == 0 || self.timed_steps == 0 || self.repetitions == 0 || self.threads == 0 {
            return Err(BenchError::Invalid(
                "batch, timed_steps, repetitions and threads must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn model_config(&self, mode: AttentionMode, vocab_size: usize) -> ModelConfig {
        let attention = AttentionConfig {
            radius: self.radius,
            block_size: self.block_size,
            num_heads: self.num_heads,
            head_dim: self.d_model / self.num_heads,
            ..AttentionConfig::default()
        };
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            d_ff: self.d_ff,
            num_layers: 1,
            attention,
            encoder_mode: mode,
            dropout_rate: 0.0,
            max_target_len: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub mode: AttentionMode,
    pub l: usize,
    pub r: usize,
    pub k: usize,
    pub d_model: usize,
    pub heads: usize,
    pub batch: usize,
    pub steps_timed: usize,
    /// Median wall time of one repetition of `steps_timed` steps.
    pub wall_seconds: f64,
    pub sequences_per_second: f64,
    /// Attended (query, key) pairs per sequence.
    pub kv_pairs: u64,
    /// Peak live tensor floats for one sequence's forward and backward pass.
    pub peak_live_floats: usize,
    pub exhausted: bool,
}

const VOCAB: usize = 512;

/// A fixed batch of random sequences and an f32 encoder to push them through.
pub struct Workload {
    model: Model<f32>,
    sequences: Vec<(PackedBatch, Tensor<f32>)>,
}

impl Workload {
    pub fn new(cfg: &BenchConfig, mode: AttentionMode, l: usize) -> Result<Self> {
        let model: Model<f64> = Model::new(cfg.model_config(mode, VOCAB), cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (l as u64).rotate_left(32));
        let sequences = (0..cfg.batch)
            .map(|_| {
                let tokens = (0..l).map(|_| rng.gen_range(3..VOCAB as u32)).collect();
                let proj = Tensor::from_fn(&[l, cfg.d_model], |_| rng.gen_range(-1.0f32..1.0));
                (PackedBatch::single(tokens), proj)
            })
            .collect();
        Ok(Self {
            model: model.cast(),
            sequences,
        })
    }

    fn sequence(&self, i: usize) -> Result<f32> {
        let (batch, proj) = &self.sequences[i];
        let mut tape: Tape<f32> = Tape::new();
        let vars = bind(&mut tape, &self.model.params, true);
        let mut fwd = Forward {
            tape: &mut tape,
            vars: &vars,
            layout: &self.model.layout,
            cfg: &self.model.config,
            path: AttentionPath::Kernel,
            rng: None,
        };
        let out = fwd.encoder(batch)?;
        let loss = tape.weighted_sum(out, proj)?;
        let grads = tape.backward(loss)?;
        drop(grads);
        Ok(tape.value(loss).item())
    }

    /// One forward and backward pass over every sequence in the batch.
    pub fn step(&self, threads: usize) -> Result<()> {
        let n = self.sequences.len();
        if threads <= 1 {
            for i in 0..n {
                self.sequence(i)?;
            }
            return Ok(());
        }
        std::thread::scope(|s| {
            let workers: Vec<_> = (0..threads.min(n))
                .map(|t| {
                    s.spawn(move || -> Result<()> {
                        for i in (t..n).step_by(threads) {
                            self.sequence(i)?;
                        }
                        Ok(())
                    })
                })
                .collect();
            workers
                .into_iter()
                .try_for_each(|w| w.join().expect("benchmark worker panicked"))
        })
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Peak live floats of one sequence, and whether it crossed `budget`.
/// Also checks that the kernel visited exactly the counted pairs.
pub fn probe_memory(cfg: &BenchConfig, mode: AttentionMode, l: usize) -> Result<(usize, bool)> {
    cfg.validate()?;
    let w = Workload::new(
        &BenchConfig {
            batch: 1,
            ..cfg.clone()
        },
        mode,
        l,
    )?;
    memtrack::set_budget(cfg.memory_budget.map(|b| b + memtrack::live()));
    memtrack::reset_peak();
    memtrack::reset_kv_pairs();
    let base = memtrack::live();
    let run = w.sequence(0);
    let peak = memtrack::peak() - base;
    let exceeded = memtrack::budget_exceeded();
    memtrack::set_budget(None);
    run?;
    let counted = count_kv_pairs(l, cfg.radius, cfg.block_size, mode, None);
    if memtrack::kv_pairs() != counted {
        return Err(BenchError::Invalid(format!(
            "{mode} l={l}: kernel scored {} pairs, count_kv_pairs says {counted}",
            memtrack::kv_pairs()
        )));
    }
    Ok((peak, exceeded))
}

/// Measure every (mode, length) pair. Points over the memory budget are
/// recorded as exhausted and skipped; the sweep continues.
pub fn run_benchmark(cfg: &BenchConfig, lengths: &[usize], modes: &[AttentionMode]) -> Result<Vec<BenchPoint>> {
    cfg.validate()?;
    if lengths.is_empty() || modes.is_empty() {
        return Err(BenchError::Invalid("empty benchmark grid".into()));
    }
    let mut points = Vec::new();
    for &l in lengths {
        for &mode in modes {
            let (peak, exhausted) = probe_memory(cfg, mode, l)?;
            let mut point = BenchPoint {
                mode,
                l,
                r: cfg.radius,
                k: cfg.block_size,
                d_model: cfg.d_model,
                heads: cfg.num_heads,
                batch: cfg.batch,
                steps_timed: cfg.timed_steps,
                wall_seconds: 0.0,
                sequences_per_second: 0.0,
                kv_pairs: count_kv_pairs(l, cfg.radius, cfg.block_size, mode, None),
                peak_live_floats: peak,
                exhausted,
            };
            if !exhausted {
                let w = Workload::new(cfg, mode, l)?;
                for _ in 0..cfg.warmup_steps {
                    w.step(cfg.threads)?;
                }
                let mut times = Vec::with_capacity(cfg.repetitions);
                for _ in 0..cfg.repetitions {
                    let t = Instant::now();
                    for _ in 0..cfg.timed_steps {
                        w.step(cfg.threads)?;
                    }
                    times.push(t.elapsed().as_secs_f64());
                }
                point.wall_seconds = median(times).max(f64::MIN_POSITIVE);
                point.sequences_per_second = (cfg.batch * cfg.timed_steps) as f64 / point.wall_seconds;
            }
            points.push(point);
        }
    }
    Ok(points)
}

/// Largest length in `lengths` (ascending) whose single-sequence peak stays
/// within `budget`; `None` when even the first one does not.
pub fn memory_ceiling(
    cfg: &BenchConfig,
    mode: AttentionMode,
    lengths: &[usize],
    budget: usize,
) -> Result<Option<usize>> {
    let cfg = BenchConfig {
        memory_budget: Some(budget),
        ..cfg.clone()
    };
    let mut best = None;
    for &l in lengths {
        let (_, exhausted) = probe_memory(&cfg, mode, l)?;
        if exhausted {
            break;
        }
        best = Some(l);
    }
    Ok(best)
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Six significant digits in scientific notation.
pub fn sig6(x: f64) -> String {
    format!("{x:.5e}")
}

pub const CSV_HEADER: [&str; 9] = [
    "mode",
    "l",
    "r",
    "k",
    "d_model",
    "heads",
    "seq_per_sec",
    "kv_pairs",
    "peak_live_floats",
];

/// CSV text; `seq_per_sec` is empty for exhausted points.
pub fn report_csv(points: &[BenchPoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for p in points {
        let speed = if p.exhausted {
            String::new()
        } else {
            sig6(p.sequences_per_second)
        };
        w.write_record([
            p.mode.to_string(),
            p.l.to_string(),
            p.r.to_string(),
            p.k.to_string(),
            p.d_model.to_string(),
            p.heads.to_string(),
            speed,
            p.kv_pairs.to_string(),
            p.peak_live_floats.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| BenchError::Invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn report_json(points: &[BenchPoint]) -> Result<String> {
    serde_json::to_string_pretty(points).map_err(|e| BenchError::Invalid(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

pub fn emit_report(points: &[BenchPoint], path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => report_csv(points)?,
        ReportFormat::Json => report_json(points)?,
    };
    std::fs::write(path, text).map_err(|source| BenchError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub const KV_HEADER: [&str; 5] = ["mode", "l", "r", "k", "kv_pairs"];

/// Attended pair counts for a single-segment sequence at every grid point.
/// Nothing is timed, so the output is exact.
pub fn report_kv(cfg: &BenchConfig, lengths: &[usize], modes: &[AttentionMode]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(KV_HEADER)?;
    for &l in lengths {
        for &mode in modes {
            let kv = count_kv_pairs(l, cfg.radius, cfg.block_size, mode, None);
            w.write_record([
                mode.to_string(),
                l.to_string(),
                cfg.radius.to_string(),
                cfg.block_size.to_string(),
                kv.to_string(),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| BenchError::Invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One parsed CSV row.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CsvRow {
    pub mode: AttentionMode,
    pub l: usize,
    pub r: usize,
    pub k: usize,
    pub d_model: usize,
    pub heads: usize,
    pub seq_per_sec: Option<f64>,
    pub kv_pairs: u64,
    pub peak_live_floats: usize,
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    if headers.iter().ne(CSV_HEADER) {
        return Err(BenchError::Invalid(format!("unexpected CSV header {headers:?}")));
    }
    r.deserialize().map(|row| row.map_err(BenchError::from)).collect()
}

/// The CSV with the timing column blanked, for determinism comparisons.
pub fn mask_timing(csv_text: &str) -> String {
    let mut out = String::new();
    for (i, line) in csv_text.lines().enumerate() {
        let mut cols: Vec<&str> = line.split(',').collect();
        if i > 0 && cols.len() > 6 {
            cols[6] = "*";
        }
        let _ = writeln!(out, "{}", cols.join(","));
    }
    out
}
