//! The `tglobal` command-line tool: data preparation, training, verification
//! suites and benchmarks.
//!
//! Every command prints its effective configuration as a single line starting
//! with `# tglobal` before doing any work.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use tglobal_bench::{BenchConfig, BenchError, ReportFormat};
use tglobal_core::model::{copy_batch, load_checkpoint, save_checkpoint, train_step, Adam, CopyTask, LrSchedule};
use tglobal_core::psg::io::{read_corpus, read_examples, read_packed, write_examples, write_packed};
use tglobal_core::psg::{
    build_examples, pack_examples, Overflow, PackConfig, PipelineConfig, PipelineStats, DEFAULT_SENTINELS,
};
use tglobal_core::verify::{run_suite, Fault, Suite, VerifyOptions};
use tglobal_core::{
    AttentionConfig, AttentionMode, Checkpoint, Document, Error as CoreError, Model, ModelConfig, Seq2SeqBatch, Vocab,
};

pub const EXIT_PROPERTY: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "tglobal",
    version,
    about = "Sparse long-input encoder attention: data, training, verification, benchmarks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Turn a JSONL corpus into pre-training examples.
    PrepareData(PrepareArgs),
    /// Train the toy encoder-decoder.
    Train(TrainArgs),
    /// Run an invariant suite and print a JSON verdict.
    Verify(VerifyArgs),
    /// Measure throughput and memory across attention modes and lengths.
    Bench(BenchArgs),
}

/// A command failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

/// A checked property did not hold.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct PropertyFailure(pub String);

fn core_code(e: &CoreError) -> i32 {
    match e {
        CoreError::Io { .. }
        | CoreError::Parse { .. }
        | CoreError::Format(_)
        | CoreError::Version(_)
        | CoreError::Json(_) => EXIT_IO,
        CoreError::Invalid(_) | CoreError::TooLong { .. } => EXIT_USAGE,
        _ => EXIT_PROPERTY,
    }
}

fn classify(error: anyhow::Error) -> Failure {
    let mut code = EXIT_PROPERTY;
    for cause in error.chain() {
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            code = core_code(e);
            break;
        }
        if let Some(e) = cause.downcast_ref::<BenchError>() {
            code = match e {
                BenchError::Core(c) => core_code(c),
                BenchError::Io { .. } | BenchError::Csv(_) => EXIT_IO,
                BenchError::Invalid(_) => EXIT_USAGE,
            };
            break;
        }
        if cause.is::<std::io::Error>() {
            code = EXIT_IO;
            break;
        }
        if cause.is::<PropertyFailure>() {
            break;
        }
    }
    Failure { code, error }
}

pub fn run(cli: &Cli) -> Result<(), Failure> {
    let result = match &cli.command {
        Command::PrepareData(a) => prepare_data(a),
        Command::Train(a) => train(a),
        Command::Verify(a) => verify(a),
        Command::Bench(a) => bench(a),
    };
    result.map_err(classify)
}

fn echo(command: &str, config: &impl Serialize) -> anyhow::Result<()> {
    println!("# tglobal {command} {}", serde_json::to_string(config)?);
    Ok(())
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(CoreError::Invalid(msg.into()))
}

fn parse_mode(s: &str) -> Result<AttentionMode, String> {
    s.parse().map_err(|e: CoreError| e.to_string())
}

fn parse_suite(s: &str) -> Result<SuiteArg, String> {
    if s == "all" {
        return Ok(SuiteArg::All);
    }
    s.parse().map(SuiteArg::One).map_err(|e: CoreError| e.to_string())
}

fn parse_fault(s: &str) -> Result<Fault, String> {
    s.parse().map_err(|e: CoreError| e.to_string())
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

// ---------------------------------------------------------------- prepare-data

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveArg {
    /// Principle-sentence generation.
    Psg,
    /// Span corruption.
    Sc,
    /// Each document picks one of the two; see --span-fraction.
    Mix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OverflowArg {
    Truncate,
    Reject,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PrepareArgs {
    /// JSONL corpus with `id` and `text` fields.
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Psg)]
    pub objective: ObjectiveArg,
    /// Fraction of sentences masked per document.
    #[arg(long, default_value_t = tglobal_core::psg::DEFAULT_MASK_RATIO)]
    pub ratio: f64,
    /// Share of span-corruption documents under `--objective mix`.
    #[arg(long, default_value_t = 0.5)]
    pub span_fraction: f64,
    #[arg(long, default_value_t = tglobal_core::psg::DEFAULT_CORRUPTION_RATE)]
    pub corruption_rate: f64,
    #[arg(long, default_value_t = tglobal_core::psg::DEFAULT_MEAN_SPAN)]
    pub mean_span: f64,
    /// Packed sequence length.
    #[arg(long, default_value_t = 4096)]
    pub input_len: usize,
    #[arg(long, default_value_t = 16)]
    pub block_size: usize,
    /// Pad packed targets to this length.
    #[arg(long)]
    pub target_len: Option<usize>,
    /// Also write packed sequences.
    #[arg(long)]
    pub pack: bool,
    /// What to do with inputs longer than --input-len when packing.
    #[arg(long, value_enum, default_value_t = OverflowArg::Truncate)]
    pub overflow: OverflowArg,
    #[arg(long, default_value_t = tglobal_core::psg::DEFAULT_VOCAB_CAP)]
    pub vocab_cap: usize,
    /// Reuse an existing vocabulary instead of building one from the corpus.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "data")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Serialize)]
struct PackStats {
    sequences: usize,
    input_len: usize,
    fill: f64,
}

fn prepare_data(a: &PrepareArgs) -> anyhow::Result<()> {
    echo("prepare-data", a)?;
    if !(a.ratio > 0.0 && a.ratio <= 1.0) {
        return Err(usage(format!("--ratio {} outside (0, 1]", a.ratio)));
    }
    if !(0.0..=1.0).contains(&a.span_fraction) {
        return Err(usage(format!("--span-fraction {} outside [0, 1]", a.span_fraction)));
    }
    let records = read_corpus(&a.corpus)?;
    let vocab = match &a.vocab {
        Some(p) => Vocab::from_json(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => Vocab::build(records.iter().map(|r| r.text.as_str()), a.vocab_cap, DEFAULT_SENTINELS),
    };
    let docs: Vec<Document> = records
        .iter()
        .map(|r| Document::from_text(&r.id, &r.text, &vocab))
        .collect();
    let cfg = PipelineConfig {
        mask_ratio: a.ratio,
        corruption_rate: a.corruption_rate,
        mean_span: a.mean_span,
        span_fraction: match a.objective {
            ObjectiveArg::Psg => 0.0,
            ObjectiveArg::Sc => 1.0,
            ObjectiveArg::Mix => a.span_fraction,
        },
        seed: a.seed,
    };
    let (examples, stats): (_, PipelineStats) = build_examples(&docs, &vocab, &cfg)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    write_examples(&a.out_dir.join("examples.jsonl"), &examples)?;
    write_file(&a.out_dir.join("vocab.json"), &vocab.to_json())?;
    let packing = if a.pack {
        let pack_cfg = PackConfig {
            input_len: a.input_len,
            block_size: a.block_size,
            target_len: a.target_len,
            overflow: match a.overflow {
                OverflowArg::Truncate => Overflow::Truncate,
                OverflowArg::Reject => Overflow::Reject,
            },
        };
        let seqs = pack_examples(&examples, &pack_cfg)?;
        write_packed(&a.out_dir.join("packed.bin"), &seqs, &pack_cfg)?;
        let used: usize = seqs.iter().map(|s| s.used()).sum();
        Some(PackStats {
            sequences: seqs.len(),
            input_len: a.input_len,
            fill: if seqs.is_empty() {
                0.0
            } else {
                used as f64 / (seqs.len() * a.input_len) as f64
            },
        })
    } else {
        None
    };
    let report = json!({
        "examples": examples.len(),
        "vocab_size": vocab.size(),
        "pipeline": stats,
        "packing": packing,
    });
    let text = serde_json::to_string_pretty(&report)?;
    write_file(&a.out_dir.join("stats.json"), &(text.clone() + "\n"))?;
    println!("{text}");
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskArg {
    /// Reproduce a random input sequence.
    Copy,
    /// Pre-train on examples from `prepare-data`.
    PsgPretrain,
    /// Continue from `--init` with a fresh optimizer.
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleArg {
    Constant,
    InverseSqrt,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// Encoder attention; defaults to tglobal, or the `--init` checkpoint's mode.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<AttentionMode>,
    #[arg(long, value_enum, default_value_t = TaskArg::Copy)]
    pub task: TaskArg,
    /// Examples (`.jsonl`) or a packed container for the pre-training tasks.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Starting checkpoint for fine-tuning.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Continue an interrupted run from its checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value = "checkpoint.bin")]
    pub out: PathBuf,
    #[arg(long, default_value = "metrics.jsonl")]
    pub metrics: PathBuf,
    /// Total optimizer steps, counting any resumed ones.
    #[arg(long, default_value_t = 2000)]
    pub steps: u64,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    /// Defaults: constant for copy and finetune, inverse-sqrt for pre-training.
    #[arg(long, value_enum)]
    pub lr_schedule: Option<ScheduleArg>,
    /// Constant rate. Defaults: 3e-3 for copy, 1e-3 for finetune.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 10_000)]
    pub warmup: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Held-out evaluation interval for the copy task.
    #[arg(long, default_value_t = 100)]
    pub eval_every: u64,
    #[arg(long, default_value_t = 8)]
    pub eval_size: usize,
    /// Stop the copy task once held-out token accuracy reaches this.
    #[arg(long, default_value_t = 0.95)]
    pub target_accuracy: f64,
    #[arg(long)]
    pub no_early_stop: bool,
    /// Also write the checkpoint every this many steps.
    #[arg(long)]
    pub save_every: Option<u64>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub num_heads: Option<usize>,
    #[arg(long)]
    pub head_dim: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub num_layers: Option<usize>,
    #[arg(long)]
    pub radius: Option<usize>,
    #[arg(long)]
    pub block_size: Option<usize>,
    #[arg(long)]
    pub num_buckets: Option<usize>,
    #[arg(long)]
    pub max_distance: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub max_target_len: Option<usize>,
    /// Copy-task sequence length.
    #[arg(long, default_value_t = 256)]
    pub input_len: usize,
    /// Copy-task target starts this many tokens into the input.
    #[arg(long, default_value_t = 0)]
    pub copy_offset: usize,
}

pub const FINETUNE_DROPOUT: f64 = 0.1;

/// Model used by the copy task unless flags override it.
pub fn copy_task_config(mode: AttentionMode) -> ModelConfig {
    let attention = AttentionConfig {
        radius: 8,
        block_size: 16,
        num_heads: 4,
        head_dim: 16,
        num_buckets: 32,
        max_distance: 128,
    };
    ModelConfig {
        vocab_size: 64,
        d_model: attention.d_model(),
        d_ff: 128,
        num_layers: 2,
        attention,
        encoder_mode: mode,
        dropout_rate: 0.0,
        max_target_len: 256,
    }
}

impl TrainArgs {
    fn model_config(&self, inferred_vocab: Option<usize>) -> ModelConfig {
        let mut cfg = match self.task {
            TaskArg::Copy => ModelConfig {
                max_target_len: self.input_len,
                ..copy_task_config(self.mode.unwrap_or(AttentionMode::TGlobal))
            },
            _ => ModelConfig {
                encoder_mode: self.mode.unwrap_or(AttentionMode::TGlobal),
                vocab_size: inferred_vocab.unwrap_or(ModelConfig::default().vocab_size),
                ..ModelConfig::default()
            },
        };
        let a = &mut cfg.attention;
        a.num_heads = self.num_heads.unwrap_or(a.num_heads);
        a.head_dim = self.head_dim.unwrap_or(a.head_dim);
        a.radius = self.radius.unwrap_or(a.radius);
        a.block_size = self.block_size.unwrap_or(a.block_size);
        a.num_buckets = self.num_buckets.unwrap_or(a.num_buckets);
        a.max_distance = self.max_distance.unwrap_or(a.max_distance);
        cfg.d_model = cfg.attention.d_model();
        cfg.vocab_size = self.vocab_size.unwrap_or(cfg.vocab_size);
        cfg.d_ff = self.d_ff.unwrap_or(cfg.d_ff);
        cfg.num_layers = self.num_layers.unwrap_or(cfg.num_layers);
        cfg.dropout_rate = self.dropout.unwrap_or(cfg.dropout_rate);
        cfg.max_target_len = self.max_target_len.unwrap_or(cfg.max_target_len);
        cfg
    }

    fn schedule(&self) -> LrSchedule {
        let kind = self.lr_schedule.unwrap_or(match self.task {
            TaskArg::PsgPretrain => ScheduleArg::InverseSqrt,
            _ => ScheduleArg::Constant,
        });
        match kind {
            ScheduleArg::InverseSqrt => LrSchedule::InverseSqrt { warmup: self.warmup },
            ScheduleArg::Constant => LrSchedule::Constant {
                lr: self.lr.unwrap_or(match self.task {
                    TaskArg::Copy => 3e-3,
                    _ => 1e-3,
                }),
            },
        }
    }

    /// Run settings stored in the checkpoint; paths and the step budget are
    /// left out so a resumed run writes the same bytes as an uninterrupted one.
    fn meta(&self, schedule: &LrSchedule) -> serde_json::Value {
        json!({
            "task": self.task,
            "seed": self.seed,
            "batch_size": self.batch_size,
            "lr_schedule": schedule,
            "eval_every": self.eval_every,
            "eval_size": self.eval_size,
            "input_len": self.input_len,
            "copy_offset": self.copy_offset,
        })
    }
}

/// Where training minibatches come from.
enum Source {
    Copy {
        task: CopyTask,
        held_out: Vec<Seq2SeqBatch>,
    },
    Examples(Vec<Seq2SeqBatch>),
}

impl Source {
    /// Minibatch for the step that brings the counter to `step + 1`; it depends
    /// only on the seed and the step, so resuming replays the same data.
    fn batch(&self, seed: u64, step: u64, size: usize) -> anyhow::Result<Vec<Seq2SeqBatch>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step);
        Ok(match self {
            Source::Copy { task, .. } => copy_batch(task, size, &mut rng)?,
            Source::Examples(all) => (0..size).map(|_| all[rng.gen_range(0..all.len())].clone()).collect(),
        })
    }
}

fn load_training_data(path: &Path, max_target_len: usize) -> anyhow::Result<Vec<Seq2SeqBatch>> {
    let batches: Vec<Seq2SeqBatch> = if path.extension().is_some_and(|e| e == "jsonl") {
        read_examples(path)?
            .into_iter()
            .map(|mut ex| {
                ex.target_ids.truncate(max_target_len);
                Seq2SeqBatch::single(ex.input_ids, ex.target_ids)
            })
            .collect::<Result<_, _>>()?
    } else {
        let (seqs, _) = read_packed(path)?;
        seqs.iter().map(|s| s.to_batch()).collect::<Result<_, _>>()?
    };
    let batches: Vec<_> = batches.into_iter().filter(|b| b.target_count() > 0).collect();
    if batches.is_empty() {
        return Err(usage(format!("{} holds no trainable examples", path.display())));
    }
    Ok(batches)
}

fn max_token(batches: &[Seq2SeqBatch]) -> usize {
    batches
        .iter()
        .flat_map(|b| b.encoder.tokens.iter().chain(&b.targets))
        .copied()
        .max()
        .unwrap_or(0) as usize
}

#[derive(Debug, Serialize)]
struct MetricsLine {
    step: u64,
    loss: f64,
    lr: f64,
    tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    accuracy: Option<f64>,
}

fn train(a: &TrainArgs) -> anyhow::Result<()> {
    if a.batch_size == 0 || a.eval_every == 0 {
        return Err(usage("--batch-size and --eval-every must be positive"));
    }
    let schedule = a.schedule();
    let data = match a.task {
        TaskArg::Copy => None,
        _ => {
            let path = a
                .data
                .as_ref()
                .ok_or_else(|| usage("--data is required for this task"))?;
            Some(load_training_data(
                path,
                a.max_target_len.unwrap_or(ModelConfig::default().max_target_len),
            )?)
        }
    };
    let (mut model, mut opt) = if let Some(path) = &a.resume {
        let ckpt = load_checkpoint(path)?;
        let opt = ckpt
            .optimizer
            .clone()
            .ok_or_else(|| usage(format!("{} has no optimizer state", path.display())))?;
        (ckpt.model()?, opt)
    } else if a.task == TaskArg::Finetune {
        let path = a
            .init
            .as_ref()
            .ok_or_else(|| usage("--init is required for finetune"))?;
        let mut model = load_checkpoint(path)?.model()?;
        if let Some(mode) = a.mode.filter(|&m| m != model.config.encoder_mode) {
            let cfg = ModelConfig {
                encoder_mode: mode,
                ..model.config.clone()
            };
            model = Model::from_params(cfg, model.params).map_err(|e| {
                usage(format!(
                    "{} cannot be fine-tuned with --mode {mode}: {e}",
                    path.display()
                ))
            })?;
        }
        model.config.dropout_rate = a.dropout.unwrap_or(FINETUNE_DROPOUT);
        let opt = Adam::new(&model);
        (model, opt)
    } else {
        let cfg = a.model_config(data.as_deref().map(|d| max_token(d) + 1));
        let model = Model::new(cfg, a.seed)?;
        let opt = Adam::new(&model);
        (model, opt)
    };
    echo(
        "train",
        &json!({"args": a, "model": model.config, "schedule": schedule, "start_step": opt.step}),
    )?;

    let source = match data {
        Some(d) => Source::Examples(d),
        None => {
            if a.copy_offset >= a.input_len {
                return Err(usage("--copy-offset must be below --input-len"));
            }
            let task = CopyTask {
                offset: a.copy_offset,
                target_len: a.input_len - a.copy_offset,
                ..CopyTask::new(model.config.vocab_size as u32, a.input_len)
            };
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            rng.set_stream(u64::MAX);
            let held_out = copy_batch(&task, a.eval_size, &mut rng)?;
            Source::Copy { task, held_out }
        }
    };
    let meta = a.meta(&schedule);
    let save = |model: &Model, opt: &Adam| -> anyhow::Result<()> {
        save_checkpoint(&a.out, &Checkpoint::from_model(model, Some(opt), meta.clone()))?;
        Ok(())
    };

    let metrics_file = if a.resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&a.metrics)
    } else {
        File::create(&a.metrics)
    }
    .with_context(|| format!("opening {}", a.metrics.display()))?;
    let mut metrics = BufWriter::new(metrics_file);

    let started = std::time::Instant::now();
    let mut last_accuracy = None;
    let mut stopped_early = false;
    while opt.step < a.steps {
        let step = opt.step;
        let batch = source.batch(a.seed, step, a.batch_size)?;
        let dropout_seed = a.seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let stats = match train_step(&mut model, &mut opt, &batch, &schedule, dropout_seed) {
            Ok(s) => s,
            Err(CoreError::NonFinite { op }) => {
                metrics.flush()?;
                return Err(anyhow!(PropertyFailure(format!(
                    "aborting: non-finite {op} at step {}",
                    step + 1
                ))));
            }
            Err(e) => return Err(e.into()),
        };
        let mut line = MetricsLine {
            step: stats.step,
            loss: stats.loss,
            lr: stats.lr,
            tokens: stats.tokens,
            accuracy: None,
        };
        if let Source::Copy { held_out, .. } = &source {
            if stats.step % a.eval_every == 0 {
                let (hit, n) = model.token_accuracy(held_out)?;
                let acc = hit as f64 / n as f64;
                line.accuracy = Some(acc);
                last_accuracy = Some(acc);
                eprintln!(
                    "step {} loss {:.4} accuracy {acc:.3} ({:.0}s)",
                    stats.step,
                    stats.loss,
                    started.elapsed().as_secs_f64()
                );
                stopped_early = !a.no_early_stop && acc >= a.target_accuracy;
            }
        }
        serde_json::to_writer(&mut metrics, &line)?;
        metrics.write_all(b"\n")?;
        if a.save_every.is_some_and(|n| n > 0 && stats.step % n == 0) {
            metrics.flush()?;
            save(&model, &opt)?;
        }
        if stopped_early {
            break;
        }
    }
    metrics.flush()?;
    save(&model, &opt)?;
    if let Source::Copy { held_out, .. } = &source {
        if opt.step % a.eval_every != 0 {
            let (hit, n) = model.token_accuracy(held_out)?;
            last_accuracy = Some(hit as f64 / n as f64);
        }
    }
    println!(
        "{}",
        serde_json::to_string(&json!({
            "steps": opt.step,
            "accuracy": last_accuracy,
            "stopped_early": stopped_early,
            "checkpoint": a.out,
        }))?
    );
    Ok(())
}

// ---------------------------------------------------------------- verify

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteArg {
    All,
    One(Suite),
}

impl Serialize for SuiteArg {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            SuiteArg::All => s.serialize_str("all"),
            SuiteArg::One(x) => s.serialize_str(x.as_str()),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct VerifyArgs {
    /// attn-equiv, gradcheck, psg-oracle, packing or all.
    #[arg(long, value_parser = parse_suite, default_value = "all")]
    pub suite: SuiteArg,
    #[arg(long, default_value_t = 100)]
    pub seeds: usize,
    #[arg(long, default_value_t = 0)]
    pub base_seed: u64,
    #[arg(long, value_parser = parse_fault, hide = true)]
    pub inject_fault: Option<Fault>,
}

fn verify(a: &VerifyArgs) -> anyhow::Result<()> {
    echo("verify", a)?;
    if a.seeds == 0 {
        return Err(usage("--seeds must be positive"));
    }
    let suites: Vec<Suite> = match a.suite {
        SuiteArg::All => Suite::ALL.to_vec(),
        SuiteArg::One(s) => vec![s],
    };
    let opts = VerifyOptions {
        seeds: a.seeds,
        base_seed: a.base_seed,
        fault: a.inject_fault,
    };
    let mut failed = Vec::new();
    for suite in suites {
        let verdict = run_suite(suite, &opts)?;
        println!("{}", verdict.to_json());
        if !verdict.passed {
            failed.push(suite.as_str());
        }
    }
    if !failed.is_empty() {
        bail!(PropertyFailure(format!("suite failed: {}", failed.join(", "))));
    }
    Ok(())
}

// ---------------------------------------------------------------- bench

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportArg {
    Csv,
    Json,
    /// Attended pair counts only; nothing is timed.
    Kv,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [512usize, 1024, 2048, 4096])]
    pub lengths: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_parser = parse_mode, default_values = ["dense", "local", "tglobal"])]
    pub modes: Vec<AttentionMode>,
    #[arg(long, value_enum, default_value_t = ReportArg::Csv)]
    pub report: ReportArg,
    #[arg(long, default_value = "bench.csv")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub num_heads: usize,
    #[arg(long, default_value_t = 256)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 127)]
    pub radius: usize,
    #[arg(long, default_value_t = 16)]
    pub block_size: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup_steps: usize,
    #[arg(long, default_value_t = 1)]
    pub timed_steps: usize,
    #[arg(long, default_value_t = 3)]
    pub repetitions: usize,
    /// Peak live floats per sequence above which a point counts as exhausted.
    #[arg(long)]
    pub memory_budget: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn bench(a: &BenchArgs) -> anyhow::Result<()> {
    let cfg = BenchConfig {
        d_model: a.d_model,
        num_heads: a.num_heads,
        d_ff: a.d_ff,
        radius: a.radius,
        block_size: a.block_size,
        batch: a.batch,
        warmup_steps: a.warmup_steps,
        timed_steps: a.timed_steps,
        repetitions: a.repetitions,
        memory_budget: a.memory_budget,
        threads: 1,
        seed: a.seed,
    }
    .with_env_threads()?;
    echo("bench", &json!({"args": a, "effective": cfg}))?;
    if a.lengths.is_empty() || a.modes.is_empty() {
        return Err(usage("--lengths and --modes must be non-empty"));
    }
    if a.report == ReportArg::Kv {
        let text = tglobal_bench::report_kv(&cfg, &a.lengths, &a.modes)?;
        write_file(&a.out, &text)?;
        print!("{text}");
        return Ok(());
    }
    let points = tglobal_bench::run_benchmark(&cfg, &a.lengths, &a.modes)?;
    let format = match a.report {
        ReportArg::Json => ReportFormat::Json,
        _ => ReportFormat::Csv,
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    tglobal_bench::emit_report(&points, &a.out, format)?;
    print!("{}", tglobal_bench::report_csv(&points)?);
    Ok(())
}
