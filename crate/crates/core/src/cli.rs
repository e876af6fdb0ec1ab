//! Command-line entry point. Every command merges a JSON config file with
//! flags (flags win), writes the merged view to `run_config.json` in its
//! output directory and maps errors to stable exit codes.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checks::{battery, Faults};
use crate::data::{self, strip_eos, Example, TaskKind, TaskSpec};
use crate::decoding::{ar_greedy_batch, benchmark, nat_decode_batch, parallel_map, RefineConfig};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::model::{load_checkpoint, AnyModel, Arch, DraftInit, ModelConfig, Seq2Seq};
use crate::tensor::Real;
use crate::training::{distill_generate, train_loop, TrainConfig};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NonFinite(_) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub nat_checkpoint: Option<PathBuf>,
    pub ar_checkpoint: Option<PathBuf>,
    pub teacher: Option<PathBuf>,
    pub hyps: Option<PathBuf>,
    pub refs: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub out_dir: PathBuf,
}

/// Everything a command needs, after merging file and flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    /// Seeds data generation, initialization and training.
    pub seed: u64,
    pub precision: Precision,
    pub arch: Arch,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskSpec,
    pub refine: RefineConfig,
    pub n_examples: usize,
    pub batch_size: usize,
    pub workers: usize,
    /// Use only the first `limit` examples of the dataset.
    pub limit: Option<usize>,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            seed: 0,
            precision: Precision::F64,
            arch: Arch::Fouriernat,
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            task: TaskSpec::default(),
            refine: RefineConfig::default(),
            n_examples: 1000,
            batch_size: 16,
            workers: 1,
            limit: None,
            paths: Paths {
                out_dir: PathBuf::from("out"),
                ..Paths::default()
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fouriernat", version, about = "Non-autoregressive decoding with Fourier token mixing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset as JSON lines.
    GenerateData {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        task: TaskFlags,
        /// Number of examples.
        #[arg(long)]
        n: Option<usize>,
        /// Output file (default: <out-dir>/data.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model; writes curves.csv, best.fnat and last.fnat.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        arch: Option<Arch>,
        /// Training dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Validation dataset (default: the first 200 training examples).
        #[arg(long)]
        val: Option<PathBuf>,
        /// Replace training targets by this AR checkpoint's greedy decodes.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Replace targets by an AR teacher's greedy decodes.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output file (default: <out-dir>/distilled.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Decode a dataset with a checkpoint.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output file (default: <out-dir>/decoded.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Refinement passes after the first parallel pass.
        #[arg(long)]
        passes: Option<usize>,
        #[arg(long)]
        mask_ratio: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        limit: Option<usize>,
        /// Expected vocabulary size; must match the checkpoint.
        #[arg(long)]
        vocab: Option<usize>,
        /// Expected target length limit; must match the checkpoint.
        #[arg(long)]
        t_max: Option<usize>,
    },
    /// Score hypotheses against references; prints an EvalReport.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        hyps: Option<PathBuf>,
        #[arg(long)]
        refs: Option<PathBuf>,
    },
    /// Time NAT against AR decoding on the same data.
    Benchmark {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        nat: Option<PathBuf>,
        #[arg(long)]
        ar: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Refinement passes included in the NAT timing.
        #[arg(long)]
        refine_passes: Option<usize>,
        #[arg(long)]
        mask_ratio: Option<f64>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run the invariant battery.
    Selfcheck {
        #[command(flatten)]
        common: Common,
        /// Deliberately break a component to exercise the battery.
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<Fault>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Fault {
    IfftSign,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for run_config.json and default outputs.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
}

#[derive(Debug, Args)]
pub struct TaskFlags {
    #[arg(long)]
    pub kind: Option<TaskKind>,
    #[arg(long)]
    pub content_vocab: Option<usize>,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub t_max: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub t_max: Option<usize>,
    #[arg(long)]
    pub s_max: Option<usize>,
    /// Dropout rate while training.
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long, value_parser = parse_draft_init)]
    pub draft_init: Option<DraftInit>,
    #[arg(long)]
    pub combine_imag: Option<bool>,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub tokens_per_batch: Option<usize>,
    #[arg(long)]
    pub lr_scale: Option<f64>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    #[arg(long)]
    pub label_smoothing: Option<f64>,
    #[arg(long)]
    pub length_loss_weight: Option<f64>,
    #[arg(long)]
    pub partial_draft_prob: Option<f64>,
    /// Stop once validation sequence accuracy reaches this value.
    #[arg(long)]
    pub target_val_metric: Option<f64>,
    #[arg(long)]
    pub record_wall_clock: bool,
}

fn parse_draft_init(s: &str) -> std::result::Result<DraftInit, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown draft init {s:?} (zeros, mask_embedding)"))
}

macro_rules! set {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

/// Loads the config file (if any) and applies the flags shared by every
/// command. Also reports whether the file carried a `model` section.
fn base_config(name: &str, common: &Common) -> Result<(RunConfig, bool)> {
    let (mut cfg, has_model) = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.clone(),
                line: e.line(),
                message: e.to_string(),
            })?;
            let has_model = value.get("model").is_some();
            let cfg: RunConfig = serde_json::from_value(value)
                .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
            (cfg, has_model)
        }
        None => (RunConfig::default(), false),
    };
    cfg.command = name.to_string();
    set!(cfg.seed, common.seed);
    set!(cfg.paths.out_dir, common.out_dir.clone());
    set!(cfg.precision, common.precision);
    cfg.train.seed = cfg.seed;
    cfg.task.seed = cfg.seed;
    Ok((cfg, has_model))
}

fn apply_model(cfg: &mut ModelConfig, f: &ModelFlags) {
    set!(cfg.d, f.d);
    set!(cfg.n_layers, f.layers);
    set!(cfg.n_heads, f.heads);
    set!(cfg.d_ff, f.d_ff);
    set!(cfg.vocab, f.vocab);
    set!(cfg.t_max, f.t_max);
    set!(cfg.s_max, f.s_max);
    set!(cfg.draft_init, f.draft_init);
    set!(cfg.combine_imag, f.combine_imag);
}

fn apply_train(cfg: &mut TrainConfig, f: &TrainFlags) {
    set!(cfg.max_steps, f.max_steps);
    set!(cfg.warmup_steps, f.warmup);
    set!(cfg.tokens_per_batch, f.tokens_per_batch);
    set!(cfg.lr_scale, f.lr_scale);
    set!(cfg.eval_interval, f.eval_interval);
    set!(cfg.label_smoothing, f.label_smoothing);
    set!(cfg.length_loss_weight, f.length_loss_weight);
    set!(cfg.partial_draft_prob, f.partial_draft_prob);
    if f.target_val_metric.is_some() {
        cfg.target_val_metric = f.target_val_metric;
    }
    cfg.record_wall_clock |= f.record_wall_clock;
}

/// An input path that must be given and must exist.
fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    let path = p.as_deref().ok_or_else(|| {
        Error::config(format!("missing --{what} (or the matching entry under paths in the config)"))
    })?;
    if !path.exists() {
        return Err(Error::config(format!("--{what}: {} does not exist", path.display())));
    }
    Ok(path)
}

fn write_run_config(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.paths.out_dir)?;
    let path = cfg.paths.out_dir.join("run_config.json");
    fs::write(path, serde_json::to_string_pretty(cfg)? + "\n")?;
    Ok(())
}

fn load_data(path: &Path, limit: Option<usize>) -> Result<Vec<Example>> {
    let mut ex = data::load(path)?;
    if let Some(n) = limit {
        ex.truncate(n);
    }
    Ok(ex)
}

/// Every id must fit the model and every example its length limits.
pub fn check_dataset(examples: &[Example], cfg: &ModelConfig) -> Result<()> {
    for (i, ex) in examples.iter().enumerate() {
        if let Some(&id) = ex.src.iter().chain(&ex.tgt).find(|&&id| id >= cfg.vocab) {
            return Err(Error::Vocabulary {
                id,
                vocab: cfg.vocab,
            });
        }
        if ex.tgt.len() > cfg.t_max || ex.src.len() > cfg.s_max {
            return Err(Error::Oversize {
                index: i,
                reason: format!(
                    "source {} (max {}), target {} (max {})",
                    ex.src.len(),
                    cfg.s_max,
                    ex.tgt.len(),
                    cfg.t_max
                ),
            });
        }
    }
    Ok(())
}

fn cmd_generate(mut cfg: RunConfig, task: &TaskFlags, n: Option<usize>, out: Option<PathBuf>) -> Result<u8> {
    set!(cfg.task.kind, task.kind);
    set!(cfg.task.content_vocab, task.content_vocab);
    set!(cfg.task.min_len, task.min_len);
    set!(cfg.task.max_len, task.max_len);
    set!(cfg.model.t_max, task.t_max);
    set!(cfg.n_examples, n);
    let out = out
        .or(cfg.paths.out.clone())
        .unwrap_or_else(|| cfg.paths.out_dir.join("data.jsonl"));
    cfg.paths.out = Some(out.clone());
    cfg.task.validate(cfg.model.t_max)?;
    write_run_config(&cfg)?;
    let examples = data::generate(&cfg.task, cfg.n_examples, cfg.model.t_max)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    data::save(&examples, &out)?;
    println!(
        "wrote {} examples to {} (seed {})",
        examples.len(),
        out.display(),
        cfg.seed
    );
    Ok(EXIT_OK)
}

fn cmd_train<F: Real>(cfg: &RunConfig) -> Result<u8> {
    let train_path = required(&cfg.paths.data, "data")?;
    let mut train = data::load(train_path)?;
    let val = match &cfg.paths.val {
        Some(p) => data::load(p)?,
        None => Vec::new(),
    };
    check_dataset(&train, &cfg.model)?;
    check_dataset(&val, &cfg.model)?;
    if let Some(teacher) = &cfg.paths.teacher {
        let (teacher, _) = load_checkpoint::<F>(teacher)?;
        let teacher = teacher.into_ar()?;
        if teacher.config().vocab != cfg.model.vocab || teacher.config().t_max != cfg.model.t_max {
            return Err(Error::config("teacher vocab/t_max differ from the model"));
        }
        let (distilled, truncated) = distill_generate(&teacher, &train, 64, cfg.workers)?;
        eprintln!("distilled {} targets ({truncated} truncated at t_max)", distilled.len());
        train = distilled;
    }
    let mut model = AnyModel::<F>::new(cfg.model.clone(), cfg.arch, cfg.seed)?;
    let run = train_loop(&mut model, &train, &val, &cfg.train, Some(&cfg.paths.out_dir))?;
    let last = run.curves.last().expect("curves start with the initial record");
    println!(
        "trained {} for {} steps: train_loss {:.4} -> {:.4}, val_metric {:.4} (best {:.4}); outputs in {}",
        cfg.arch,
        run.steps,
        run.initial_loss,
        last.train_loss,
        last.val_metric,
        run.best_val,
        cfg.paths.out_dir.display()
    );
    Ok(EXIT_OK)
}

fn cmd_distill<F: Real>(cfg: &RunConfig) -> Result<u8> {
    let (teacher, _) = load_checkpoint::<F>(required(&cfg.paths.teacher, "teacher")?)?;
    let teacher = teacher.into_ar()?;
    let examples = load_data(required(&cfg.paths.data, "data")?, cfg.limit)?;
    check_dataset(&examples, teacher.config())?;
    let (out_ex, truncated) = distill_generate(&teacher, &examples, cfg.batch_size, cfg.workers)?;
    let out = cfg
        .paths
        .out
        .clone()
        .unwrap_or_else(|| cfg.paths.out_dir.join("distilled.jsonl"));
    data::save(&out_ex, &out)?;
    println!(
        "distilled {} examples to {} ({truncated} truncated at t_max)",
        out_ex.len(),
        out.display()
    );
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DecodedRecord {
    pub src: Vec<usize>,
    pub hyp: Vec<usize>,
    pub confidences: Vec<f64>,
    pub passes: usize,
}

fn cmd_decode<F: Real>(cfg: &mut RunConfig, expect_vocab: Option<usize>, expect_t_max: Option<usize>) -> Result<u8> {
    let (model, _) = load_checkpoint::<F>(required(&cfg.paths.checkpoint, "checkpoint")?)?;
    let mc = model.config().clone();
    for (what, want, got) in [
        ("vocab", expect_vocab, mc.vocab),
        ("t_max", expect_t_max, mc.t_max),
    ] {
        if let Some(want) = want.filter(|&w| w != got) {
            return Err(Error::config(format!(
                "checkpoint {what} = {got} but the config asks for {want}"
            )));
        }
    }
    cfg.model = mc.clone();
    cfg.arch = model.arch();
    cfg.refine.validate()?;
    let out = cfg
        .paths
        .out
        .clone()
        .unwrap_or_else(|| cfg.paths.out_dir.join("decoded.jsonl"));
    cfg.paths.out = Some(out.clone());
    write_run_config(cfg)?;
    let examples = load_data(required(&cfg.paths.data, "data")?, cfg.limit)?;
    let batches: Vec<Vec<Vec<usize>>> = examples
        .chunks(cfg.batch_size.max(1))
        .map(|c| c.iter().map(|e| e.src.clone()).collect())
        .collect();
    let records: Vec<DecodedRecord> = match &model {
        AnyModel::Nat(m) => parallel_map(&batches, cfg.workers, |b| {
            Ok(nat_decode_batch(m, b, &cfg.refine)?
                .into_iter()
                .zip(b)
                .map(|(r, src)| DecodedRecord {
                    src: src.clone(),
                    hyp: r.tokens,
                    confidences: r.confidences,
                    passes: r.passes,
                })
                .collect::<Vec<_>>())
        })?,
        AnyModel::Ar(m) => parallel_map(&batches, cfg.workers, |b| {
            Ok(ar_greedy_batch(m, b, mc.t_max)?
                .into_iter()
                .zip(b)
                .map(|(t, src)| DecodedRecord {
                    src: src.clone(),
                    hyp: strip_eos(&t).to_vec(),
                    confidences: Vec::new(),
                    passes: 1,
                })
                .collect::<Vec<_>>())
        })?,
    }
    .into_iter()
    .flatten()
    .collect();
    let mut w = BufWriter::new(fs::File::create(&out)?);
    for r in &records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let exact = records
        .iter()
        .zip(&examples)
        .filter(|(r, e)| r.hyp == strip_eos(&e.tgt))
        .count();
    println!(
        "decoded {} examples to {} ({exact} match their targets)",
        records.len(),
        out.display()
    );
    Ok(EXIT_OK)
}

/// Reads one sequence per line: a JSON array, or an object with a `hyp` or
/// `tgt` field.
pub fn read_sequences(path: &Path) -> Result<Vec<Vec<usize>>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let v: serde_json::Value = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let seq = match &v {
            serde_json::Value::Array(_) => v.clone(),
            serde_json::Value::Object(o) => o
                .get("hyp")
                .or_else(|| o.get("tgt"))
                .cloned()
                .ok_or_else(|| parse_err("expected a \"hyp\" or \"tgt\" field".into()))?,
            _ => return Err(parse_err("expected an array or an object".into())),
        };
        out.push(serde_json::from_value(seq).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(out)
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<u8> {
    let hyps = read_sequences(required(&cfg.paths.hyps, "hyps")?)?;
    let refs = read_sequences(required(&cfg.paths.refs, "refs")?)?;
    if hyps.len() != refs.len() {
        return Err(Error::config(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let report = evaluate(&hyps, &refs, false)?;
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(cfg.paths.out_dir.join("eval_report.json"), json.clone() + "\n")?;
    println!("{json}");
    Ok(EXIT_OK)
}

fn cmd_benchmark<F: Real>(cfg: &mut RunConfig) -> Result<u8> {
    let (nat, _) = load_checkpoint::<F>(required(&cfg.paths.nat_checkpoint, "nat")?)?;
    let (ar, _) = load_checkpoint::<F>(required(&cfg.paths.ar_checkpoint, "ar")?)?;
    let nat = nat
        .into_nat()
        .map_err(|_| Error::config("--nat must be a fouriernat checkpoint"))?;
    let ar = ar
        .into_ar()
        .map_err(|_| Error::config("--ar must be an ar-baseline checkpoint"))?;
    cfg.model = nat.config().clone();
    write_run_config(cfg)?;
    let examples = load_data(required(&cfg.paths.data, "data")?, cfg.limit)?;
    check_dataset(&examples, nat.config())?;
    let detail = benchmark(&nat, &ar, &examples, cfg.batch_size, &cfg.refine, cfg.workers)?;
    let json = serde_json::to_string_pretty(&detail.report)?;
    fs::write(cfg.paths.out_dir.join("benchmark.json"), json.clone() + "\n")?;
    println!("{json}");
    Ok(EXIT_OK)
}

fn cmd_selfcheck(cfg: &RunConfig, fault: Option<Fault>) -> Result<u8> {
    write_run_config(cfg)?;
    let faults = Faults {
        ifft_sign: fault == Some(Fault::IfftSign),
    };
    let results = battery(faults);
    let mut failed = Vec::new();
    for r in &results {
        println!(
            "{} {:<28} error {:.3e} (tolerance {:.0e})",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.error,
            r.tolerance
        );
        if !r.passed {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        println!("{} checks passed", results.len());
        Ok(EXIT_OK)
    } else {
        println!("failed: {}", failed.join(", "));
        Ok(EXIT_CHECK_FAILED)
    }
}

fn dispatch(cli: Cli) -> Result<u8> {
    macro_rules! by_precision {
        ($cfg:expr, $f:ident $(, $arg:expr)*) => {
            match $cfg.precision {
                Precision::F64 => $f::<f64>($($arg),*),
                Precision::F32 => $f::<f32>($($arg),*),
            }
        };
    }
    match cli.command {
        Command::GenerateData {
            common,
            task,
            n,
            out,
        } => {
            let (cfg, _) = base_config("generate-data", &common)?;
            cmd_generate(cfg, &task, n, out)
        }
        Command::Train {
            common,
            model,
            train,
            arch,
            data,
            val,
            teacher,
        } => {
            let (mut cfg, _) = base_config("train", &common)?;
            apply_model(&mut cfg.model, &model);
            if let Some(p) = model.dropout {
                cfg.model.dropout = p;
                cfg.train.dropout = p;
            }
            apply_train(&mut cfg.train, &train);
            set!(cfg.arch, arch);
            set!(cfg.paths.data, data.map(Some));
            set!(cfg.paths.val, val.map(Some));
            set!(cfg.paths.teacher, teacher.map(Some));
            cfg.model.validate()?;
            cfg.train.validate()?;
            write_run_config(&cfg)?;
            by_precision!(cfg, cmd_train, &cfg)
        }
        Command::Distill {
            common,
            teacher,
            data,
            out,
            batch_size,
            workers,
        } => {
            let (mut cfg, _) = base_config("distill", &common)?;
            set!(cfg.paths.teacher, teacher.map(Some));
            set!(cfg.paths.data, data.map(Some));
            set!(cfg.paths.out, out.map(Some));
            set!(cfg.batch_size, batch_size);
            set!(cfg.workers, workers);
            write_run_config(&cfg)?;
            by_precision!(cfg, cmd_distill, &cfg)
        }
        Command::Decode {
            common,
            checkpoint,
            data,
            out,
            passes,
            mask_ratio,
            batch_size,
            workers,
            limit,
            vocab,
            t_max,
        } => {
            let (mut cfg, has_model) = base_config("decode", &common)?;
            let vocab = vocab.or(has_model.then_some(cfg.model.vocab));
            let t_max = t_max.or(has_model.then_some(cfg.model.t_max));
            set!(cfg.paths.checkpoint, checkpoint.map(Some));
            set!(cfg.paths.data, data.map(Some));
            set!(cfg.paths.out, out.map(Some));
            set!(cfg.refine.n_passes, passes);
            set!(cfg.refine.mask_ratio, mask_ratio);
            set!(cfg.batch_size, batch_size);
            set!(cfg.workers, workers);
            if limit.is_some() {
                cfg.limit = limit;
            }
            by_precision!(cfg, cmd_decode, &mut cfg, vocab, t_max)
        }
        Command::Evaluate { common, hyps, refs } => {
            let (mut cfg, _) = base_config("evaluate", &common)?;
            set!(cfg.paths.hyps, hyps.map(Some));
            set!(cfg.paths.refs, refs.map(Some));
            write_run_config(&cfg)?;
            cmd_evaluate(&cfg)
        }
        Command::Benchmark {
            common,
            nat,
            ar,
            data,
            batch_size,
            refine_passes,
            mask_ratio,
            workers,
            limit,
        } => {
            let (mut cfg, _) = base_config("benchmark", &common)?;
            set!(cfg.paths.nat_checkpoint, nat.map(Some));
            set!(cfg.paths.ar_checkpoint, ar.map(Some));
            set!(cfg.paths.data, data.map(Some));
            set!(cfg.batch_size, batch_size);
            set!(cfg.refine.n_passes, refine_passes);
            set!(cfg.refine.mask_ratio, mask_ratio);
            set!(cfg.workers, workers);
            if limit.is_some() {
                cfg.limit = limit;
            }
            by_precision!(cfg, cmd_benchmark, &mut cfg)
        }
        Command::Selfcheck {
            common,
            inject_fault,
        } => {
            let (cfg, _) = base_config("selfcheck", &common)?;
            cmd_selfcheck(&cfg, inject_fault)
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}
