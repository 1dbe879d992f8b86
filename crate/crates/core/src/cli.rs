//! `amprune` command-line entry point.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluator::{
    coherence_check, latency_bench, latency_pair, perplexity, speedup, CoherenceOptions,
    LatencyProtocol,
};
use crate::io::{
    fingerprint, load_calibration, load_checkpoint, load_corpus, read_json, save_checkpoint,
    to_json, write_json,
};
use crate::model::{ModelConfig, TransformerWeights};
use crate::parallel;
use crate::pruner::{apply_plan, build_plan, PlanOptions, RatioBasis, Strategy};
use crate::scorer::{compute_importance, ImportanceReport};
use crate::trainer::{init_weights, recover, train, TrainConfig, TrainLog};

#[derive(Debug, Parser)]
#[command(name = "amprune", version, about = "Score, prune and evaluate small LLaMA-style models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from scratch on a byte-level corpus.
    Train(TrainArgs),
    /// Compute head and MLP importance scores over a calibration file.
    Score(ScoreArgs),
    /// Build a pruning plan from a report and apply it.
    Prune(PruneArgs),
    /// Fine-tune a pruned model.
    Recover(RecoverArgs),
    /// Perplexity over non-overlapping chunks.
    Ppl(PplArgs),
    /// Greedy-decoding latency.
    Bench(BenchArgs),
    /// Compare amp, random and reversed pruning by perplexity.
    Coherence(CoherenceArgs),
}

#[derive(Debug, Args, Serialize)]
struct OptimArgs {
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1024)]
    batch_tokens: usize,
    /// Training window length (defaults to min(128, max_seq_len)).
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    grad_clip: f64,
    #[arg(long, default_value_t = 50)]
    log_every: usize,
    /// Write the loss curve as CSV.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

impl OptimArgs {
    fn train_config(&self, model: &ModelConfig) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_tokens: self.batch_tokens,
            seq_len: self.seq_len.unwrap_or(model.max_seq_len.min(128)),
            learning_rate: self.lr,
            grad_clip: self.grad_clip,
            seed: self.seed,
            eval_every: self.log_every,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    /// Model config JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Debug, Args, Serialize)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long, default_value_t = 50)]
    samples: usize,
    /// Calibration truncation length (defaults to min(512, max_seq_len)).
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    ratio: f64,
    #[arg(long, value_enum, default_value_t = RatioBasis::PerLayer)]
    basis: RatioBasis,
    #[arg(long, value_enum, default_value_t = Strategy::Amp)]
    mode: Strategy,
    /// Required for `--mode random`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    plan: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct RecoverArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Debug, Args, Serialize)]
struct PplArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Chunk length (defaults to min(512, max_seq_len)).
    #[arg(long)]
    chunk: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 12)]
    prompt_len: usize,
    #[arg(long, default_value_t = 128)]
    gen_len: usize,
    #[arg(long, default_value_t = 20)]
    runs: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    /// Dense model to benchmark in interleaved runs; reports speedup.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct CoherenceArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    ratio: f64,
    #[arg(long, value_enum, default_value_t = RatioBasis::PerLayer)]
    basis: RatioBasis,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 50)]
    samples: usize,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long, default_value_t = 0)]
    calib_seed: u64,
    #[arg(long)]
    chunk: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Written next to every checkpoint the CLI produces.
#[derive(Debug, Serialize)]
struct Provenance<'a, A: Serialize> {
    command: &'a str,
    input_fingerprint: Option<String>,
    output_fingerprint: String,
    args: &'a A,
}

fn provenance_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".provenance.json");
    PathBuf::from(s)
}

fn write_checkpoint_with_provenance<A: Serialize>(
    w: &TransformerWeights,
    out: &Path,
    command: &str,
    input: Option<String>,
    args: &A,
) -> Result<String> {
    save_checkpoint(w, out)?;
    let fp = fingerprint(w)?;
    write_json(
        provenance_path(out),
        &Provenance {
            command,
            input_fingerprint: input,
            output_fingerprint: fp.clone(),
            args,
        },
    )?;
    log::info!("wrote {} ({fp})", out.display());
    Ok(fp)
}

fn log_args<A: Serialize>(command: &str, args: &A) {
    match serde_json::to_string(args) {
        Ok(json) => log::info!("{command} {json}"),
        Err(e) => log::warn!("cannot serialize arguments: {e}"),
    }
}

fn write_log(log: &TrainLog, path: &Option<PathBuf>) -> Result<()> {
    match path {
        Some(p) => log.write_csv(p),
        None => Ok(()),
    }
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let config: ModelConfig = read_json(&a.config)?;
    let cfg = a.optim.train_config(&config);
    log_args("train", &serde_json::json!({ "args": a, "resolved": &cfg }));
    let corpus = load_corpus(&a.corpus)?;
    let init = init_weights(&config, a.optim.seed)?;
    let (w, log) = train(&init, &corpus, &cfg)?;
    write_log(&log, &a.optim.loss_csv)?;
    write_checkpoint_with_provenance(&w, &a.out, "train", None, &(a, &cfg))?;
    println!("{}", to_json(&serde_json::json!({ "final_loss": log.final_loss() }))?.trim_end());
    Ok(())
}

fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let w = load_checkpoint(&a.model)?;
    let max_len = a.max_len.unwrap_or(w.config.max_seq_len.min(512));
    log_args("score", &serde_json::json!({ "args": a, "max_len": max_len }));
    let calib = load_calibration(&a.calib, a.samples, max_len, a.seed)?;
    let report = compute_importance(&w, &calib)?;
    write_json(&a.out, &report)?;
    log::info!("scored {} samples ({} tokens)", report.num_samples, report.total_tokens);
    Ok(())
}

fn cmd_prune(a: &PruneArgs) -> Result<()> {
    log_args("prune", a);
    let w = load_checkpoint(&a.model)?;
    let report: ImportanceReport = read_json(&a.report)?;
    let input_fp = fingerprint(&w)?;
    if report.model_fingerprint != input_fp {
        return Err(Error::PlanMismatch(format!(
            "report was computed on model {}, not {input_fp}",
            report.model_fingerprint
        )));
    }
    let plan = build_plan(
        &w,
        &report,
        PlanOptions {
            ratio: a.ratio,
            basis: a.basis,
            strategy: a.mode,
            seed: a.seed,
        },
    )?;
    let pruned = apply_plan(&w, &plan)?;
    if let Some(p) = &a.plan {
        write_json(p, &plan)?;
    }
    write_checkpoint_with_provenance(&pruned, &a.out, "prune", Some(input_fp), a)?;
    println!(
        "{}",
        to_json(&serde_json::json!({
            "achieved_overall_ratio": plan.achieved_overall_ratio,
            "achieved_ratio_excluding_embeddings": plan.achieved_ratio_excluding_embeddings,
        }))?
        .trim_end()
    );
    Ok(())
}

fn cmd_recover(a: &RecoverArgs) -> Result<()> {
    let w = load_checkpoint(&a.model)?;
    let cfg = a.optim.train_config(&w.config);
    log_args("recover", &serde_json::json!({ "args": a, "resolved": &cfg }));
    let corpus = load_corpus(&a.corpus)?;
    let (out, log) = recover(&w, &corpus, &cfg)?;
    write_log(&log, &a.optim.loss_csv)?;
    write_checkpoint_with_provenance(&out, &a.out, "recover", Some(fingerprint(&w)?), &(a, &cfg))?;
    Ok(())
}

fn cmd_ppl(a: &PplArgs) -> Result<()> {
    let w = load_checkpoint(&a.model)?;
    let chunk = a.chunk.unwrap_or(w.config.max_seq_len.min(512));
    log_args("ppl", &serde_json::json!({ "args": a, "chunk": chunk }));
    let corpus = load_corpus(&a.corpus)?;
    let r = perplexity(&w, &corpus, chunk)?;
    eprint!("{}", r.to_table());
    if let Some(p) = &a.out {
        write_json(p, &r)?;
    }
    println!("{}", serde_json::to_string(&r)?);
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    log_args("bench", a);
    let w = load_checkpoint(&a.model)?;
    let p = LatencyProtocol {
        prompt_len: a.prompt_len,
        gen_len: a.gen_len,
        runs: a.runs,
        warmup: a.warmup,
    };
    let json = match &a.baseline {
        None => {
            let r = latency_bench(&w, p)?;
            eprint!("{}", r.to_table());
            serde_json::to_value(&r)?
        }
        Some(base) => {
            let dense = load_checkpoint(base)?;
            let (d, pr) = latency_pair(&dense, &w, p)?;
            let s = speedup(&d, &pr)?;
            eprint!("dense\n{}model\n{}speedup     {s:.4}x\n", d.to_table(), pr.to_table());
            serde_json::json!({ "dense": d, "model": pr, "speedup": s })
        }
    };
    if let Some(path) = &a.out {
        write_json(path, &json)?;
    }
    println!("{}", serde_json::to_string(&json)?);
    Ok(())
}

fn cmd_coherence(a: &CoherenceArgs) -> Result<()> {
    let w = load_checkpoint(&a.model)?;
    let max_len = a.max_len.unwrap_or(w.config.max_seq_len.min(512));
    let chunk = a.chunk.unwrap_or(w.config.max_seq_len.min(512));
    log_args("coherence", &serde_json::json!({ "args": a, "max_len": max_len, "chunk": chunk }));
    let calib = load_calibration(&a.calib, a.samples, max_len, a.calib_seed)?;
    let corpus = load_corpus(&a.corpus)?;
    let report = coherence_check(
        &w,
        &calib,
        &corpus,
        &CoherenceOptions {
            ratio: a.ratio,
            basis: a.basis,
            seeds: a.seeds.clone(),
            chunk_len: chunk,
        },
    )?;
    eprint!("{}", report.to_table());
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => 3,
        Error::InfeasibleRatio { .. } => 4,
        Error::Checkpoint(_) => 5,
        _ => 1,
    }
}

fn print_error(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{line}");
}

fn configure_threads() {
    if let Ok(v) = std::env::var("AMP_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if !parallel::set_threads(n) {
                    log::warn!("worker pool already initialized; AMP_THREADS ignored");
                }
            }
            _ => log::warn!("ignoring invalid AMP_THREADS={v}"),
        }
    }
}

/// Runs one command; returns the process exit code.
///
/// Errors go to stderr as a single JSON line `{"error":{"kind","message"}}`.
/// Exit codes: 2 usage, 3 I/O, 4 infeasible ratio, 5 bad checkpoint, 1 other.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error");
            print_error("usage", first.trim_start_matches("error: "));
            return 2;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    configure_threads();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Score(a) => cmd_score(a),
        Command::Prune(a) => cmd_prune(a),
        Command::Recover(a) => cmd_recover(a),
        Command::Ppl(a) => cmd_ppl(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Coherence(a) => cmd_coherence(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            print_error(e.kind(), &e.to_string());
            exit_code(&e)
        }
    }
}
