//! Perplexity, decoding latency, and the strategy coherence check.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fingerprint, ByteTokenizer};
use crate::model::{forward, generate, TokenId, TransformerWeights};
use crate::parallel;
use crate::pruner::{apply_plan, build_plan, PlanOptions, RatioBasis, Strategy};
use crate::scorer::{compute_importance, ImportanceReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalKind {
    Perplexity,
    Latency,
}

impl EvalKind {
    fn name(self) -> &'static str {
        match self {
            EvalKind::Perplexity => "perplexity",
            EvalKind::Latency => "latency",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chunk_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_chunks: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gen_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub kind: EvalKind,
    /// Perplexity, or mean seconds per generation.
    pub value: f64,
    pub protocol: Protocol,
    pub model_fingerprint: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_run: Option<Vec<f64>>,
}

impl EvalResult {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let p = &self.protocol;
        match self.kind {
            EvalKind::Perplexity => {
                writeln!(out, "perplexity  {:.4}", self.value).ok();
                writeln!(
                    out,
                    "chunks      {} x {} tokens",
                    p.num_chunks.unwrap_or(0),
                    p.chunk_len.unwrap_or(0)
                )
                .ok();
            }
            EvalKind::Latency => {
                writeln!(out, "latency     {:.6} s (mean)", self.value).ok();
                writeln!(
                    out,
                    "protocol    prompt {} / gen {} / runs {} / warmup {}",
                    p.prompt_len.unwrap_or(0),
                    p.gen_len.unwrap_or(0),
                    p.runs.unwrap_or(0),
                    p.warmup.unwrap_or(0)
                )
                .ok();
            }
        }
        writeln!(out, "model       {}", self.model_fingerprint).ok();
        out
    }
}

/// Sum of next-token NLL over positions `1..S` of one sequence.
pub fn sequence_nll(w: &TransformerWeights, tokens: &[TokenId]) -> Result<f64> {
    let logits = forward(w, tokens)?;
    let mut nll = 0.0f64;
    for s in 0..tokens.len() - 1 {
        let row = logits.row(s);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let z: f64 = row.iter().map(|&l| (l as f64 - max).exp()).sum();
        nll += z.ln() + max - row[tokens[s + 1] as usize] as f64;
    }
    Ok(nll)
}

/// `exp` of the mean next-token NLL over non-overlapping `chunk_len`
/// windows; each window predicts its last `chunk_len - 1` tokens and a
/// trailing partial window is dropped.
pub fn perplexity(w: &TransformerWeights, corpus: &[TokenId], chunk_len: usize) -> Result<EvalResult> {
    w.validate()?;
    if chunk_len < 2 || chunk_len > w.config.max_seq_len {
        return Err(Error::InvalidArgument(format!(
            "chunk_len {chunk_len} must lie in 2..={}",
            w.config.max_seq_len
        )));
    }
    if corpus.len() < chunk_len + 1 {
        return Err(Error::CorpusTooShort {
            len: corpus.len(),
            need: chunk_len + 1,
        });
    }
    let chunks: Vec<&[TokenId]> = corpus.chunks_exact(chunk_len).collect();
    let per_chunk = parallel::map(&chunks, |c| sequence_nll(w, c));
    let mut total = 0.0;
    for nll in per_chunk {
        total += nll?;
    }
    let count = (chunks.len() * (chunk_len - 1)) as f64;
    Ok(EvalResult {
        kind: EvalKind::Perplexity,
        value: (total / count).exp(),
        protocol: Protocol {
            chunk_len: Some(chunk_len),
            num_chunks: Some(chunks.len()),
            ..Protocol::default()
        },
        model_fingerprint: fingerprint(w)?,
        per_run: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyProtocol {
    pub prompt_len: usize,
    pub gen_len: usize,
    pub runs: usize,
    pub warmup: usize,
}

impl Default for LatencyProtocol {
    fn default() -> Self {
        LatencyProtocol {
            prompt_len: 12,
            gen_len: 128,
            runs: 20,
            warmup: 10,
        }
    }
}

impl LatencyProtocol {
    fn to_protocol(self) -> Protocol {
        Protocol {
            prompt_len: Some(self.prompt_len),
            gen_len: Some(self.gen_len),
            runs: Some(self.runs),
            warmup: Some(self.warmup),
            ..Protocol::default()
        }
    }
}

/// Fixed benchmark prompt: BOS followed by English bytes.
pub fn bench_prompt(len: usize, vocab_size: usize) -> Vec<TokenId> {
    const TEXT: &[u8] = b"The quick brown fox jumps over the lazy dog. ";
    let mut out = vec![ByteTokenizer::BOS];
    out.extend(TEXT.iter().cycle().map(|&b| b as TokenId).take(len.saturating_sub(1)));
    out.truncate(len);
    out.iter().map(|&t| t % vocab_size as TokenId).collect()
}

fn check_protocol(w: &TransformerWeights, p: &LatencyProtocol) -> Result<()> {
    if p.prompt_len == 0 || p.runs == 0 {
        return Err(Error::InvalidArgument("prompt_len and runs must be at least 1".into()));
    }
    let total = p.prompt_len + p.gen_len;
    if total > w.config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: total,
            max: w.config.max_seq_len,
        });
    }
    Ok(())
}

fn timed_generation(w: &TransformerWeights, prompt: &[TokenId], gen_len: usize) -> Result<f64> {
    let start = Instant::now();
    let out = generate(w, black_box(prompt), gen_len)?;
    let secs = start.elapsed().as_secs_f64();
    black_box(out);
    Ok(secs)
}

fn latency_result(w: &TransformerWeights, p: LatencyProtocol, per_run: Vec<f64>) -> Result<EvalResult> {
    Ok(EvalResult {
        kind: EvalKind::Latency,
        value: per_run.iter().sum::<f64>() / per_run.len() as f64,
        protocol: p.to_protocol(),
        model_fingerprint: fingerprint(w)?,
        per_run: Some(per_run),
    })
}

/// Mean wall-clock seconds for a greedy generation, after untimed warmup.
pub fn latency_bench(w: &TransformerWeights, p: LatencyProtocol) -> Result<EvalResult> {
    check_protocol(w, &p)?;
    let prompt = bench_prompt(p.prompt_len, w.config.vocab_size);
    for _ in 0..p.warmup {
        timed_generation(w, &prompt, p.gen_len)?;
    }
    let per_run = (0..p.runs)
        .map(|_| timed_generation(w, &prompt, p.gen_len))
        .collect::<Result<Vec<_>>>()?;
    latency_result(w, p, per_run)
}

/// Benchmarks two models with alternating runs so that drift in clock
/// speed affects both equally.
pub fn latency_pair(
    dense: &TransformerWeights,
    pruned: &TransformerWeights,
    p: LatencyProtocol,
) -> Result<(EvalResult, EvalResult)> {
    check_protocol(dense, &p)?;
    check_protocol(pruned, &p)?;
    let prompt = bench_prompt(p.prompt_len, dense.config.vocab_size);
    for _ in 0..p.warmup {
        timed_generation(dense, &prompt, p.gen_len)?;
        timed_generation(pruned, &prompt, p.gen_len)?;
    }
    let mut a = Vec::with_capacity(p.runs);
    let mut b = Vec::with_capacity(p.runs);
    for i in 0..p.runs {
        if i % 2 == 0 {
            a.push(timed_generation(dense, &prompt, p.gen_len)?);
            b.push(timed_generation(pruned, &prompt, p.gen_len)?);
        } else {
            b.push(timed_generation(pruned, &prompt, p.gen_len)?);
            a.push(timed_generation(dense, &prompt, p.gen_len)?);
        }
    }
    Ok((latency_result(dense, p, a)?, latency_result(pruned, p, b)?))
}

/// Dense latency over pruned latency.
pub fn speedup(dense: &EvalResult, pruned: &EvalResult) -> Result<f64> {
    for r in [dense, pruned] {
        if r.kind != EvalKind::Latency {
            return Err(Error::KindMismatch {
                expected: "latency",
                found: r.kind.name(),
            });
        }
    }
    Ok(dense.value / pruned.value)
}

#[derive(Debug, Clone)]
pub struct CoherenceOptions {
    pub ratio: f64,
    pub basis: RatioBasis,
    pub seeds: Vec<u64>,
    pub chunk_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomRun {
    pub seed: u64,
    pub ppl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceReport {
    pub model_fingerprint: String,
    pub ratio: f64,
    pub ratio_basis: RatioBasis,
    pub chunk_len: usize,
    pub uniform_baseline: f64,
    pub dense_ppl: f64,
    pub amp_ppl: f64,
    pub random: Vec<RandomRun>,
    pub random_median_ppl: f64,
    pub reversed_ppl: f64,
    /// `amp < median(random) < reversed`.
    pub pass: bool,
}

impl CoherenceReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "strategy        ppl").ok();
        writeln!(out, "dense           {:.4}", self.dense_ppl).ok();
        writeln!(out, "amp             {:.4}", self.amp_ppl).ok();
        for r in &self.random {
            writeln!(out, "random (s={:<3}) {:.4}", r.seed, r.ppl).ok();
        }
        writeln!(out, "random median   {:.4}", self.random_median_ppl).ok();
        writeln!(out, "reversed        {:.4}", self.reversed_ppl).ok();
        writeln!(
            out,
            "verdict: {} (amp < median random < reversed at ratio {})",
            if self.pass { "PASS" } else { "FAIL" },
            self.ratio
        )
        .ok();
        out
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Prunes with amp, reversed and seeded random plans built from one
/// importance report, without recovery, and compares perplexities.
pub fn coherence_check(
    w: &TransformerWeights,
    calib: &[Vec<TokenId>],
    corpus: &[TokenId],
    opts: &CoherenceOptions,
) -> Result<CoherenceReport> {
    let dense = perplexity(w, corpus, opts.chunk_len)?;
    let baseline = w.config.vocab_size as f64;
    // A uniform predictor scores exactly `baseline`; allow for f32 rounding.
    if dense.value >= baseline * (1.0 - 1e-4) {
        return Err(Error::Untrained {
            ppl: dense.value,
            baseline,
        });
    }
    let report = compute_importance(w, calib)?;
    coherence_with_report(w, &report, corpus, opts, dense.value)
}

pub fn coherence_with_report(
    w: &TransformerWeights,
    report: &ImportanceReport,
    corpus: &[TokenId],
    opts: &CoherenceOptions,
    dense_ppl: f64,
) -> Result<CoherenceReport> {
    if opts.seeds.is_empty() {
        return Err(Error::InvalidArgument("coherence needs at least one random seed".into()));
    }
    let ppl_for = |strategy: Strategy, seed: Option<u64>| -> Result<f64> {
        let plan = build_plan(
            w,
            report,
            PlanOptions {
                ratio: opts.ratio,
                basis: opts.basis,
                strategy,
                seed,
            },
        )?;
        let pruned = apply_plan(w, &plan)?;
        Ok(perplexity(&pruned, corpus, opts.chunk_len)?.value)
    };
    let amp = ppl_for(Strategy::Amp, None)?;
    let reversed = ppl_for(Strategy::Reversed, None)?;
    let random = opts
        .seeds
        .iter()
        .map(|&seed| {
            Ok(RandomRun {
                seed,
                ppl: ppl_for(Strategy::Random, Some(seed))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let med = median(&random.iter().map(|r| r.ppl).collect::<Vec<_>>());
    Ok(CoherenceReport {
        model_fingerprint: fingerprint(w)?,
        ratio: opts.ratio,
        ratio_basis: opts.basis,
        chunk_len: opts.chunk_len,
        uniform_baseline: w.config.vocab_size as f64,
        dense_ppl,
        amp_ppl: amp,
        random,
        random_median_ppl: med,
        reversed_ppl: reversed,
        pass: amp < med && med < reversed,
    })
}
