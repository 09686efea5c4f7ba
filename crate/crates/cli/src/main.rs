use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfi_core::attention::{build_toy_model, Model, ModelSpec};
use sfi_core::harness::{
    bench_attention, judge_bench, measure_support_stability, run_experiment, topic_prompt,
    write_bench_csv, write_prompts, BenchShape, ExperimentSpec, ModelSource,
};
use sfi_core::oracle::suite::{run_suite, SuiteSize};
use sfi_core::SfiConfig;

/// Slow-fast sparse decoding experiments on a seeded toy decoder.
#[derive(Parser)]
#[command(name = "sfi", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Seed for the model and any generated inputs
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Decoding config file (`key = value` lines) applied on top
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment file; writes report.json, steps.jsonl and summary.csv
    Run {
        spec: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Dense top-k support overlap within vs across trigger-delimited segments
    Stability {
        #[command(flatten)]
        common: Common,
        /// Load the model from a weight file instead of a seed
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 5)]
        prompts: usize,
        #[arg(long, default_value_t = 256)]
        prompt_len: usize,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
    },
    /// Time dense vs sparse single-step attention; writes bench.csv
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [8192usize, 16384])]
        lens: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.016, 0.125, 0.25, 0.5, 1.0])]
        retentions: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Run the brute-force oracle suite; writes oracle.json
    Oracle {
        #[command(flatten)]
        common: Common,
        /// Reduced trial counts
        #[arg(long)]
        smoke: bool,
    },
    /// Write seeded topic-structured prompts, one per line
    Prompts {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        min_len: usize,
        #[arg(long, default_value_t = 256)]
        max_len: usize,
        #[arg(long, default_value_t = 64)]
        vocab: usize,
    },
    /// Build a seeded toy model and save its weights
    Model {
        #[command(flatten)]
        common: Common,
    },
}

fn out_dir(common: &Common, default: &str) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(default));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn cmd_run(spec_path: &Path, common: &Common) -> Result<bool> {
    let mut spec = ExperimentSpec::load(spec_path)?;
    if let Some(cfg) = &common.config {
        spec.overlay_config(cfg)?;
    }
    if let Some(seed) = common.seed {
        match &mut spec.model {
            ModelSource::Seed { seed: s, .. } => *s = seed,
            ModelSource::WeightFile(_) => bail!("--seed cannot override a weight_file model"),
        }
    }
    if let Some(out) = &common.out {
        spec.out_dir = out.clone();
    }
    let report = run_experiment(&spec)?;
    let a = &report.aggregates;
    let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    println!(
        "{} requests: match {} cosine {} slow {} retention {} flop ratio {}",
        a.requests,
        show(a.token_match_rate),
        show(a.mean_cosine),
        show(a.slow_fraction),
        show(a.mean_retention),
        show(a.flop_ratio)
    );
    for r in report.requests.iter().filter(|r| !r.violations.is_empty()) {
        for v in &r.violations {
            eprintln!("request {}: {v}", r.request);
        }
    }
    println!(
        "{} invariant violations; outputs in {}",
        a.violations,
        spec.out_dir.display()
    );
    Ok(a.violations == 0)
}

fn cmd_stability(
    common: &Common,
    weights: Option<&Path>,
    k: usize,
    prompts: usize,
    prompt_len: usize,
    max_new: usize,
) -> Result<bool> {
    let seed = common.seed.unwrap_or(0);
    let trig = match &common.config {
        Some(p) => SfiConfig::load(p)?.trigger,
        None => Default::default(),
    };
    let model: Model = match weights {
        Some(p) => Model::load(p)?,
        None => build_toy_model(ModelSpec::default(), seed)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(prompts);
    for i in 0..prompts {
        let prompt = topic_prompt(&mut rng, prompt_len, model.spec.vocab_size);
        let rep = measure_support_stability(&model, &prompt, k, &trig, max_new)?;
        println!(
            "prompt {i}: within {:.4} ({} pairs), boundary {:.4} ({} pairs)",
            rep.within_mean, rep.within_pairs, rep.boundary_mean, rep.boundary_pairs
        );
        reports.push(rep);
    }
    let wins = reports
        .iter()
        .filter(|r| r.within_at_least_boundary())
        .count();
    println!("{wins}/{prompts} prompts with within-segment overlap >= boundary overlap");
    let path = out_dir(common, "out")?.join("stability.json");
    write_json(&path, &reports)?;
    Ok(true)
}

fn cmd_bench(common: &Common, lens: &[usize], retentions: &[f64], repeats: usize) -> Result<bool> {
    let rows = bench_attention(
        lens,
        retentions,
        repeats,
        BenchShape::default(),
        common.seed.unwrap_or(0),
    )?;
    for r in &rows {
        println!(
            "L={:>6} retention={:<6} dense {:>10.1}us  sparse {:>10.1}us  speedup {:>6.2}x",
            r.len, r.retention, r.dense_mean_us, r.sparse_mean_us, r.speedup
        );
    }
    let verdict = judge_bench(&rows);
    for line in verdict
        .not_faster
        .iter()
        .chain(&verdict.non_monotone)
        .chain(&verdict.endpoint)
    {
        println!("note: {line}");
    }
    let path = out_dir(common, "out")?.join("bench.csv");
    write_bench_csv(&rows, &path)?;
    Ok(true)
}

fn cmd_oracle(common: &Common, smoke: bool) -> Result<bool> {
    let size = if smoke {
        SuiteSize::SMOKE
    } else {
        SuiteSize::FULL
    };
    let reports = run_suite(common.seed.unwrap_or(0), size)?;
    for r in &reports {
        println!(
            "{:<5} {:<28} trials {:>6}  violations {:>3}  max abs err {:.3e}",
            if r.passed() { "ok" } else { "FAIL" },
            r.name,
            r.trials,
            r.violations,
            r.max_abs_error
        );
    }
    write_json(&out_dir(common, "out")?.join("oracle.json"), &reports)?;
    Ok(reports.iter().all(|r| r.passed()))
}

fn cmd_prompts(
    common: &Common,
    count: usize,
    min_len: usize,
    max_len: usize,
    vocab: usize,
) -> Result<bool> {
    use rand::Rng;
    if min_len == 0 || min_len > max_len {
        bail!("need 1 <= min-len <= max-len");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(common.seed.unwrap_or(0));
    let prompts: Vec<Vec<u32>> = (0..count)
        .map(|_| {
            let len = rng.random_range(min_len..=max_len);
            topic_prompt(&mut rng, len, vocab)
        })
        .collect();
    let path = out_dir(common, ".")?.join("prompts.txt");
    write_prompts(&path, &prompts)?;
    println!("wrote {count} prompts to {}", path.display());
    Ok(true)
}

fn cmd_model(common: &Common) -> Result<bool> {
    let model = build_toy_model(ModelSpec::default(), common.seed.unwrap_or(0))?;
    let path = out_dir(common, ".")?.join("model.sfiw");
    model.save(&path)?;
    println!("wrote {}", path.display());
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { spec, common } => cmd_run(spec, common),
        Command::Stability {
            common,
            weights,
            k,
            prompts,
            prompt_len,
            max_new,
        } => cmd_stability(
            common,
            weights.as_deref(),
            *k,
            *prompts,
            *prompt_len,
            *max_new,
        ),
        Command::Bench {
            common,
            lens,
            retentions,
            repeats,
        } => cmd_bench(common, lens, retentions, *repeats),
        Command::Oracle { common, smoke } => cmd_oracle(common, *smoke),
        Command::Prompts {
            common,
            count,
            min_len,
            max_len,
            vocab,
        } => cmd_prompts(common, *count, *min_len, *max_len, *vocab),
        Command::Model { common } => cmd_model(common),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
