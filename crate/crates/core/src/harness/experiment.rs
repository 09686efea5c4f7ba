use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{build_toy_model, Model, ModelSpec, PoolMode, ToyEngine};
use crate::config::{parse_entries, parse_value, CacheLimits, SfiConfig, TriggerConfig};
use crate::error::{Result, SfiError};
use crate::harness::read_prompts;
use crate::scheduler::{run_dense, run_request, RequestOutput, StepKind, StepRecord};

/// Bumped whenever a column of `summary.csv` changes meaning or order.
pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sfi,
    Dense,
    Both,
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sfi" => Ok(Mode::Sfi),
            "dense" => Ok(Mode::Dense),
            "both" => Ok(Mode::Both),
            _ => Err(format!("unknown mode `{s}` (expected sfi, dense or both)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    Seed { seed: u64, spec: ModelSpec },
    WeightFile(PathBuf),
}

impl ModelSource {
    pub fn build(&self) -> Result<Model> {
        match self {
            ModelSource::Seed { seed, spec } => build_toy_model(*spec, *seed),
            ModelSource::WeightFile(p) => Model::load(p),
        }
    }
}

/// An experiment file: `key = value` lines. Besides every decoding config
/// key it accepts `model_seed` or `weight_file`, the model shape keys,
/// `prompt_file`, `max_new`, `mode`, `pool` and `out`. Relative paths are
/// resolved against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub model: ModelSource,
    pub prompt_file: PathBuf,
    pub config: SfiConfig,
    pub max_new: usize,
    pub mode: Mode,
    pub pool: PoolMode,
    pub out_dir: PathBuf,
}

impl ExperimentSpec {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut config = SfiConfig::default();
        let mut spec = ModelSpec::default();
        let mut seed = None;
        let mut weights = None;
        let mut prompt_file = None;
        let mut max_new = 32;
        let mut mode = Mode::Both;
        let mut pool = PoolMode::Mean;
        let mut out_dir = PathBuf::from("out");
        let mut shape_given = false;

        for e in parse_entries(text)? {
            if config.set(&e)? {
                continue;
            }
            match e.key.as_str() {
                "model_seed" => seed = Some(parse_value(&e)?),
                "weight_file" => weights = Some(base.join(&e.value)),
                "prompt_file" => prompt_file = Some(base.join(&e.value)),
                "max_new" => max_new = parse_value(&e)?,
                "mode" => mode = parse_value(&e)?,
                "pool" => pool = parse_value(&e)?,
                "out" => out_dir = base.join(&e.value),
                "n_layers" => spec.n_layers = parse_value(&e)?,
                "n_query_heads" => spec.n_query_heads = parse_value(&e)?,
                "n_kv_heads" => spec.n_kv_heads = parse_value(&e)?,
                "head_dim" => spec.head_dim = parse_value(&e)?,
                "vocab_size" => spec.vocab_size = parse_value(&e)?,
                "max_positions" => spec.max_positions = parse_value(&e)?,
                "rope_base" => spec.rope_base = parse_value(&e)?,
                _ => {
                    return Err(SfiError::UnknownKey {
                        line: e.line,
                        key: e.key,
                    })
                }
            }
            if matches!(
                e.key.as_str(),
                "n_layers"
                    | "n_query_heads"
                    | "n_kv_heads"
                    | "head_dim"
                    | "vocab_size"
                    | "max_positions"
                    | "rope_base"
            ) {
                shape_given = true;
            }
        }

        let model = match (seed, weights) {
            (Some(seed), None) => ModelSource::Seed { seed, spec },
            (None, Some(path)) if !shape_given => ModelSource::WeightFile(path),
            (None, Some(_)) => {
                return Err(SfiError::InvalidConfig(
                    "model shape keys cannot be combined with weight_file".into(),
                ))
            }
            (Some(_), Some(_)) => {
                return Err(SfiError::InvalidConfig(
                    "give either model_seed or weight_file, not both".into(),
                ))
            }
            (None, None) => {
                return Err(SfiError::InvalidConfig(
                    "missing model_seed or weight_file".into(),
                ))
            }
        };
        let prompt_file =
            prompt_file.ok_or_else(|| SfiError::InvalidConfig("missing prompt_file".into()))?;
        let out = Self {
            model,
            prompt_file,
            config,
            max_new,
            mode,
            pool,
            out_dir,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SfiError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Applies a decoding config file on top of the experiment's settings.
    /// Only decoding config keys are accepted.
    pub fn overlay_config(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| SfiError::io(path, e))?;
        for e in parse_entries(&text)? {
            if !self.config.set(&e)? {
                return Err(SfiError::UnknownKey {
                    line: e.line,
                    key: e.key,
                });
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.max_new == 0 {
            return Err(SfiError::InvalidConfig("max_new must be >= 1".into()));
        }
        if let ModelSource::Seed { spec, .. } = &self.model {
            spec.validate()?;
            self.config.limits.validate(spec.max_positions)?;
        }
        Ok(())
    }
}

/// Per-request metrics. Comparisons against dense are present only in
/// `both` mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestReport {
    pub request: usize,
    pub prompt_len: usize,
    pub tokens_sfi: Option<Vec<u32>>,
    pub tokens_dense: Option<Vec<u32>>,
    pub token_match_rate: Option<f64>,
    pub mean_cosine: Option<f64>,
    pub slow_fraction: Option<f64>,
    /// Mean over steps of the per-head support over the prefix length.
    pub mean_retention: Option<f64>,
    /// Dense attention reads over the reads actually performed.
    pub flop_ratio: Option<f64>,
    pub violations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub requests: usize,
    pub token_match_rate: Option<f64>,
    pub mean_cosine: Option<f64>,
    pub slow_fraction: Option<f64>,
    pub mean_retention: Option<f64>,
    pub flop_ratio: Option<f64>,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub mode: Mode,
    pub max_new: usize,
    pub config: SfiConfig,
    pub requests: Vec<RequestReport>,
    pub aggregates: Aggregates,
    #[serde(skip)]
    pub logs: Vec<RequestLogs>,
}

impl RunReport {
    pub fn total_violations(&self) -> usize {
        self.aggregates.violations
    }
}

/// Step logs of one request, kept for `steps.jsonl`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RequestLogs {
    pub sfi: Option<Vec<StepRecord>>,
    pub dense: Option<Vec<StepRecord>>,
}

#[derive(Serialize)]
struct StepLine<'a> {
    request: usize,
    mode: &'static str,
    #[serde(flatten)]
    step: &'a StepRecord,
}

#[derive(Serialize)]
struct SummaryRow {
    schema_version: u32,
    request: usize,
    prompt_len: usize,
    max_new: usize,
    token_match_rate: Option<f64>,
    mean_cosine: Option<f64>,
    slow_fraction: Option<f64>,
    mean_retention: Option<f64>,
    flop_ratio: Option<f64>,
    violations: usize,
}

/// Slow/fast labels implied by the emitted tokens alone: step 0 is slow,
/// a step is slow when the token it feeds is a trigger or `t_max` fast
/// steps have run since the last slow one.
pub fn replay_step_kinds(tokens: &[u32], trig: &TriggerConfig) -> Vec<StepKind> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut since = 0;
    for t in 0..tokens.len() {
        let slow = t == 0 || trig.trigger_tokens.contains(&tokens[t - 1]) || since >= trig.t_max;
        if slow {
            since = 0;
            out.push(StepKind::Slow);
        } else {
            since += 1;
            out.push(StepKind::Fast);
        }
    }
    out
}

pub fn check_trigger_replay(out: &RequestOutput, trig: &TriggerConfig) -> Vec<String> {
    let replay = replay_step_kinds(&out.tokens, trig);
    out.steps
        .iter()
        .zip(&replay)
        .filter(|(s, r)| s.kind != **r)
        .map(|(s, r)| format!("step {}: logged {:?}, replay says {:?}", s.t, s.kind, r))
        .collect()
}

/// Fast steps must leave both the selected sets and the compact segments
/// exactly as the preceding step left them.
pub fn check_segment_freezing(steps: &[StepRecord]) -> Vec<String> {
    let mut v = Vec::new();
    for w in steps.windows(2) {
        if w[1].kind != StepKind::Fast {
            continue;
        }
        if w[1].selected_digest != w[0].selected_digest {
            v.push(format!(
                "step {}: selected sets changed on a fast step",
                w[1].t
            ));
        }
        if w[1].compact_digest != w[0].compact_digest {
            v.push(format!(
                "step {}: compact segment changed on a fast step",
                w[1].t
            ));
        }
    }
    v
}

pub fn check_support_bound(steps: &[StepRecord], limits: &CacheLimits) -> Vec<String> {
    steps
        .iter()
        .filter(|s| {
            s.kind == StepKind::Fast && s.support_size > limits.max_support().min(s.prefix_len)
        })
        .map(|s| {
            format!(
                "step {}: support {} exceeds the bound {}",
                s.t,
                s.support_size,
                limits.max_support().min(s.prefix_len)
            )
        })
        .collect()
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        ab += x as f64 * y as f64;
        aa += x as f64 * x as f64;
        bb += y as f64 * y as f64;
    }
    if aa == 0.0 || bb == 0.0 {
        return if aa == bb { 1.0 } else { 0.0 };
    }
    ab / (aa.sqrt() * bb.sqrt())
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

fn usage(steps: &[StepRecord], n_layers: usize, n_kv_heads: usize) -> (f64, f64, f64) {
    let slow =
        steps.iter().filter(|s| s.kind == StepKind::Slow).count() as f64 / steps.len() as f64;
    let retention = mean(steps.iter().map(|s| s.mean_support / s.prefix_len as f64)).unwrap_or(0.0);
    let dense: u64 = steps
        .iter()
        .map(|s| (s.prefix_len * n_layers * n_kv_heads) as u64)
        .sum();
    let actual: u64 = steps.iter().map(|s| s.kv_reads).sum();
    (slow, retention, dense as f64 / actual.max(1) as f64)
}

fn run_one(
    model: &Model,
    spec: &ExperimentSpec,
    request: usize,
    prompt: &[u32],
) -> Result<(RequestReport, RequestLogs)> {
    let cfg = &spec.config;
    let capacity = cfg.trigger.window_prefill.max(cfg.trigger.window_decode);
    let ms = &model.spec;
    let sfi = match spec.mode {
        Mode::Sfi | Mode::Both => {
            let mut engine = ToyEngine::new(model, cfg.limits, capacity, spec.pool)?;
            Some(run_request(prompt, cfg, &mut engine, spec.max_new)?)
        }
        Mode::Dense => None,
    };
    let dense = match spec.mode {
        Mode::Dense | Mode::Both => {
            let mut engine = ToyEngine::new(model, cfg.limits, 1, spec.pool)?;
            Some(run_dense(prompt, &mut engine, spec.max_new)?)
        }
        Mode::Sfi => None,
    };

    let mut report = RequestReport {
        request,
        prompt_len: prompt.len(),
        tokens_sfi: sfi.as_ref().map(|o| o.tokens.clone()),
        tokens_dense: dense.as_ref().map(|o| o.tokens.clone()),
        token_match_rate: None,
        mean_cosine: None,
        slow_fraction: None,
        mean_retention: None,
        flop_ratio: None,
        violations: Vec::new(),
    };
    if let Some(s) = &sfi {
        let (slow, retention, ratio) = usage(&s.steps, ms.n_layers, ms.n_kv_heads);
        report.slow_fraction = Some(slow);
        report.mean_retention = Some(retention);
        report.flop_ratio = Some(ratio);
        report
            .violations
            .extend(check_trigger_replay(s, &cfg.trigger));
        report.violations.extend(check_segment_freezing(&s.steps));
        report
            .violations
            .extend(check_support_bound(&s.steps, &cfg.limits));
        if !(retention > 0.0 && retention <= 1.0) {
            report
                .violations
                .push(format!("retention ratio {retention} outside (0, 1]"));
        }
    } else if let Some(d) = &dense {
        let (slow, retention, ratio) = usage(&d.steps, ms.n_layers, ms.n_kv_heads);
        report.slow_fraction = Some(slow);
        report.mean_retention = Some(retention);
        report.flop_ratio = Some(ratio);
    }
    if let (Some(s), Some(d)) = (&sfi, &dense) {
        let matched = s
            .tokens
            .iter()
            .zip(&d.tokens)
            .filter(|(a, b)| a == b)
            .count();
        report.token_match_rate = Some(matched as f64 / d.tokens.len() as f64);
        report.mean_cosine = mean(s.logits.iter().zip(&d.logits).map(|(a, b)| cosine(a, b)));
    }
    let logs = RequestLogs {
        sfi: sfi.map(|o| o.steps),
        dense: dense.map(|o| o.steps),
    };
    Ok((report, logs))
}

/// Decodes every prompt in parallel with `spec.model` and assembles the
/// report in prompt order. Nothing is written to disk.
pub fn run_prompts(
    model: &Model,
    spec: &ExperimentSpec,
    prompts: &[Vec<u32>],
) -> Result<RunReport> {
    spec.config.limits.validate(model.spec.max_positions)?;
    let results: Vec<(RequestReport, RequestLogs)> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| run_one(model, spec, i, p))
        .collect::<Result<_>>()?;
    let (requests, logs): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let aggregates = Aggregates {
        requests: requests.len(),
        token_match_rate: mean(requests.iter().filter_map(|r| r.token_match_rate)),
        mean_cosine: mean(requests.iter().filter_map(|r| r.mean_cosine)),
        slow_fraction: mean(requests.iter().filter_map(|r| r.slow_fraction)),
        mean_retention: mean(requests.iter().filter_map(|r| r.mean_retention)),
        flop_ratio: mean(requests.iter().filter_map(|r| r.flop_ratio)),
        violations: requests.iter().map(|r| r.violations.len()).sum(),
    };
    Ok(RunReport {
        schema_version: SUMMARY_SCHEMA_VERSION,
        mode: spec.mode,
        max_new: spec.max_new,
        config: spec.config.clone(),
        requests,
        aggregates,
        logs,
    })
}

/// Runs the experiment and writes `report.json`, `steps.jsonl` and
/// `summary.csv` into `spec.out_dir`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunReport> {
    spec.validate()?;
    let model = spec.model.build()?;
    let prompts = read_prompts(&spec.prompt_file)?;
    if prompts.is_empty() {
        return Err(SfiError::InvalidConfig(format!(
            "{}: no prompts",
            spec.prompt_file.display()
        )));
    }
    let report = run_prompts(&model, spec, &prompts)?;
    write_report(&report, &spec.out_dir)?;
    Ok(report)
}

pub fn write_report(report: &RunReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| SfiError::io(dir, e))?;

    let path = dir.join("report.json");
    let json =
        serde_json::to_string_pretty(report).map_err(|e| SfiError::Invariant(e.to_string()))?;
    std::fs::write(&path, json + "\n").map_err(|e| SfiError::io(&path, e))?;

    let path = dir.join("steps.jsonl");
    let mut buf = Vec::new();
    for (request, logs) in report.logs.iter().enumerate() {
        for (mode, steps) in [("sfi", &logs.sfi), ("dense", &logs.dense)] {
            for step in steps.iter().flatten() {
                let line = StepLine {
                    request,
                    mode,
                    step,
                };
                serde_json::to_writer(&mut buf, &line)
                    .map_err(|e| SfiError::Invariant(e.to_string()))?;
                buf.push(b'\n');
            }
        }
    }
    std::fs::write(&path, buf).map_err(|e| SfiError::io(&path, e))?;

    let path = dir.join("summary.csv");
    let file = std::fs::File::create(&path).map_err(|e| SfiError::io(&path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in &report.requests {
        w.serialize(SummaryRow {
            schema_version: report.schema_version,
            request: r.request,
            prompt_len: r.prompt_len,
            max_new: report.max_new,
            token_match_rate: r.token_match_rate,
            mean_cosine: r.mean_cosine,
            slow_fraction: r.slow_fraction,
            mean_retention: r.mean_retention,
            flop_ratio: r.flop_ratio,
            violations: r.violations.len(),
        })
        .map_err(|e| SfiError::Invariant(e.to_string()))?;
    }
    let mut inner = w
        .into_inner()
        .map_err(|e| SfiError::Invariant(e.to_string()))?;
    inner.flush().map_err(|e| SfiError::io(&path, e))?;
    Ok(())
}
