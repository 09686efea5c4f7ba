//! Selector, trigger and cache configuration plus the `key = value` file format.
//!
//! The file format is line oriented: `key = value`, `#` starts a comment,
//! blank lines are ignored, and an unknown key is a hard error. Floats are
//! written with Rust's shortest round-trip formatting so a written config
//! parses back bit-identically.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SfiError};

/// Token ids of the boundary set in the toy vocabulary used by the reference
/// model. Real deployments resolve `. ? ! ; \n` through their tokenizer and
/// pass the ids in `trigger_tokens`.
pub mod toy_vocab {
    pub const PERIOD: u32 = 0;
    pub const QUESTION: u32 = 1;
    pub const EXCLAMATION: u32 = 2;
    pub const SEMICOLON: u32 = 3;
    pub const NEWLINE: u32 = 4;
    /// First id that is an ordinary word.
    pub const FIRST_WORD: u32 = 5;

    pub const BOUNDARY: [u32; 5] = [PERIOD, QUESTION, EXCLAMATION, SEMICOLON, NEWLINE];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    /// Power-mean exponent for window aggregation, in (0, 1].
    pub alpha: f64,
    /// Key-norm prior exponent.
    pub gamma: f64,
    /// Position-decay strength.
    pub beta: f64,
    /// Position-decay curvature, ≥ 1.
    pub p_curve: f64,
    /// Tail-brake exponent.
    pub eta: f64,
    /// Cap on the prior-injection weight, in [0, 1].
    pub lambda_clip: f64,
    pub alpha_soft: f64,
    pub alpha_cross: f64,
    /// Head-softmax temperature for cross-head exclusivity.
    pub temperature: f64,
    /// Soft-NMS neighborhood half-width, in allowed-set rank order.
    pub nms_radius: usize,
    pub epsilon: f64,
    /// Selected tokens per KV head.
    pub k_budget: usize,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            gamma: 1.0,
            beta: 1.0,
            p_curve: 2.0,
            eta: 0.5,
            lambda_clip: 0.02,
            alpha_soft: 0.5,
            alpha_cross: 0.35,
            temperature: 1.0,
            nms_radius: 2,
            epsilon: 1e-8,
            k_budget: 2048,
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SfiError::InvalidConfig(msg));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha = {} not in (0, 1]", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.lambda_clip) {
            return bad(format!("lambda_clip = {} not in [0, 1]", self.lambda_clip));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature = {} must be > 0", self.temperature));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon = {} must be > 0", self.epsilon));
        }
        if !(self.p_curve >= 1.0 && self.p_curve.is_finite()) {
            return bad(format!("p_curve = {} must be >= 1", self.p_curve));
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("beta", self.beta),
            ("eta", self.eta),
            ("alpha_soft", self.alpha_soft),
            ("alpha_cross", self.alpha_cross),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be a finite value >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerConfig {
    pub trigger_tokens: BTreeSet<u32>,
    /// Maximum number of consecutive fast steps before a slow step is forced.
    pub t_max: usize,
    pub window_decode: usize,
    pub window_prefill: usize,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        Self {
            trigger_tokens: toy_vocab::BOUNDARY.into_iter().collect(),
            t_max: 64,
            window_decode: 1,
            window_prefill: 16,
        }
    }
}

impl TriggerConfig {
    pub fn is_trigger(&self, token: u32) -> bool {
        self.trigger_tokens.contains(&token)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 {
            return Err(SfiError::InvalidConfig("t_max must be >= 1".into()));
        }
        if self.window_decode == 0 || self.window_prefill == 0 {
            return Err(SfiError::InvalidConfig("window widths must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheLimits {
    pub n_sink: usize,
    pub n_recent: usize,
    pub k_budget: usize,
}

impl Default for CacheLimits {
    fn default() -> Self {
        Self {
            n_sink: 4,
            n_recent: 256,
            k_budget: 2048,
        }
    }
}

impl CacheLimits {
    pub fn validate(&self, max_positions: usize) -> Result<()> {
        if self.n_recent == 0 {
            return Err(SfiError::InvalidConfig("n_recent must be >= 1".into()));
        }
        if self.n_sink + self.n_recent > max_positions {
            return Err(SfiError::InvalidConfig(format!(
                "n_sink + n_recent = {} exceeds the maximum context of {max_positions}",
                self.n_sink + self.n_recent
            )));
        }
        Ok(())
    }

    /// Upper bound on a fast step's per-head support.
    pub fn max_support(&self) -> usize {
        self.n_sink + self.n_recent + self.k_budget
    }

    /// Sink positions for a prefix of `prefix_len`: the first `n_sink`.
    pub fn sink_range(&self, prefix_len: usize) -> Range<usize> {
        0..self.n_sink.min(prefix_len)
    }

    /// The last `min(n_recent, prefix_len - n_sink)` positions.
    pub fn recent_range(&self, prefix_len: usize) -> Range<usize> {
        let len = self.n_recent.min(prefix_len.saturating_sub(self.n_sink));
        prefix_len - len..prefix_len
    }
}

/// Everything a slow/fast decode needs besides the model.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SfiConfig {
    pub selector: SelectorConfig,
    pub trigger: TriggerConfig,
    pub limits: CacheLimits,
}

/// Budget used for the effectiveness runs; exposed as an alternative to the
/// 2048 default.
pub const EFFECTIVENESS_K_BUDGET: usize = 3836;

pub fn default_config() -> (SelectorConfig, TriggerConfig, CacheLimits) {
    (
        SelectorConfig::default(),
        TriggerConfig::default(),
        CacheLimits::default(),
    )
}

/// Every key accepted by [`SfiConfig::set`], in the order they are written.
pub const CONFIG_KEYS: &[&str] = &[
    "alpha",
    "gamma",
    "beta",
    "p_curve",
    "eta",
    "lambda_clip",
    "alpha_soft",
    "alpha_cross",
    "temperature",
    "nms_radius",
    "epsilon",
    "k_budget",
    "trigger_tokens",
    "t_max",
    "window_decode",
    "window_prefill",
    "n_sink",
    "n_recent",
];

/// One `key = value` line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Splits a `key = value` document into entries. Duplicate keys are rejected.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| SfiError::ConfigParse {
                line,
                msg: format!("expected `key = value`, found `{content}`"),
            })?;
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(SfiError::ConfigParse {
                line,
                msg: "empty key".into(),
            });
        }
        if out.iter().any(|e| e.key == key) {
            return Err(SfiError::ConfigParse {
                line,
                msg: format!("duplicate key `{key}`"),
            });
        }
        out.push(Entry {
            line,
            key,
            value: value.trim().to_string(),
        });
    }
    Ok(out)
}

pub(crate) fn parse_value<T: std::str::FromStr>(e: &Entry) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    e.value.parse::<T>().map_err(|err| SfiError::ConfigParse {
        line: e.line,
        msg: format!("`{}` = `{}`: {err}", e.key, e.value),
    })
}

fn parse_token_set(e: &Entry) -> Result<BTreeSet<u32>> {
    e.value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<u32>().map_err(|err| SfiError::ConfigParse {
                line: e.line,
                msg: format!("trigger token `{s}`: {err}"),
            })
        })
        .collect()
}

impl SfiConfig {
    /// Applies one entry. Returns `Ok(false)` if the key is not a config key.
    pub fn set(&mut self, e: &Entry) -> Result<bool> {
        let s = &mut self.selector;
        match e.key.as_str() {
            "alpha" => s.alpha = parse_value(e)?,
            "gamma" => s.gamma = parse_value(e)?,
            "beta" => s.beta = parse_value(e)?,
            "p_curve" => s.p_curve = parse_value(e)?,
            "eta" => s.eta = parse_value(e)?,
            "lambda_clip" => s.lambda_clip = parse_value(e)?,
            "alpha_soft" => s.alpha_soft = parse_value(e)?,
            "alpha_cross" => s.alpha_cross = parse_value(e)?,
            "temperature" => s.temperature = parse_value(e)?,
            "nms_radius" => s.nms_radius = parse_value(e)?,
            "epsilon" => s.epsilon = parse_value(e)?,
            "k_budget" => {
                let k = parse_value(e)?;
                s.k_budget = k;
                self.limits.k_budget = k;
            }
            "trigger_tokens" => self.trigger.trigger_tokens = parse_token_set(e)?,
            "t_max" => self.trigger.t_max = parse_value(e)?,
            "window_decode" => self.trigger.window_decode = parse_value(e)?,
            "window_prefill" => self.trigger.window_prefill = parse_value(e)?,
            "n_sink" => self.limits.n_sink = parse_value(e)?,
            "n_recent" => self.limits.n_recent = parse_value(e)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses a config document on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = SfiConfig::default();
        for e in parse_entries(text)? {
            if !cfg.set(&e)? {
                return Err(SfiError::UnknownKey {
                    line: e.line,
                    key: e.key,
                });
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SfiError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.selector.validate()?;
        self.trigger.validate()?;
        if self.selector.k_budget != self.limits.k_budget {
            return Err(SfiError::InvalidConfig(format!(
                "selector k_budget {} disagrees with cache k_budget {}",
                self.selector.k_budget, self.limits.k_budget
            )));
        }
        if self.limits.n_recent == 0 {
            return Err(SfiError::InvalidConfig("n_recent must be >= 1".into()));
        }
        Ok(())
    }

    /// Writes every key, in [`CONFIG_KEYS`] order.
    pub fn to_config_string(&self) -> String {
        let s = &self.selector;
        let t = &self.trigger;
        let l = &self.limits;
        let tokens = t
            .trigger_tokens
            .iter()
            .map(u32::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("alpha", format!("{:?}", s.alpha));
        kv("gamma", format!("{:?}", s.gamma));
        kv("beta", format!("{:?}", s.beta));
        kv("p_curve", format!("{:?}", s.p_curve));
        kv("eta", format!("{:?}", s.eta));
        kv("lambda_clip", format!("{:?}", s.lambda_clip));
        kv("alpha_soft", format!("{:?}", s.alpha_soft));
        kv("alpha_cross", format!("{:?}", s.alpha_cross));
        kv("temperature", format!("{:?}", s.temperature));
        kv("nms_radius", s.nms_radius.to_string());
        kv("epsilon", format!("{:?}", s.epsilon));
        kv("k_budget", s.k_budget.to_string());
        kv("trigger_tokens", tokens);
        kv("t_max", t.t_max.to_string());
        kv("window_decode", t.window_decode.to_string());
        kv("window_prefill", t.window_prefill.to_string());
        kv("n_sink", l.n_sink.to_string());
        kv("n_recent", l.n_recent.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_match_published_configuration() {
        let (sel, trig, lim) = default_config();
        assert_eq!(sel.lambda_clip, 0.02);
        assert_eq!(sel.alpha_soft, 0.5);
        assert_eq!(sel.alpha_cross, 0.35);
        assert_eq!(sel.epsilon, 1e-8);
        assert_eq!(sel.k_budget, 2048);
        assert_eq!((lim.n_sink, lim.n_recent, lim.k_budget), (4, 256, 2048));
        assert_eq!(trig.t_max, 64);
        assert_eq!((trig.window_decode, trig.window_prefill), (1, 16));
        assert_eq!(trig.trigger_tokens.len(), 5);
    }

    #[test]
    fn defaults_for_unpublished_knobs() {
        let (sel, _, _) = default_config();
        assert_eq!(sel.alpha, 1.0);
        assert_eq!(sel.gamma, 1.0);
        assert_eq!(sel.beta, 1.0);
        assert_eq!(sel.p_curve, 2.0);
        assert_eq!(sel.eta, 0.5);
        assert_eq!(sel.temperature, 1.0);
        assert_eq!(sel.nms_radius, 2);
    }

    #[test]
    fn default_round_trips_through_file_format() {
        let cfg = SfiConfig::default();
        let text = cfg.to_config_string();
        assert_eq!(SfiConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = SfiConfig::parse("alpha = 0.5\nlamda_clip = 0.1\n").unwrap_err();
        match err {
            SfiError::UnknownKey { line, key } => {
                assert_eq!(line, 2);
                assert_eq!(key, "lamda_clip");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = SfiConfig::parse("# header\n\nk_budget = 16 # small\n").unwrap();
        assert_eq!(cfg.selector.k_budget, 16);
        assert_eq!(cfg.limits.k_budget, 16);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(SfiConfig::parse("alpha = 0").is_err());
        assert!(SfiConfig::parse("alpha = 1.5").is_err());
        assert!(SfiConfig::parse("lambda_clip = 1.01").is_err());
        assert!(SfiConfig::parse("temperature = 0").is_err());
        assert!(SfiConfig::parse("p_curve = 0.5").is_err());
        assert!(SfiConfig::parse("t_max = 0").is_err());
        assert!(SfiConfig::parse("n_recent = 0").is_err());
        assert!(SfiConfig::parse("alpha = abc").is_err());
        assert!(SfiConfig::parse("alpha").is_err());
        assert!(SfiConfig::parse("alpha = 1\nalpha = 1").is_err());
    }

    #[test]
    fn cache_limits_respect_context() {
        let lim = CacheLimits::default();
        assert!(lim.validate(260).is_ok());
        assert!(lim.validate(259).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_configs_round_trip(
            alpha in 1e-6f64..=1.0,
            gamma in 0.0f64..10.0,
            lambda_clip in 0.0f64..=1.0,
            eps in 1e-12f64..1e-2,
            k in 0usize..5000,
            tokens in prop::collection::btree_set(0u32..100_000, 0..8),
            t_max in 1usize..1000,
        ) {
            let mut cfg = SfiConfig::default();
            cfg.selector.alpha = alpha;
            cfg.selector.gamma = gamma;
            cfg.selector.lambda_clip = lambda_clip;
            cfg.selector.epsilon = eps;
            cfg.selector.k_budget = k;
            cfg.limits.k_budget = k;
            cfg.trigger.trigger_tokens = tokens;
            cfg.trigger.t_max = t_max;
            let back = SfiConfig::parse(&cfg.to_config_string()).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
