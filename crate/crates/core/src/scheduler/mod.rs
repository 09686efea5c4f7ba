//! Per-request slow/fast decoding loop.
//!
//! Step 0 is the prefill: one dense pass over the prompt that also records
//! the tail window and refreshes the selected sets. Every later step feeds
//! the previously emitted token. A step is slow when the fed token is a
//! trigger or when `t_max` fast steps have run since the last slow step;
//! otherwise it is fast and attends to `sink ∪ recent ∪ selected` only.
//! Fast steps never touch the selected sets.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::attention::{argmax, Engine, StepOutput, WindowRequest};
use crate::config::{CacheLimits, SfiConfig, TriggerConfig};
use crate::error::{Result, SfiError};
use crate::selector::{run_selector, run_selector_traced};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Slow,
    Fast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlowCause {
    Initial,
    Trigger,
    Forced,
}

/// Index sets of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseState {
    pub layer: usize,
    pub sink: Range<usize>,
    pub recent: Range<usize>,
    /// Per KV head, ascending.
    pub selected: Vec<Vec<usize>>,
}

impl SparseState {
    pub fn new(layer: usize, n_kv_heads: usize) -> Self {
        Self {
            layer,
            sink: 0..0,
            recent: 0..0,
            selected: vec![Vec::new(); n_kv_heads],
        }
    }

    fn is_mandatory(&self, p: usize) -> bool {
        self.sink.contains(&p) || self.recent.contains(&p)
    }

    /// `sink ∪ recent ∪ selected[head]`, ascending.
    pub fn support(&self, head: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .sink
            .clone()
            .chain(self.selected[head].iter().copied())
            .chain(self.recent.clone())
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeState {
    pub t: usize,
    /// Positions held in the KV cache.
    pub prefix_len: usize,
    /// Type of the next step.
    pub g: StepKind,
    pub steps_since_slow: usize,
    /// Token the next step feeds.
    pub last_token: u32,
    pub limits: CacheLimits,
    pub per_layer: Vec<SparseState>,
}

impl DecodeState {
    pub fn new(n_layers: usize, n_kv_heads: usize, limits: CacheLimits, last_token: u32) -> Self {
        Self {
            t: 0,
            prefix_len: 0,
            g: StepKind::Slow,
            steps_since_slow: 0,
            last_token,
            limits,
            per_layer: (0..n_layers)
                .map(|l| SparseState::new(l, n_kv_heads))
                .collect(),
        }
    }

    fn set_prefix(&mut self, prefix_len: usize) {
        self.prefix_len = prefix_len;
        for s in &mut self.per_layer {
            s.sink = self.limits.sink_range(prefix_len);
            s.recent = self.limits.recent_range(prefix_len);
        }
    }

    /// Hash of every layer's selected sets.
    pub fn selected_digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for s in &self.per_layer {
            s.selected.hash(&mut h);
        }
        h.finish()
    }
}

/// `{0..L} \ (sink ∪ recent)`, ascending.
pub fn compute_allowed(state: &SparseState, prefix_len: usize) -> Vec<usize> {
    (0..prefix_len)
        .filter(|&p| !state.is_mandatory(p))
        .collect()
}

/// Type of the step about to run and, for slow steps, why.
pub fn next_step_type(state: &DecodeState, trig: &TriggerConfig) -> (StepKind, Option<SlowCause>) {
    if state.t == 0 {
        (StepKind::Slow, Some(SlowCause::Initial))
    } else if trig.is_trigger(state.last_token) {
        (StepKind::Slow, Some(SlowCause::Trigger))
    } else if state.steps_since_slow >= trig.t_max {
        (StepKind::Slow, Some(SlowCause::Forced))
    } else {
        (StepKind::Fast, None)
    }
}

/// Bookkeeping after a fast step that appended one position and emitted `token`.
pub fn fast_step_update(state: &mut DecodeState, token: u32) {
    state.t += 1;
    state.set_prefix(state.prefix_len + 1);
    state.steps_since_slow += 1;
    state.last_token = token;
}

/// Bookkeeping after a slow step that appended `appended` positions and
/// emitted `token`. `selected[layer][head]` replaces the selected sets
/// wholesale; each set must be ascending, inside the prefix, within budget
/// and disjoint from the sink and recent sets of the new prefix.
pub fn slow_step_update(
    state: &mut DecodeState,
    selected: Vec<Vec<Vec<usize>>>,
    appended: usize,
    token: u32,
) -> Result<()> {
    if selected.len() != state.per_layer.len() {
        return Err(SfiError::Misaligned {
            what: "selected sets per layer",
            expected: state.per_layer.len(),
            got: selected.len(),
        });
    }
    let prefix_len = state.prefix_len + appended;
    let mut next = state.clone();
    next.set_prefix(prefix_len);
    for (layer, sets) in next.per_layer.iter_mut().zip(selected) {
        if sets.len() != layer.selected.len() {
            return Err(SfiError::Misaligned {
                what: "selected sets per KV head",
                expected: layer.selected.len(),
                got: sets.len(),
            });
        }
        for (head, set) in sets.iter().enumerate() {
            if set.len() > state.limits.k_budget {
                return Err(SfiError::Invariant(format!(
                    "layer {} head {head}: {} selected positions exceed k_budget {}",
                    layer.layer,
                    set.len(),
                    state.limits.k_budget
                )));
            }
            if !set.windows(2).all(|w| w[0] < w[1]) {
                return Err(SfiError::Invariant(format!(
                    "layer {} head {head}: selected positions are not strictly ascending",
                    layer.layer
                )));
            }
            for &p in set {
                if p >= prefix_len {
                    return Err(SfiError::SelectionOutOfRange {
                        head,
                        position: p,
                        prefix_len,
                    });
                }
                if layer.is_mandatory(p) {
                    return Err(SfiError::SelectionOverlap { head, position: p });
                }
            }
        }
        layer.selected = sets;
    }
    next.t += 1;
    next.steps_since_slow = 0;
    next.last_token = token;
    *state = next;
    Ok(())
}

/// One line of the step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    #[serde(rename = "type")]
    pub kind: StepKind,
    pub cause: Option<SlowCause>,
    /// Token fed at this step (the last prompt token for the prefill).
    pub input: u32,
    /// Token emitted by this step.
    pub token: u32,
    /// Positions in the cache after the step.
    pub prefix_len: usize,
    /// Largest attention support over layers and KV heads.
    pub support_size: usize,
    pub mean_support: f64,
    /// Size of the allowed set at a slow step; 0 on fast steps.
    pub allowed_size: usize,
    pub flops: u64,
    pub kv_reads: u64,
    /// Digest of the selected sets in force after the step.
    pub selected_digest: u64,
    /// Digest of the engine's compact segments after the step.
    pub compact_digest: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequestOutput {
    pub tokens: Vec<u32>,
    pub steps: Vec<StepRecord>,
    /// Vocabulary logits of every step, aligned with `tokens`.
    pub logits: Vec<Vec<f32>>,
}

fn check_request<E: Engine>(prompt: &[u32], engine: &E, max_new: usize) -> Result<()> {
    if prompt.is_empty() {
        return Err(SfiError::InvalidConfig("prompt must be non-empty".into()));
    }
    if max_new == 0 {
        return Err(SfiError::InvalidConfig("max_new must be >= 1".into()));
    }
    if engine.prefix_len() != 0 {
        return Err(SfiError::Invariant("engine already holds a prefix".into()));
    }
    let needed = prompt.len() + max_new - 1;
    if needed > engine.max_positions() {
        return Err(SfiError::ContextOverflow {
            needed,
            max: engine.max_positions(),
        });
    }
    Ok(())
}

fn support_stats(out: &StepOutput) -> (usize, f64) {
    let all: Vec<usize> = out.support.iter().flatten().copied().collect();
    let max = all.iter().copied().max().unwrap_or(0);
    let mean = all.iter().sum::<usize>() as f64 / all.len().max(1) as f64;
    (max, mean)
}

/// Slow/fast greedy decoding of `max_new` tokens after `prompt`.
pub fn run_request<E: Engine>(
    prompt: &[u32],
    cfg: &SfiConfig,
    engine: &mut E,
    max_new: usize,
) -> Result<RequestOutput> {
    run_request_traced(prompt, cfg, engine, max_new, None)
}

/// [`run_request`] that also dumps every selector invocation as JSON lines.
pub fn run_request_traced<E: Engine>(
    prompt: &[u32],
    cfg: &SfiConfig,
    engine: &mut E,
    max_new: usize,
    mut trace: Option<&mut dyn Write>,
) -> Result<RequestOutput> {
    cfg.validate()?;
    check_request(prompt, engine, max_new)?;
    let trig = &cfg.trigger;
    let need = trig.window_prefill.max(trig.window_decode);
    if engine.window_capacity() < need {
        return Err(SfiError::InvalidConfig(format!(
            "engine keeps {} query rows but the windows need {need}",
            engine.window_capacity()
        )));
    }

    let mut state = DecodeState::new(
        engine.n_layers(),
        engine.n_kv_heads(),
        cfg.limits,
        prompt[prompt.len() - 1],
    );
    let mut out = RequestOutput {
        tokens: Vec::with_capacity(max_new),
        steps: Vec::with_capacity(max_new),
        logits: Vec::with_capacity(max_new),
    };

    while out.tokens.len() < max_new {
        let (kind, cause) = next_step_type(&state, trig);
        let fed: Vec<u32> = if state.t == 0 {
            prompt.to_vec()
        } else {
            vec![state.last_token]
        };
        let new_len = state.prefix_len + fed.len();

        let (step, allowed_size) = match kind {
            StepKind::Slow => {
                let mut probe = state.per_layer[0].clone();
                probe.sink = cfg.limits.sink_range(new_len);
                probe.recent = cfg.limits.recent_range(new_len);
                let allowed = compute_allowed(&probe, new_len);
                let nominal = if state.t == 0 {
                    trig.window_prefill
                } else {
                    trig.window_decode
                };
                // Query rows before the first allowed position would be fully masked.
                let rows = allowed.first().map_or(new_len, |&j0| new_len - j0);
                let width = nominal.min(new_len).min(rows).max(1);
                let step = engine.dense_step(
                    &fed,
                    Some(WindowRequest {
                        width,
                        allowed: &allowed,
                    }),
                )?;
                let windows = step.attn_logits.as_ref().ok_or_else(|| {
                    SfiError::Invariant("slow step returned no logit window".into())
                })?;

                let mut selected = Vec::with_capacity(engine.n_layers());
                for (layer, window) in windows.iter().enumerate() {
                    if allowed.is_empty() {
                        selected.push(vec![Vec::new(); engine.n_kv_heads()]);
                        continue;
                    }
                    let stats = engine.cache_stats(layer, &allowed, cfg.selector.epsilon)?;
                    let sel = match trace.as_deref_mut() {
                        Some(w) => run_selector_traced(window, &stats, &cfg.selector, w)?,
                        None => run_selector(window, &stats, &cfg.selector)?,
                    };
                    selected.push(sel.selected);
                }
                let token = argmax(&step.logits);
                slow_step_update(&mut state, selected, fed.len(), token)?;
                for s in &state.per_layer {
                    engine.reorganize(s.layer, s.sink.clone(), &s.selected)?;
                }
                (step, allowed.len())
            }
            StepKind::Fast => {
                let step = engine.sparse_step(state.last_token)?;
                fast_step_update(&mut state, argmax(&step.logits));
                (step, 0)
            }
        };
        debug_assert_eq!(engine.prefix_len(), state.prefix_len);

        let (support_size, mean_support) = support_stats(&step);
        out.steps.push(StepRecord {
            t: state.t - 1,
            kind,
            cause,
            input: fed[fed.len() - 1],
            token: state.last_token,
            prefix_len: state.prefix_len,
            support_size,
            mean_support,
            allowed_size,
            flops: step.flops,
            kv_reads: step.kv_reads,
            selected_digest: state.selected_digest(),
            compact_digest: engine.compact_digest(),
        });
        out.tokens.push(state.last_token);
        out.logits.push(step.logits);
        state.g = next_step_type(&state, trig).0;
    }
    Ok(out)
}

/// Full-KV greedy baseline: every step dense, no selector.
pub fn run_dense<E: Engine>(
    prompt: &[u32],
    engine: &mut E,
    max_new: usize,
) -> Result<RequestOutput> {
    check_request(prompt, engine, max_new)?;
    let mut out = RequestOutput {
        tokens: Vec::with_capacity(max_new),
        steps: Vec::with_capacity(max_new),
        logits: Vec::with_capacity(max_new),
    };
    let mut fed = prompt.to_vec();
    for t in 0..max_new {
        let step = engine.dense_step(&fed, None)?;
        let token = argmax(&step.logits);
        let (support_size, mean_support) = support_stats(&step);
        out.steps.push(StepRecord {
            t,
            kind: StepKind::Slow,
            cause: None,
            input: fed[fed.len() - 1],
            token,
            prefix_len: engine.prefix_len(),
            support_size,
            mean_support,
            allowed_size: 0,
            flops: step.flops,
            kv_reads: step.kv_reads,
            selected_digest: 0,
            compact_digest: 0,
        });
        out.tokens.push(token);
        out.logits.push(step.logits);
        fed = vec![token];
    }
    Ok(out)
}
