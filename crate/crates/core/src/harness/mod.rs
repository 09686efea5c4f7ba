//! Experiments: slow-fast against dense decoding on the toy model, the
//! consecutive-step support stability measurement, and attention timing.

mod bench;
mod experiment;
mod prompts;
mod stability;

pub use bench::{
    bench_attention, bench_limits, flop_model, judge_bench, write_bench_csv, BenchRow, BenchShape,
    BenchVerdict,
};
pub use experiment::{
    check_segment_freezing, check_support_bound, check_trigger_replay, replay_step_kinds,
    run_experiment, run_prompts, write_report, Aggregates, ExperimentSpec, Mode, ModelSource,
    RequestLogs, RequestReport, RunReport, SUMMARY_SCHEMA_VERSION,
};
pub use prompts::{format_prompts, parse_prompts, read_prompts, topic_prompt, write_prompts};
pub use stability::{jaccard, measure_support_stability, StabilityReport};
