//! Slow-fast sparse decoding.
//!
//! Most decode steps ("fast") attend to a small managed support: a few sink
//! positions, a sliding recent window and a per-KV-head selected set. At
//! sentence boundaries, or after a bounded run of fast steps, a "slow" step
//! attends densely, records a window of attention logits and refreshes the
//! selected sets with a closed-form selector.
//!
//! * [`selector`]: evidence, prior, KL fusion, log-score refinement, Top-K
//! * [`scheduler`]: the per-request slow/fast state machine
//! * [`attention`]: a toy rotary GQA decoder over a two-segment KV store
//! * [`oracle`]: brute-force checks for the closed forms and kernels
//! * [`harness`]: experiments, stability measurement and timing

pub mod attention;
pub mod config;
pub mod distribution;
pub mod error;
pub mod harness;
pub mod oracle;
pub mod scheduler;
pub mod selector;

pub use config::{default_config, CacheLimits, SelectorConfig, SfiConfig, TriggerConfig};
pub use distribution::{normalize, validate_distribution, ScoreDistribution};
pub use error::{Result, SfiError};
