use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfi_core::attention::{build_toy_model, Engine, ModelSpec, PoolMode, ToyEngine};
use sfi_core::harness::{
    check_segment_freezing, check_support_bound, check_trigger_replay, topic_prompt,
};
use sfi_core::scheduler::{run_dense, run_request, StepKind};
use sfi_core::{CacheLimits, SfiConfig};

fn config(n_sink: usize, n_recent: usize, k: usize, t_max: usize, window: usize) -> SfiConfig {
    let mut cfg = SfiConfig::default();
    cfg.limits = CacheLimits {
        n_sink,
        n_recent,
        k_budget: k,
    };
    cfg.selector.k_budget = k;
    cfg.trigger.t_max = t_max;
    cfg.trigger.window_decode = window;
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sparse_runs_keep_their_invariants(
        seed in 0u64..1000,
        len in 8usize..96,
        n_sink in 0usize..6,
        n_recent in 1usize..24,
        k in 0usize..24,
        t_max in 1usize..12,
        window in 1usize..6,
    ) {
        let model = build_toy_model(ModelSpec::default(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompt = topic_prompt(&mut rng, len, 64);
        let cfg = config(n_sink, n_recent, k, t_max, window);
        let mut engine = ToyEngine::new(&model, cfg.limits, 16, PoolMode::Mean).unwrap();
        let out = run_request(&prompt, &cfg, &mut engine, 24).unwrap();
        prop_assert_eq!(out.tokens.len(), 24);
        prop_assert!(check_trigger_replay(&out, &cfg.trigger).is_empty());
        prop_assert!(check_segment_freezing(&out.steps).is_empty());
        prop_assert!(check_support_bound(&out.steps, &cfg.limits).is_empty());
        for s in &out.steps {
            prop_assert!(s.mean_support > 0.0 && s.mean_support <= s.prefix_len as f64);
            if s.kind == StepKind::Slow {
                prop_assert_eq!(s.support_size, s.prefix_len);
            }
        }
        prop_assert_eq!(engine.prefix_len(), len + 23);
    }
}

#[test]
fn max_pool_and_wide_windows_decode_like_dense_at_full_retention() {
    let model = build_toy_model(ModelSpec::default(), 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let prompt = topic_prompt(&mut rng, 120, 64);
    let cfg = config(4, 400, 8, 6, 4);
    let mut sfi = ToyEngine::new(&model, cfg.limits, 16, PoolMode::Max).unwrap();
    let a = run_request(&prompt, &cfg, &mut sfi, 40).unwrap();
    let mut dense = ToyEngine::new(&model, cfg.limits, 1, PoolMode::Max).unwrap();
    let b = run_dense(&prompt, &mut dense, 40).unwrap();
    assert_eq!(a.tokens, b.tokens);
    assert_eq!(a.logits, b.logits);
    assert!(a.steps.iter().any(|s| s.kind == StepKind::Fast));
}
