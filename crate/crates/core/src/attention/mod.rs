//! Reference GQA decoder and the two-segment KV store it reads from.

mod engine;
mod kernel;
mod kv;
mod model;

pub use engine::{argmax, Engine, StepOutput, ToyEngine, WindowRequest};
pub use kernel::{attend, dense_attention, sparse_attention, window_logits, AttnOutput, PoolMode};
pub use kv::{CompactSegment, KvStore, LayerKv, TailView, PAGE_SIZE};
pub use model::{
    build_toy_model, topic_of, LayerWeights, Model, ModelSpec, ENDIAN_TAG, TOY_TOPICS,
    WEIGHT_MAGIC, WEIGHT_VERSION,
};
