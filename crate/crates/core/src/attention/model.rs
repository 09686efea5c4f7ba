//! Toy decoder-only transformer: token embeddings, pre-norm rotary GQA
//! attention, gated SiLU MLP, final RMSNorm and an output projection.
//!
//! Weight file layout (all little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `SFIW`                            |
//! | 4      | 4    | version, `u32` = 1                      |
//! | 8      | 4    | endianness tag, `u32` = 0x0102_0304     |
//! | 12     | 24   | n_layers, n_query_heads, n_kv_heads, head_dim, vocab_size, max_positions (`u32` each) |
//! | 36     | 8    | rope_base, `f64`                        |
//! | 44     | ...  | `f32` tensors, row-major, declaration order |
//!
//! Declaration order: `embed [vocab, d_model]`; per layer `attn_norm [d_model]`,
//! `wq [q_dim, d_model]`, `wk [kv_dim, d_model]`, `wv [kv_dim, d_model]`,
//! `wo [d_model, q_dim]`, `mlp_norm [d_model]`, `w_gate [hidden, d_model]`,
//! `w_up [hidden, d_model]`, `w_down [d_model, hidden]`; then
//! `final_norm [d_model]` and `lm_head [vocab, d_model]`.
//! `q_dim = n_query_heads * head_dim`, `kv_dim = n_kv_heads * head_dim`,
//! `d_model = q_dim`, `hidden = 2 * d_model`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::toy_vocab;
use crate::error::{Result, SfiError};

pub const WEIGHT_MAGIC: [u8; 4] = *b"SFIW";
pub const WEIGHT_VERSION: u32 = 1;
pub const ENDIAN_TAG: u32 = 0x0102_0304;
const HEADER_LEN: usize = 44;

/// Number of word topics in the toy vocabulary. Word token `w` belongs to
/// topic `(w - FIRST_WORD) % TOY_TOPICS`.
pub const TOY_TOPICS: u32 = 4;

pub fn topic_of(token: u32) -> Option<u32> {
    token
        .checked_sub(toy_vocab::FIRST_WORD)
        .map(|w| w % TOY_TOPICS)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub n_query_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub rope_base: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_query_heads: 4,
            n_kv_heads: 2,
            head_dim: 16,
            vocab_size: 64,
            max_positions: 4096,
            rope_base: 10_000.0,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SfiError::InvalidModelSpec(m));
        if self.n_layers == 0 || self.n_kv_heads == 0 || self.n_query_heads == 0 {
            return bad("layer and head counts must be >= 1".into());
        }
        if self.n_query_heads % self.n_kv_heads != 0 {
            return bad(format!(
                "{} query heads is not a multiple of {} KV heads",
                self.n_query_heads, self.n_kv_heads
            ));
        }
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return bad(format!(
                "head_dim {} must be even and non-zero",
                self.head_dim
            ));
        }
        if (self.vocab_size as u32) <= toy_vocab::FIRST_WORD {
            return bad(format!(
                "vocab_size {} leaves no word tokens",
                self.vocab_size
            ));
        }
        if self.max_positions == 0 {
            return bad("max_positions must be >= 1".into());
        }
        if !(self.rope_base > 1.0 && self.rope_base.is_finite()) {
            return bad(format!("rope_base {} must be > 1", self.rope_base));
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.n_query_heads / self.n_kv_heads
    }

    pub fn d_model(&self) -> usize {
        self.n_query_heads * self.head_dim
    }

    pub fn q_dim(&self) -> usize {
        self.n_query_heads * self.head_dim
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn mlp_hidden(&self) -> usize {
        2 * self.d_model()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub mlp_norm: Vec<f32>,
    pub w_gate: Vec<f32>,
    pub w_up: Vec<f32>,
    pub w_down: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub embed: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    pub lm_head: Vec<f32>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f32> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng) as f32).collect()
}

/// Seeded toy model.
///
/// Word embeddings are a per-topic centroid plus smaller per-token noise, so
/// tokens of one topic produce similar queries; boundary tokens get their
/// own independent embeddings.
pub fn build_toy_model(spec: ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.d_model();
    let (q_dim, kv_dim, hidden) = (spec.q_dim(), spec.kv_dim(), spec.mlp_hidden());
    let inv = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

    let centroids: Vec<Vec<f32>> = (0..TOY_TOPICS)
        .map(|_| gaussian(&mut rng, d, 1.0))
        .collect();
    let mut embed = Vec::with_capacity(spec.vocab_size * d);
    for token in 0..spec.vocab_size as u32 {
        match topic_of(token) {
            Some(topic) => {
                let noise = gaussian(&mut rng, d, 0.5);
                embed.extend(
                    centroids[topic as usize]
                        .iter()
                        .zip(noise)
                        .map(|(c, n)| c + n),
                );
            }
            None => embed.extend(gaussian(&mut rng, d, 1.0)),
        }
    }

    let layers = (0..spec.n_layers)
        .map(|_| LayerWeights {
            attn_norm: vec![1.0; d],
            wq: gaussian(&mut rng, q_dim * d, 2.0 * inv(d)),
            wk: gaussian(&mut rng, kv_dim * d, 2.0 * inv(d)),
            wv: gaussian(&mut rng, kv_dim * d, inv(d)),
            wo: gaussian(&mut rng, d * q_dim, 0.5 * inv(q_dim)),
            mlp_norm: vec![1.0; d],
            w_gate: gaussian(&mut rng, hidden * d, inv(d)),
            w_up: gaussian(&mut rng, hidden * d, inv(d)),
            w_down: gaussian(&mut rng, d * hidden, 0.5 * inv(hidden)),
        })
        .collect();

    // A little norm jitter keeps the norm weights from being a no-op.
    let final_norm = (0..d).map(|_| rng.random_range(0.8f32..1.2)).collect();
    let lm_head = gaussian(&mut rng, spec.vocab_size * d, inv(d));
    Ok(Model {
        spec,
        embed,
        layers,
        final_norm,
        lm_head,
    })
}

impl Model {
    fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![&self.embed];
        for l in &self.layers {
            out.extend([
                l.attn_norm.as_slice(),
                &l.wq,
                &l.wk,
                &l.wv,
                &l.wo,
                &l.mlp_norm,
                &l.w_gate,
                &l.w_up,
                &l.w_down,
            ]);
        }
        out.push(&self.final_norm);
        out.push(&self.lm_head);
        out
    }

    fn tensor_lengths(spec: &ModelSpec) -> Vec<usize> {
        let d = spec.d_model();
        let (q, kv, h) = (spec.q_dim(), spec.kv_dim(), spec.mlp_hidden());
        let mut out = vec![spec.vocab_size * d];
        for _ in 0..spec.n_layers {
            out.extend([d, q * d, kv * d, kv * d, d * q, d, h * d, h * d, d * h]);
        }
        out.push(d);
        out.push(spec.vocab_size * d);
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.spec;
        let mut out = Vec::with_capacity(
            HEADER_LEN + 4 * self.tensors().iter().map(|t| t.len()).sum::<usize>(),
        );
        out.extend_from_slice(&WEIGHT_MAGIC);
        out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
        out.extend_from_slice(&ENDIAN_TAG.to_le_bytes());
        for v in [
            s.n_layers,
            s.n_query_heads,
            s.n_kv_heads,
            s.head_dim,
            s.vocab_size,
            s.max_positions,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&s.rope_base.to_le_bytes());
        for t in self.tensors() {
            for x in t {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        let err = |offset: usize, msg: String| SfiError::WeightFile {
            offset: offset as u64,
            msg,
        };
        if bytes.len() < HEADER_LEN {
            return Err(err(
                bytes.len(),
                format!("truncated header ({} bytes)", bytes.len()),
            ));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        if bytes[0..4] != WEIGHT_MAGIC {
            return Err(err(0, "bad magic".into()));
        }
        let version = u32_at(4);
        if version != WEIGHT_VERSION {
            return Err(err(4, format!("unsupported version {version}")));
        }
        if u32_at(8) != ENDIAN_TAG {
            return Err(err(
                8,
                format!("endianness tag {:#010x} is not little-endian", u32_at(8)),
            ));
        }
        let field = |i: usize| u32_at(12 + 4 * i) as usize;
        let spec = ModelSpec {
            n_layers: field(0),
            n_query_heads: field(1),
            n_kv_heads: field(2),
            head_dim: field(3),
            vocab_size: field(4),
            max_positions: field(5),
            rope_base: f64::from_le_bytes(bytes[36..44].try_into().unwrap()),
        };
        spec.validate().map_err(|e| err(12, e.to_string()))?;

        let mut offset = HEADER_LEN;
        let mut tensors = Vec::new();
        for len in Self::tensor_lengths(&spec) {
            let end = offset + 4 * len;
            if end > bytes.len() {
                return Err(err(
                    bytes.len(),
                    format!("truncated tensor data: need {end} bytes"),
                ));
            }
            let t: Vec<f32> = bytes[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if let Some(i) = t.iter().position(|x| !x.is_finite()) {
                return Err(err(offset + 4 * i, "non-finite weight".into()));
            }
            tensors.push(t);
            offset = end;
        }
        if offset != bytes.len() {
            return Err(err(
                offset,
                format!("{} trailing bytes", bytes.len() - offset),
            ));
        }

        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("tensor count matches layout");
        let embed = next();
        let layers = (0..spec.n_layers)
            .map(|_| LayerWeights {
                attn_norm: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                mlp_norm: next(),
                w_gate: next(),
                w_up: next(),
                w_down: next(),
            })
            .collect();
        let final_norm = next();
        let lm_head = next();
        Ok(Model {
            spec,
            embed,
            layers,
            final_norm,
            lm_head,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| SfiError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let bytes = std::fs::read(path).map_err(|e| SfiError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
