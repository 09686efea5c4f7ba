use crate::attention::Model;
use crate::error::{Result, SfiError};

/// Outputs of the reference forward pass at the last prompt position.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceOutput {
    pub logits: Vec<f32>,
    /// `[layer][query_head * head_dim]` attention outputs (before `wo`).
    pub attn_out: Vec<Vec<f32>>,
}

/// Whole-prompt forward pass, layer by layer, with quadratic causal
/// attention. Every position except the last attends to its full prefix;
/// the last one attends only to `mask[layer][kv_head]` (everything else is
/// set to `-inf` before the softmax).
///
/// Rounding to `f32` happens where the cached decoder stores values:
/// projections, rotary outputs, attention outputs and the residual stream.
pub fn masked_attention_reference(
    model: &Model,
    prompt: &[u32],
    mask: &[Vec<Vec<usize>>],
) -> Result<ReferenceOutput> {
    let spec = &model.spec;
    let n = prompt.len();
    if n == 0 {
        return Err(SfiError::EmptySupport);
    }
    if mask.len() != spec.n_layers || mask.iter().any(|m| m.len() != spec.n_kv_heads) {
        return Err(SfiError::Misaligned {
            what: "reference mask",
            expected: spec.n_layers * spec.n_kv_heads,
            got: mask.iter().map(Vec::len).sum(),
        });
    }
    let dm = spec.d_model();
    let hd = spec.head_dim;
    let hq = spec.n_query_heads;
    let hkv = spec.n_kv_heads;
    let group = hq / hkv;

    let mut x: Vec<Vec<f32>> = Vec::with_capacity(n);
    for &t in prompt {
        let t = t as usize;
        if t >= spec.vocab_size {
            return Err(SfiError::TokenOutOfRange {
                token: t as u32,
                vocab: spec.vocab_size,
            });
        }
        x.push(model.embed[t * dm..(t + 1) * dm].to_vec());
    }

    let mut attn_last = Vec::with_capacity(spec.n_layers);
    for (layer, w) in model.layers.iter().enumerate() {
        let mut qs = Vec::with_capacity(n);
        let mut ks = Vec::with_capacity(n);
        let mut vs = Vec::with_capacity(n);
        for (pos, xp) in x.iter().enumerate() {
            let h = norm(xp, &w.attn_norm);
            let mut q = project(&w.wq, &h, hq * hd);
            let mut k = project(&w.wk, &h, hkv * hd);
            let v = project(&w.wv, &h, hkv * hd);
            rotate(&mut q, hd, pos, spec.rope_base);
            rotate(&mut k, hd, pos, spec.rope_base);
            qs.push(q);
            ks.push(k);
            vs.push(v);
        }

        let scale = 1.0 / (hd as f64).sqrt();
        for pos in 0..n {
            let mut out = vec![0.0f32; hq * hd];
            for head in 0..hq {
                let kvh = head / group;
                let q = &qs[pos][head * hd..(head + 1) * hd];
                let mut logits = vec![f64::NEG_INFINITY; pos + 1];
                for (j, l) in logits.iter_mut().enumerate() {
                    if pos == n - 1 && !mask[layer][kvh].contains(&j) {
                        continue;
                    }
                    let k = &ks[j][kvh * hd..(kvh + 1) * hd];
                    let mut s = 0.0f64;
                    for i in 0..hd {
                        s += q[i] as f64 * k[i] as f64;
                    }
                    *l = s * scale;
                }
                let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if top == f64::NEG_INFINITY {
                    return Err(SfiError::FullyMaskedRow { row: pos });
                }
                let weights: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
                let z: f64 = weights.iter().sum();
                for i in 0..hd {
                    let mut acc = 0.0f64;
                    for (j, wj) in weights.iter().enumerate() {
                        acc += wj * vs[j][kvh * hd + i] as f64;
                    }
                    out[head * hd + i] = (acc / z) as f32;
                }
            }
            let o = project(&w.wo, &out, dm);
            for i in 0..dm {
                x[pos][i] += o[i];
            }
            let h = norm(&x[pos], &w.mlp_norm);
            let hidden = spec.mlp_hidden();
            let gate = project(&w.w_gate, &h, hidden);
            let up = project(&w.w_up, &h, hidden);
            let mut act = vec![0.0f32; hidden];
            for i in 0..hidden {
                let g = gate[i] as f64;
                let sig = 1.0 / (1.0 + (-g).exp());
                act[i] = (g * sig * up[i] as f64) as f32;
            }
            let down = project(&w.w_down, &act, dm);
            for i in 0..dm {
                x[pos][i] += down[i];
            }
            if pos == n - 1 {
                attn_last.push(out);
            }
        }
    }
    let h = norm(&x[n - 1], &model.final_norm);
    Ok(ReferenceOutput {
        logits: project(&model.lm_head, &h, spec.vocab_size),
        attn_out: attn_last,
    })
}

fn project(w: &[f32], x: &[f32], rows: usize) -> Vec<f32> {
    let cols = x.len();
    let mut out = vec![0.0f32; rows];
    for (r, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for c in 0..cols {
            acc += w[r * cols + c] as f64 * x[c] as f64;
        }
        *o = acc as f32;
    }
    out
}

fn norm(x: &[f32], g: &[f32]) -> Vec<f32> {
    let mut ss = 0.0f64;
    for &v in x {
        ss += v as f64 * v as f64;
    }
    let r = 1.0 / (ss / x.len() as f64 + 1e-6).sqrt();
    (0..x.len())
        .map(|i| (x[i] as f64 * r * g[i] as f64) as f32)
        .collect()
}

fn rotate(v: &mut [f32], hd: usize, pos: usize, base: f64) {
    for head in v.chunks_exact_mut(hd) {
        for i in 0..hd / 2 {
            let freq = 1.0 / base.powf((2 * i) as f64 / hd as f64);
            let ang = pos as f64 * freq;
            let (a, b) = (head[2 * i] as f64, head[2 * i + 1] as f64);
            head[2 * i] = (a * ang.cos() - b * ang.sin()) as f32;
            head[2 * i + 1] = (a * ang.sin() + b * ang.cos()) as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{build_toy_model, Engine, ModelSpec, PoolMode, ToyEngine};
    use crate::config::CacheLimits;

    fn full_mask(model: &Model, n: usize) -> Vec<Vec<Vec<usize>>> {
        vec![vec![(0..n).collect(); model.spec.n_kv_heads]; model.spec.n_layers]
    }

    #[test]
    fn unmasked_reference_matches_the_dense_engine() {
        let model = build_toy_model(ModelSpec::default(), 11).unwrap();
        let prompt: Vec<u32> = (0..40).map(|i| (i * 9 % 64) as u32).collect();
        let r = masked_attention_reference(&model, &prompt, &full_mask(&model, 40)).unwrap();
        let mut e = ToyEngine::new(&model, CacheLimits::default(), 1, PoolMode::Mean).unwrap();
        let d = e.dense_step(&prompt, None).unwrap();
        let scale = r.logits.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        for (a, b) in r.logits.iter().zip(&d.logits) {
            assert!((a - b).abs() <= 1e-6 * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn single_position_mask_returns_its_value() {
        let model = build_toy_model(ModelSpec::default(), 12).unwrap();
        let prompt: Vec<u32> = (5..25).collect();
        let last = prompt.len() - 1;
        let mask = vec![vec![vec![last]; 2]; 2];
        let r = masked_attention_reference(&model, &prompt, &mask).unwrap();
        // A recent window of one reads only the newest position.
        let limits = CacheLimits {
            n_sink: 0,
            n_recent: 1,
            k_budget: 0,
        };
        let mut e2 = ToyEngine::new(&model, limits, 1, PoolMode::Mean).unwrap();
        e2.dense_step(&prompt[..last], None).unwrap();
        for l in 0..2 {
            e2.reorganize(l, 0..0, &[vec![], vec![]]).unwrap();
        }
        let s = e2.sparse_step(prompt[last]).unwrap();
        let v = e2.store().layer(0).value(last, 1).to_vec();
        assert_eq!(&r.attn_out[0][2 * 16..3 * 16], v.as_slice());
        let scale = r.logits.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        for (a, b) in r.logits.iter().zip(&s.logits) {
            assert!((a - b).abs() <= 1e-6 * scale);
        }
    }

    #[test]
    fn misaligned_masks_are_rejected() {
        let model = build_toy_model(ModelSpec::default(), 13).unwrap();
        assert!(masked_attention_reference(&model, &[5, 6], &[vec![vec![0]]]).is_err());
    }
}
