use std::path::Path;

use rand::Rng;

use crate::attention::TOY_TOPICS;
use crate::config::toy_vocab;
use crate::error::{Result, SfiError};

/// Reads a prompt file: one prompt per non-blank line, token ids separated
/// by whitespace. `#` starts a comment.
pub fn read_prompts(path: &Path) -> Result<Vec<Vec<u32>>> {
    let text = std::fs::read_to_string(path).map_err(|e| SfiError::io(path, e))?;
    parse_prompts(&text)
}

pub fn parse_prompts(text: &str) -> Result<Vec<Vec<u32>>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let prompt = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<u32>().map_err(|e| SfiError::ConfigParse {
                    line: i + 1,
                    msg: format!("token `{tok}`: {e}"),
                })
            })
            .collect::<Result<Vec<u32>>>()?;
        out.push(prompt);
    }
    Ok(out)
}

pub fn format_prompts(prompts: &[Vec<u32>]) -> String {
    let mut s = String::new();
    for p in prompts {
        let line: Vec<String> = p.iter().map(u32::to_string).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn write_prompts(path: &Path, prompts: &[Vec<u32>]) -> Result<()> {
    std::fs::write(path, format_prompts(prompts)).map_err(|e| SfiError::io(path, e))
}

/// Toy-vocabulary text of `len` tokens: sentences of 4 to 12 words drawn
/// from one topic, each closed by a boundary token.
pub fn topic_prompt<R: Rng>(rng: &mut R, len: usize, vocab_size: usize) -> Vec<u32> {
    let words_per_topic = (vocab_size as u32).saturating_sub(toy_vocab::FIRST_WORD) / TOY_TOPICS;
    assert!(
        words_per_topic >= 1,
        "vocabulary too small for topic prompts"
    );
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let topic = rng.random_range(0..TOY_TOPICS);
        let words = rng.random_range(4..=12);
        for _ in 0..words {
            let m = rng.random_range(0..words_per_topic);
            out.push(toy_vocab::FIRST_WORD + topic + TOY_TOPICS * m);
        }
        let b = toy_vocab::BOUNDARY[rng.random_range(0..toy_vocab::BOUNDARY.len())];
        out.push(b);
    }
    out.truncate(len);
    out
}
