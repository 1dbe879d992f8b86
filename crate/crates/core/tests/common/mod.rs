#![allow(dead_code)]

pub mod oracle;

use amprune::io::ByteTokenizer;
use amprune::{ModelConfig, TokenId};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DETERMINERS: &[&str] = &["the", "a", "every", "some", "one", "that"];
const ADJECTIVES: &[&str] = &[
    "quick", "small", "old", "bright", "quiet", "heavy", "green", "tired", "clever", "cold",
];
const NOUNS: &[&str] = &[
    "fox", "dog", "river", "garden", "teacher", "engine", "window", "farmer", "letter", "city",
    "child", "bird",
];
const VERBS: &[&str] = &[
    "jumps over", "watches", "follows", "finds", "carries", "opens", "remembers", "paints",
    "visits", "hears",
];
const ADVERBS: &[&str] = &["slowly", "today", "again", "at night", "in the morning", "quietly"];

fn noun_phrase(rng: &mut ChaCha8Rng, out: &mut String) {
    out.push_str(DETERMINERS.choose(rng).unwrap());
    out.push(' ');
    if rng.random_bool(0.6) {
        out.push_str(ADJECTIVES.choose(rng).unwrap());
        out.push(' ');
    }
    out.push_str(NOUNS.choose(rng).unwrap());
}

/// One sentence from a small English-like grammar.
pub fn sentence(rng: &mut ChaCha8Rng) -> String {
    let mut s = String::new();
    noun_phrase(rng, &mut s);
    s.push(' ');
    s.push_str(VERBS.choose(rng).unwrap());
    s.push(' ');
    noun_phrase(rng, &mut s);
    if rng.random_bool(0.4) {
        s.push(' ');
        s.push_str(ADVERBS.choose(rng).unwrap());
    }
    s.push('.');
    let mut c = s.chars();
    let first = c.next().unwrap().to_ascii_uppercase();
    std::iter::once(first).chain(c).collect()
}

/// Deterministic text of roughly `n_bytes` bytes, one sentence per line.
pub fn synthetic_text(n_bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::with_capacity(n_bytes + 64);
    while text.len() < n_bytes {
        text.push_str(&sentence(&mut rng));
        text.push('\n');
    }
    text
}

pub fn synthetic_corpus(n_bytes: usize, seed: u64) -> Vec<TokenId> {
    ByteTokenizer.encode(synthetic_text(n_bytes, seed).as_bytes())
}

/// Calibration samples: a handful of sentences joined per line.
pub fn synthetic_calibration(n: usize, seed: u64) -> Vec<Vec<TokenId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let line: Vec<String> = (0..4).map(|_| sentence(&mut rng)).collect();
            ByteTokenizer.encode(line.join(" ").as_bytes())
        })
        .collect()
}

/// The desk-scale model used by the end-to-end checks.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        vocab_size: ByteTokenizer::VOCAB_SIZE,
        d_model: 128,
        n_layers: 4,
        n_heads: 4,
        d_head: 32,
        d_intermediate: 344,
        max_seq_len: 256,
        rms_norm_eps: 1e-5,
        rope_theta: 10000.0,
    }
}

pub fn small_config(n_heads: usize, d_head: usize, d_intermediate: usize, n_layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 23,
        d_model: n_heads * d_head,
        n_layers,
        n_heads,
        d_head,
        d_intermediate,
        max_seq_len: 32,
        rms_norm_eps: 1e-5,
        rope_theta: 10000.0,
    }
}

pub fn random_tokens(len: usize, vocab: usize, seed: u64) -> Vec<TokenId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..vocab as TokenId)).collect()
}
