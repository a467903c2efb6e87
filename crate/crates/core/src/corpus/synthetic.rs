//! Seeded generator for a small long-tailed multi-label corpus.
//!
//! Every class owns a handful of signature words; its name is built from
//! the first one or two of them (two-word names are hyphenated, like
//! "p-value"). A text mixes signature words of its labels with Zipfian
//! background words, so label names genuinely occur in the texts they
//! describe.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::RawInstance;
use crate::error::{Error, Result};

const SYLLABLES: [&str; 20] = [
    "ka", "lo", "mi", "ne", "ru", "sa", "te", "vo", "zi", "pa", "do", "fe", "gu", "ha", "ji", "bo",
    "ce", "wu", "xa", "yo",
];
const SIGNATURE_WORDS: usize = 5;
/// Probability of each label-count 1..=4.
const LABEL_COUNT_WEIGHTS: [f64; 4] = [0.3, 0.35, 0.2, 0.15];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_instances: usize,
    pub n_classes: usize,
    pub zipf_exponent: f64,
    /// Number of distinct background words.
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_instances: 5000,
            n_classes: 200,
            zipf_exponent: 1.2,
            vocab_size: 2000,
            seed: 0,
        }
    }
}

/// Pronounceable, injective word for an index (at least three syllables).
fn word(mut index: usize) -> String {
    let mut parts = Vec::new();
    loop {
        parts.push(SYLLABLES[index % SYLLABLES.len()]);
        index /= SYLLABLES.len();
        if index == 0 && parts.len() >= 3 {
            break;
        }
    }
    parts.concat()
}

struct Class {
    name_words: usize,
    signature: Vec<String>,
}

impl Class {
    fn name(&self) -> String {
        self.signature[..self.name_words].join("-")
    }
}

pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<Vec<RawInstance>> {
    if spec.n_classes < 10 {
        return Err(Error::Config(format!(
            "synthetic corpus needs at least 10 classes, got {}",
            spec.n_classes
        )));
    }
    if spec.vocab_size == 0 {
        return Err(Error::Config("synthetic vocab_size must be positive".into()));
    }
    if !(spec.zipf_exponent.is_finite() && spec.zipf_exponent >= 0.0) {
        return Err(Error::Config("zipf exponent must be finite and non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let classes: Vec<Class> = (0..spec.n_classes)
        .map(|k| {
            let base = spec.vocab_size + k * SIGNATURE_WORDS;
            Class {
                name_words: if rng.gen_bool(0.3) { 2 } else { 1 },
                signature: (base..base + SIGNATURE_WORDS).map(word).collect(),
            }
        })
        .collect();
    let background: Vec<String> = (0..spec.vocab_size).map(word).collect();

    let zipf = |n: usize, s: f64| -> WeightedIndex<f64> {
        WeightedIndex::new((1..=n).map(|r| (r as f64).powf(-s))).expect("positive weights")
    };
    let class_weights: Vec<f64> = (1..=spec.n_classes)
        .map(|r| (r as f64).powf(-spec.zipf_exponent))
        .collect();
    let background_dist = zipf(spec.vocab_size, 1.0);
    let label_count_dist = WeightedIndex::new(LABEL_COUNT_WEIGHTS).expect("valid weights");

    let mut out = Vec::with_capacity(spec.n_instances);
    for _ in 0..spec.n_instances {
        let n_labels = label_count_dist.sample(&mut rng) + 1;
        let chosen: Vec<usize> = rand::seq::index::sample_weighted(
            &mut rng,
            spec.n_classes,
            |i| class_weights[i],
            n_labels,
        )
        .expect("weights are positive")
        .into_iter()
        .collect();

        let mut tokens: Vec<&str> = Vec::new();
        for &k in &chosen {
            let class = &classes[k];
            for w in &class.signature[..class.name_words] {
                if rng.gen_bool(0.7) {
                    tokens.push(w);
                }
            }
            for _ in 0..2 {
                let i = rng.gen_range(class.name_words..SIGNATURE_WORDS);
                tokens.push(&class.signature[i]);
            }
        }
        if rng.gen_bool(0.1) {
            let other = &classes[rng.gen_range(0..spec.n_classes)];
            tokens.push(&other.signature[rng.gen_range(0..SIGNATURE_WORDS)]);
        }
        for _ in 0..rng.gen_range(10..=20) {
            tokens.push(&background[background_dist.sample(&mut rng)]);
        }
        tokens.shuffle(&mut rng);

        out.push(RawInstance {
            text: format!("{}?", tokens.join(" ")),
            labels: chosen.iter().map(|&k| classes[k].name()).collect(),
        });
    }
    Ok(out)
}
