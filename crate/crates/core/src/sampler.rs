//! Pair batches: a text together with candidate labels and a 0/1
//! indicator saying which candidates match. Pretraining draws pseudo
//! labels from the words of the batch; fine-tuning uses the real labels
//! plus undersampled negative classes.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedInstance, LabelVocab, PAD, UNK};
use crate::error::{Error, Result};

/// One text with its candidate labels, positives first for training
/// batches.
#[derive(Debug, Clone, PartialEq)]
pub struct PairInstance {
    pub token_ids: Vec<usize>,
    /// Word ids of every candidate label.
    pub label_words: Vec<Vec<usize>>,
    /// 1.0 for matching candidates, 0.0 otherwise.
    pub indicator: Vec<f64>,
}

impl PairInstance {
    pub fn len(&self) -> usize {
        self.label_words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.label_words.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.indicator.iter().filter(|&&y| y == 1.0).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairBatch {
    pub instances: Vec<PairInstance>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Total pseudo labels per text, split evenly into positives and
    /// negatives.
    pub pseudo_labels: usize,
    /// Negative classes per text during fine-tuning.
    pub negatives: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            pseudo_labels: 150,
            negatives: 50,
        }
    }
}

impl SamplerConfig {
    /// `(g, b)`: positive and negative pseudo labels per text.
    pub fn pseudo_split(&self) -> (usize, usize) {
        let g = self.pseudo_labels / 2;
        (g, self.pseudo_labels - g)
    }
}

fn eligible(id: usize) -> bool {
    id != PAD && id != UNK
}

/// Distinct eligible ids in order of first appearance.
fn distinct_tokens(ids: &[usize]) -> Vec<usize> {
    let mut seen = std::collections::HashSet::new();
    ids.iter()
        .copied()
        .filter(|&t| eligible(t) && seen.insert(t))
        .collect()
}

fn pick<R: Rng>(pool: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect()
}

/// Self-supervised batch: for each text, `g` of its own words as positive
/// pseudo labels and `b` words of the other texts in the batch as
/// negatives.
///
/// Positives are drawn without replacement from the distinct words of the
/// text; when it has fewer than `g`, every distinct word is used once and
/// the remainder is drawn with replacement. Negatives come from the union
/// of the other texts' words minus the text's own words; when that pool
/// is smaller than `b`, they are drawn from the whole vocabulary instead.
/// Texts without usable words are skipped.
pub fn sample_pseudo_batch<R: Rng>(
    texts: &[&[usize]],
    g: usize,
    b: usize,
    vocab_size: usize,
    rng: &mut R,
) -> Result<PairBatch> {
    if texts.len() < 2 {
        return Err(Error::Contract(format!(
            "pseudo-label batches need at least 2 texts, got {}",
            texts.len()
        )));
    }
    if g == 0 {
        return Err(Error::Config("need at least one positive pseudo label".into()));
    }
    let distinct: Vec<Vec<usize>> = texts.iter().map(|t| distinct_tokens(t)).collect();
    let mut union: Vec<usize> = distinct.iter().flatten().copied().collect();
    union.sort_unstable();
    union.dedup();

    let mut out = PairBatch::default();
    for (i, own) in distinct.iter().enumerate() {
        if own.is_empty() {
            log::warn!("skipping a text without usable pseudo labels");
            continue;
        }
        let mut positives = if own.len() >= g {
            pick(own, g, rng)
        } else {
            own.clone()
        };
        while positives.len() < g {
            positives.push(own[rng.gen_range(0..own.len())]);
        }

        let mut own_sorted = own.clone();
        own_sorted.sort_unstable();
        let foreign = |t: &usize| own_sorted.binary_search(t).is_err();
        let pool: Vec<usize> = union.iter().copied().filter(foreign).collect();
        let negatives = if pool.len() >= b {
            pick(&pool, b, rng)
        } else {
            let pool: Vec<usize> = (0..vocab_size)
                .filter(|&t| eligible(t) && foreign(&t))
                .collect();
            if pool.is_empty() && b > 0 {
                return Err(Error::Data(format!(
                    "no negative pseudo labels available for text {i}"
                )));
            }
            if pool.len() >= b {
                pick(&pool, b, rng)
            } else {
                (0..b).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
            }
        };

        let mut indicator = vec![1.0; g];
        indicator.resize(g + b, 0.0);
        out.instances.push(PairInstance {
            token_ids: texts[i].to_vec(),
            label_words: positives.into_iter().chain(negatives).map(|t| vec![t]).collect(),
            indicator,
        });
    }
    Ok(out)
}

/// Supervised batch: every real label of a text as a positive plus `b`
/// classes sampled uniformly from the rest. Unlabeled texts are left out.
pub fn build_supervised_batch<R: Rng>(
    instances: &[&EncodedInstance],
    labels: &LabelVocab,
    b: usize,
    rng: &mut R,
) -> PairBatch {
    let mut out = PairBatch::default();
    for inst in instances.iter().filter(|i| i.is_labeled()) {
        let pool: Vec<usize> = (0..labels.len())
            .filter(|c| inst.label_ids.binary_search(c).is_err())
            .collect();
        let negatives = pick(&pool, b.min(pool.len()), rng);
        let classes: Vec<usize> = inst.label_ids.iter().copied().chain(negatives).collect();
        let mut indicator = vec![1.0; inst.label_ids.len()];
        indicator.resize(classes.len(), 0.0);
        out.instances.push(PairInstance {
            token_ids: inst.token_ids.clone(),
            label_words: classes.iter().map(|&c| labels.class(c).word_ids.clone()).collect(),
            indicator,
        });
    }
    out
}

/// Pairs a text with every class, in class-id order.
pub fn build_full_eval_batch(inst: &EncodedInstance, labels: &LabelVocab) -> PairInstance {
    PairInstance {
        token_ids: inst.token_ids.clone(),
        label_words: labels.word_lists(),
        indicator: truth_row(inst, labels.len()),
    }
}

/// Ground-truth memberships of a text over all classes.
pub fn truth_row(inst: &EncodedInstance, n_classes: usize) -> Vec<f64> {
    let mut row = vec![0.0; n_classes];
    for &c in &inst.label_ids {
        row[c] = 1.0;
    }
    row
}
