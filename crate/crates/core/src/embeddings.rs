//! Initialization of the shared word/label embedding table: random,
//! loaded from a word2vec text file, or pretrained with skip-gram and
//! negative sampling on the task corpus.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::numeric::{axpy, dot, sigmoid, Tensor};

/// `V x d` table of word vectors. The padding row is always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    table: Tensor,
}

impl EmbeddingMatrix {
    pub fn new(table: Tensor) -> Result<Self> {
        if table.shape().len() != 2 || table.rows() == 0 {
            return Err(Error::shape(format!(
                "embedding table must be a non-empty matrix, got {:?}",
                table.shape()
            )));
        }
        table.validate()?;
        let mut m = EmbeddingMatrix { table };
        m.zero_pad_row();
        Ok(m)
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn row(&self, id: usize) -> &[f64] {
        self.table.row(id)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.table
    }

    pub fn into_tensor(self) -> Tensor {
        self.table
    }

    fn zero_pad_row(&mut self) {
        let d = self.dim();
        self.table.data_mut()[PAD * d..(PAD + 1) * d].fill(0.0);
    }

    /// Cosine similarity between two rows (0 when either is all-zero).
    pub fn cosine(&self, a: usize, b: usize) -> f64 {
        let (x, y) = (self.row(a), self.row(b));
        let norm = dot(x, x).sqrt() * dot(y, y).sqrt();
        if norm == 0.0 {
            0.0
        } else {
            dot(x, y) / norm
        }
    }

    /// Writes word2vec text format with 17 significant digits per value.
    pub fn save(&self, path: &Path, vocab: &Vocabulary) -> Result<()> {
        if vocab.len() != self.vocab_size() {
            return Err(Error::shape("vocabulary and embedding table sizes differ"));
        }
        let mut out = format!("{} {}\n", self.vocab_size(), self.dim());
        for id in 0..self.vocab_size() {
            out.push_str(vocab.token(id));
            for v in self.row(id) {
                let _ = write!(out, " {v:.16e}");
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn uniform_rows(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let bound = 0.5 / dim as f64;
    (0..rows * dim).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Entries drawn from `U(-0.5/d, 0.5/d)`; the padding row is zero.
pub fn random_init(vocab_size: usize, dim: usize, seed: u64) -> EmbeddingMatrix {
    assert!(vocab_size > 0 && dim > 0, "embedding table needs positive size");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = uniform_rows(vocab_size, dim, &mut rng);
    EmbeddingMatrix::new(Tensor::new(vec![vocab_size, dim], data).expect("sizes agree"))
        .expect("finite by construction")
}

/// How the rows of a loaded table were initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coverage {
    pub from_file: usize,
    pub random: usize,
    pub file_vectors: usize,
}

/// Reads word2vec text vectors for the tokens of `vocab`. Tokens missing
/// from the file keep their random initialization.
pub fn load_vectors(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<(EmbeddingMatrix, Coverage)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(1, "missing header".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (count, file_dim) = match fields.as_slice() {
        [v, d] => (
            v.parse::<usize>()
                .map_err(|_| parse_err(1, format!("bad vector count `{v}`")))?,
            d.parse::<usize>()
                .map_err(|_| parse_err(1, format!("bad dimension `{d}`")))?,
        ),
        _ => return Err(parse_err(1, "header must be `V d`".into())),
    };
    if file_dim != dim {
        return Err(Error::Config(format!(
            "vector file has dimension {file_dim}, configuration expects {dim}"
        )));
    }

    let mut table = random_init(vocab.len(), dim, seed).into_tensor();
    let mut seen = vec![false; vocab.len()];
    let mut read = 0;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(' ').filter(|s| !s.is_empty());
        let token = parts.next().expect("line is not blank");
        let values: Vec<f64> = parts
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(lineno, format!("bad value: {e}")))?;
        if values.len() != dim {
            return Err(parse_err(
                lineno,
                format!("expected {dim} values, found {}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(lineno, "non-finite value".into()));
        }
        read += 1;
        if read > count {
            return Err(parse_err(lineno, format!("more vectors than the declared {count}")));
        }
        if let Some(id) = vocab.get(token) {
            if id != PAD && !seen[id] {
                seen[id] = true;
                table.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(&values);
            }
        }
    }
    if read < count {
        return Err(parse_err(
            text.lines().count(),
            format!("file declares {count} vectors but holds {read}"),
        ));
    }
    let from_file = seen.iter().filter(|&&s| s).count();
    if from_file == 0 {
        log::warn!(
            "{}: no vocabulary token has a vector; using random initialization",
            path.display()
        );
    }
    let coverage = Coverage {
        from_file,
        random: vocab.len() - from_file,
        file_vectors: read,
    };
    Ok((EmbeddingMatrix::new(table)?, coverage))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkipGramConfig {
    pub dim: usize,
    /// Maximum distance between center and context word.
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        SkipGramConfig {
            dim: 128,
            window: 5,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
            seed: 0,
        }
    }
}

/// Word-level skip-gram with negative sampling over token-id sequences.
///
/// Input vectors start from [`random_init`] with the same seed, output
/// vectors from zero. Negatives follow the unigram distribution raised to
/// 0.75; the context window is shrunk uniformly per center word and the
/// learning rate decays linearly to `lr * 1e-4`.
pub fn skipgram_pretrain(
    sentences: &[Vec<usize>],
    vocab_size: usize,
    cfg: &SkipGramConfig,
) -> Result<EmbeddingMatrix> {
    if cfg.dim == 0 || cfg.window == 0 {
        return Err(Error::Config("skip-gram needs positive dim and window".into()));
    }
    let mut counts = vec![0u64; vocab_size];
    for s in sentences {
        for &id in s {
            if id >= vocab_size {
                return Err(Error::Index {
                    index: id,
                    len: vocab_size,
                });
            }
            counts[id] += 1;
        }
    }
    counts[PAD] = 0;
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Data("skip-gram corpus is empty".into()));
    }

    let dim = cfg.dim;
    let mut input = random_init(vocab_size, dim, cfg.seed).into_tensor().into_data();
    if cfg.epochs == 0 {
        return EmbeddingMatrix::new(Tensor::new(vec![vocab_size, dim], input)?);
    }
    let mut output = vec![0.0; vocab_size * dim];
    let noise = WeightedIndex::new(counts.iter().map(|&c| (c as f64).powf(0.75)))
        .expect("at least one positive count");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5347_4e53);

    let planned = (total * cfg.epochs as u64) as f64;
    let mut processed = 0u64;
    let mut hidden_grad = vec![0.0; dim];
    for _ in 0..cfg.epochs {
        for sentence in sentences {
            let words: Vec<usize> = sentence.iter().copied().filter(|&w| w != PAD).collect();
            for (pos, &center) in words.iter().enumerate() {
                processed += 1;
                let lr = cfg.lr * (1.0 - processed as f64 / planned).max(1e-4);
                let reach = rng.gen_range(1..=cfg.window);
                let lo = pos.saturating_sub(reach);
                let hi = (pos + reach).min(words.len() - 1);
                for ctx_pos in lo..=hi {
                    if ctx_pos == pos {
                        continue;
                    }
                    let context = words[ctx_pos];
                    hidden_grad.fill(0.0);
                    let center_vec = &input[center * dim..(center + 1) * dim];
                    for n in 0..=cfg.negatives {
                        let (target, label) = if n == 0 {
                            (context, 1.0)
                        } else {
                            let t = noise.sample(&mut rng);
                            if t == context {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let out_vec = &mut output[target * dim..(target + 1) * dim];
                        let g = lr * (label - sigmoid(dot(center_vec, out_vec)));
                        axpy(&mut hidden_grad, g, out_vec);
                        axpy(out_vec, g, center_vec);
                    }
                    axpy(&mut input[center * dim..(center + 1) * dim], 1.0, &hidden_grad);
                }
            }
        }
    }
    EmbeddingMatrix::new(Tensor::new(vec![vocab_size, dim], input)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::RawInstance;
    use rand::seq::SliceRandom;

    fn vocab(words: &str) -> Vocabulary {
        Vocabulary::build(
            &[RawInstance {
                text: words.into(),
                labels: vec![],
            }],
            1,
        )
        .unwrap()
    }

    #[test]
    fn random_init_bounds_and_pad() {
        let m = random_init(50, 8, 3);
        assert!(m.row(PAD).iter().all(|&v| v == 0.0));
        let bound = 0.5 / 8.0;
        assert!(m.tensor().data().iter().all(|v| v.abs() <= bound));
        assert_eq!(m, random_init(50, 8, 3));
        assert_ne!(m, random_init(50, 8, 4));
    }

    #[test]
    fn load_uses_file_rows_and_random_for_the_rest() {
        let dir = tempfile::tempdir().unwrap();
        let v = vocab("a b");
        let path = dir.path().join("vec.txt");
        fs::write(&path, "1 3\na 0.5 -1 2\n").unwrap();
        let (m, cov) = load_vectors(&path, &v, 3, 9).unwrap();
        assert_eq!(m.row(v.id("a")), &[0.5, -1.0, 2.0]);
        let b = m.row(v.id("b"));
        assert!(b.iter().all(|x| x.abs() <= 0.5 / 3.0));
        assert_eq!(b, random_init(v.len(), 3, 9).row(v.id("b")));
        assert_eq!(cov.from_file, 1);
        assert_eq!(cov.random, v.len() - 1);
    }

    #[test]
    fn load_without_overlap_is_fully_random() {
        let dir = tempfile::tempdir().unwrap();
        let v = vocab("a b");
        let path = dir.path().join("vec.txt");
        fs::write(&path, "1 2\nzzz 1 1\n").unwrap();
        let (m, cov) = load_vectors(&path, &v, 2, 1).unwrap();
        assert_eq!(cov.from_file, 0);
        assert_eq!(m, random_init(v.len(), 2, 1));
    }

    #[test]
    fn load_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let v = vocab("a b");
        let path = dir.path().join("vec.txt");
        fs::write(&path, "2 2\na 1 1\nb 1 oops\n").unwrap();
        assert!(matches!(
            load_vectors(&path, &v, 2, 0),
            Err(Error::Parse { line: 3, .. })
        ));
        fs::write(&path, "2 x\n").unwrap();
        assert!(matches!(
            load_vectors(&path, &v, 2, 0),
            Err(Error::Parse { line: 1, .. })
        ));
        fs::write(&path, "1 4\na 1 1 1 1\n").unwrap();
        assert!(matches!(load_vectors(&path, &v, 2, 0), Err(Error::Config(_))));
        fs::write(&path, "3 2\na 1 1\n").unwrap();
        assert!(matches!(load_vectors(&path, &v, 2, 0), Err(Error::Parse { .. })));
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let v = vocab("the quick brown fox");
        let m = random_init(v.len(), 5, 77);
        let path = dir.path().join("vec.txt");
        m.save(&path, &v).unwrap();
        let (back, cov) = load_vectors(&path, &v, 5, 0).unwrap();
        assert_eq!(back, m);
        assert_eq!(cov.file_vectors, v.len());
    }

    #[test]
    fn zero_epochs_equals_random_init() {
        let sentences = vec![vec![2, 3, 4, 2]];
        let cfg = SkipGramConfig {
            dim: 4,
            epochs: 0,
            seed: 12,
            ..SkipGramConfig::default()
        };
        assert_eq!(skipgram_pretrain(&sentences, 6, &cfg).unwrap(), random_init(6, 4, 12));
    }

    #[test]
    fn skipgram_is_deterministic_and_keeps_pad_zero() {
        let sentences = vec![vec![2, 3, 0, 4, 2, 5], vec![5, 4, 3]];
        let cfg = SkipGramConfig {
            dim: 6,
            epochs: 3,
            seed: 5,
            ..SkipGramConfig::default()
        };
        let a = skipgram_pretrain(&sentences, 6, &cfg).unwrap();
        let b = skipgram_pretrain(&sentences, 6, &cfg).unwrap();
        let bits = |m: &EmbeddingMatrix| m.tensor().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(a.row(PAD).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cooccurring_tokens_end_up_close() {
        // tokens 2 and 3 appear together in every sentence of topic A
        // (ids 2..20); topic B sentences use ids 20..40
        let vocab_size = 40;
        let mut wins = 0;
        let seeds = 10;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let sentences: Vec<Vec<usize>> = (0..400)
                .map(|i| {
                    let range = if i % 2 == 0 { 4..20 } else { 20..vocab_size };
                    let mut s: Vec<usize> = (0..8).map(|_| rng.gen_range(range.clone())).collect();
                    if i % 2 == 0 {
                        s.extend([2, 3]);
                        s.shuffle(&mut rng);
                    }
                    s
                })
                .collect();
            let cfg = SkipGramConfig {
                dim: 16,
                window: 3,
                negatives: 5,
                epochs: 5,
                lr: 0.05,
                seed,
            };
            let m = skipgram_pretrain(&sentences, vocab_size, &cfg).unwrap();
            let other = rng.gen_range(20..vocab_size);
            if m.cosine(2, 3) > m.cosine(2, other) {
                wins += 1;
            }
        }
        assert!(wins * 10 >= seeds * 9, "{wins}/{seeds}");
    }
}
