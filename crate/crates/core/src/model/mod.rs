//! The matching network.
//!
//! A text is embedded with the shared word table, passed through one
//! valid convolution per kernel width, reduced by k-max pooling, and
//! projected to the embedding width. A label is the mean of its word
//! vectors, so label and text embeddings have the same width and labels
//! never seen in training can still be embedded. The matcher scores the
//! concatenation `[text ⊕ label]` with an affine stack and a sigmoid.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};

use crate::corpus::PAD;
use crate::embeddings::{random_init, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::numeric::{Params, Tape, Tensor, Var};
use crate::sampler::{PairBatch, PairInstance};

pub const EMBEDDING: &str = "embedding";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClessConfig {
    /// Word (and text/label) embedding width.
    pub d: usize,
    pub conv_widths: Vec<usize>,
    pub filters_per_width: usize,
    pub pool_k: usize,
    pub matcher_hidden: Vec<usize>,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ClessConfig {
    pub fn base(vocab_size: usize) -> Self {
        ClessConfig {
            d: 128,
            conv_widths: vec![1, 2, 3],
            filters_per_width: 128,
            pool_k: 3,
            matcher_hidden: vec![256],
            vocab_size,
            seed: 0,
        }
    }

    /// Larger variant of [`ClessConfig::base`] with 1.5 times the filters
    /// per kernel width.
    pub fn xl(vocab_size: usize) -> Self {
        ClessConfig {
            filters_per_width: 192,
            ..Self::base(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.d > 0
            && self.filters_per_width > 0
            && self.pool_k > 0
            && self.vocab_size > 2
            && !self.conv_widths.is_empty()
            && self.conv_widths.iter().all(|&w| w > 0)
            && self.matcher_hidden.iter().all(|&h| h > 0);
        if positive {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid model configuration {self:?}")))
        }
    }

    /// Texts are padded to this length so that the widest convolution
    /// still yields `pool_k` rows.
    pub fn min_text_len(&self) -> usize {
        self.conv_widths.iter().max().copied().unwrap_or(1) + self.pool_k - 1
    }

    /// Width of the pooled feature vector before projection.
    pub fn pooled_width(&self) -> usize {
        self.conv_widths.len() * self.pool_k * self.filters_per_width
    }
}

/// Handles to the parameters of one model recorded on a tape, in
/// parameter order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    n_convs: usize,
}

impl Bound {
    fn embedding(&self) -> Var {
        self.vars[0]
    }

    fn conv(&self, i: usize) -> (Var, Var) {
        (self.vars[1 + 2 * i], self.vars[2 + 2 * i])
    }

    fn projection(&self) -> (Var, Var) {
        let at = 1 + 2 * self.n_convs;
        (self.vars[at], self.vars[at + 1])
    }

    fn matcher_layers(&self) -> impl Iterator<Item = (Var, Var)> + '_ {
        self.vars[3 + 2 * self.n_convs..]
            .chunks(2)
            .map(|p| (p[0], p[1]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClessModel {
    config: ClessConfig,
    params: Params,
    vocab_hash: u64,
}

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(vec![rows, cols], data).expect("sizes agree").with_grad()
}

fn zeros(n: usize) -> Tensor {
    Tensor::zeros(vec![n]).with_grad()
}

impl ClessModel {
    /// Fresh network around an initialized embedding table. Weights are
    /// drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases start at 0.
    pub fn new(config: ClessConfig, embedding: EmbeddingMatrix, vocab_hash: u64) -> Result<Self> {
        config.validate()?;
        if embedding.vocab_size() != config.vocab_size || embedding.dim() != config.d {
            return Err(Error::shape(format!(
                "embedding table is {}x{}, configuration needs {}x{}",
                embedding.vocab_size(),
                embedding.dim(),
                config.vocab_size,
                config.d
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x4d4f_4445_4c00);
        let (d, f) = (config.d, config.filters_per_width);
        let mut params = Params::new();
        params.insert(EMBEDDING, embedding.into_tensor().with_grad());
        for &w in &config.conv_widths {
            let fan_in = (w * d) as f64;
            let kernels = uniform(f, w * d, fan_in.sqrt().recip(), &mut rng)
                .reshape(vec![f, w, d])?
                .with_grad();
            params.insert(format!("conv{w}.kernels"), kernels);
            params.insert(format!("conv{w}.bias"), zeros(f));
        }
        let pooled = config.pooled_width();
        params.insert(
            "text_proj.weight",
            uniform(pooled, d, (pooled as f64).sqrt().recip(), &mut rng),
        );
        params.insert("text_proj.bias", zeros(d));
        let mut fan_in = 2 * d;
        for (i, &h) in config.matcher_hidden.iter().chain(&[1]).enumerate() {
            params.insert(
                format!("matcher.{i}.weight"),
                uniform(fan_in, h, (fan_in as f64).sqrt().recip(), &mut rng),
            );
            params.insert(format!("matcher.{i}.bias"), zeros(h));
            fan_in = h;
        }
        Ok(ClessModel {
            config,
            params,
            vocab_hash,
        })
    }

    /// Network with a randomly initialized embedding table.
    pub fn random(config: ClessConfig, vocab_hash: u64) -> Result<Self> {
        config.validate()?;
        let table = random_init(config.vocab_size, config.d, config.seed);
        Self::new(config, table, vocab_hash)
    }

    /// Reassembles a model from stored parameters, checking names and
    /// shapes against the configuration.
    pub fn from_params(config: ClessConfig, params: Params, vocab_hash: u64) -> Result<Self> {
        let template = Self::random(config.clone(), vocab_hash)?;
        let expected: Vec<(&str, &[usize])> = template.params.iter().map(|(n, t)| (n, t.shape())).collect();
        let found: Vec<(&str, &[usize])> = params.iter().map(|(n, t)| (n, t.shape())).collect();
        if expected != found {
            return Err(Error::shape(format!(
                "parameters do not match the configuration: expected {expected:?}, found {found:?}"
            )));
        }
        let mut params = params;
        for (_, t) in params.iter_mut() {
            t.validate()?;
            t.set_requires_grad(true);
        }
        Ok(ClessModel {
            config,
            params,
            vocab_hash,
        })
    }

    pub fn config(&self) -> &ClessConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn vocab_hash(&self) -> u64 {
        self.vocab_hash
    }

    pub fn embedding(&self) -> &Tensor {
        self.params.get(EMBEDDING).expect("always present")
    }

    /// Scalar parameters of the matcher only.
    pub fn matcher_params(&self) -> Vec<(&str, &Tensor)> {
        self.params.iter().filter(|(n, _)| n.starts_with("matcher.")).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Records every parameter on the tape. With `trainable` false the
    /// parameters are constants and no gradients are kept.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound {
            vars,
            n_convs: self.config.conv_widths.len(),
        }
    }

    /// Text embedding `[d]`.
    pub fn encode_text(&self, tape: &mut Tape, bound: &Bound, token_ids: &[usize]) -> Result<Var> {
        if token_ids.iter().all(|&t| t == PAD) {
            return Err(Error::Data("text has no non-padding tokens".into()));
        }
        let mut ids = token_ids.to_vec();
        ids.resize(ids.len().max(self.config.min_text_len()), PAD);
        let words = tape.embedding_gather(bound.embedding(), &ids)?;
        let mut pooled = Vec::with_capacity(bound.n_convs);
        for i in 0..bound.n_convs {
            let (kernels, bias) = bound.conv(i);
            let conv = tape.conv1d_valid(words, kernels, bias)?;
            pooled.push(tape.max_k_pool(conv, self.config.pool_k)?);
        }
        let features = tape.concat(&pooled);
        let features = tape.relu(features);
        let (w, b) = bound.projection();
        tape.affine(features, w, b)
    }

    /// Label embeddings `[c, d]`: the mean word vector of each label.
    pub fn encode_labels(&self, tape: &mut Tape, bound: &Bound, word_lists: &[Vec<usize>]) -> Result<Var> {
        if word_lists.is_empty() {
            return Err(Error::Data("no labels to encode".into()));
        }
        if word_lists.iter().any(Vec::is_empty) {
            return Err(Error::Data("label with an empty word list".into()));
        }
        let ids: Vec<usize> = word_lists.iter().flatten().copied().collect();
        let lengths: Vec<usize> = word_lists.iter().map(Vec::len).collect();
        let words = tape.embedding_gather(bound.embedding(), &ids)?;
        tape.segment_mean(words, &lengths)
    }

    /// Match probabilities `[c]` of one text embedding against `c` label
    /// embeddings.
    pub fn match_labels(&self, tape: &mut Tape, bound: &Bound, text: Var, labels: Var) -> Result<Var> {
        let d = self.config.d;
        if tape.value(text).shape() != [d] {
            return Err(Error::shape(format!(
                "text embedding has shape {:?}, expected [{d}]",
                tape.value(text).shape()
            )));
        }
        let label_shape = tape.value(labels).shape();
        if label_shape.len() != 2 || label_shape[1] != d {
            return Err(Error::shape(format!(
                "label embeddings have shape {label_shape:?}, expected [c, {d}]"
            )));
        }
        let c = label_shape[0];
        let mut layers = bound.matcher_layers();
        let (w0, b0) = layers.next().expect("matcher has an output layer");
        let mut h = tape.pair_affine(text, labels, w0, b0)?;
        for (w, b) in layers {
            h = tape.relu(h);
            h = tape.affine(h, w, b)?;
        }
        let p = tape.sigmoid(h);
        tape.reshape(p, vec![c])
    }

    /// Binary cross entropy of one instance.
    pub fn instance_loss(&self, tape: &mut Tape, bound: &Bound, inst: &PairInstance) -> Result<Var> {
        let text = self.encode_text(tape, bound, &inst.token_ids)?;
        let labels = self.encode_labels(tape, bound, &inst.label_words)?;
        let probs = self.match_labels(tape, bound, text, labels)?;
        tape.bce_mean(probs, &inst.indicator)
    }

    /// Mean over instances of each instance's mean binary cross entropy.
    pub fn forward_loss(&self, tape: &mut Tape, bound: &Bound, batch: &PairBatch) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Data("empty pair batch".into()));
        }
        let parts = batch
            .instances
            .iter()
            .map(|inst| self.instance_loss(tape, bound, inst))
            .collect::<Result<Vec<_>>>()?;
        tape.mean_of(&parts)
    }

    /// Loss of a batch without recording gradients.
    pub fn batch_loss(&self, batch: &PairBatch) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let loss = self.forward_loss(&mut tape, &bound, batch)?;
        Ok(tape.value(loss).item())
    }

    /// Computes the batch loss and stores its gradient in every parameter.
    /// The padding row of the embedding table receives no gradient.
    pub fn loss_and_grads(&mut self, batch: &PairBatch) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, true);
        let loss = self.forward_loss(&mut tape, &bound, batch)?;
        tape.backward(loss)?;
        let d = self.config.d;
        for ((name, param), &var) in self.params.iter_mut().zip(&bound.vars) {
            let mut grad = tape.take_grad(var).unwrap_or_else(|| vec![0.0; param.len()]);
            if name == EMBEDDING {
                grad[PAD * d..(PAD + 1) * d].fill(0.0);
            }
            param.set_grad(grad)?;
        }
        Ok(tape.value(loss).item())
    }

    /// Match probabilities of one text against the given labels.
    pub fn predict(&self, token_ids: &[usize], word_lists: &[Vec<usize>]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let text = self.encode_text(&mut tape, &bound, token_ids)?;
        let labels = self.encode_labels(&mut tape, &bound, word_lists)?;
        let p = self.match_labels(&mut tape, &bound, text, labels)?;
        Ok(tape.value(p).data().to_vec())
    }

    /// Scores many texts against one fixed label set. Label embeddings
    /// are computed once and shared by every text.
    pub fn score_texts<'a>(
        &self,
        texts: impl IntoIterator<Item = &'a [usize]>,
        word_lists: &[Vec<usize>],
    ) -> Result<(Vec<Vec<f64>>, ScoreStats)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let labels = self.encode_labels(&mut tape, &bound, word_lists)?;
        let mut stats = ScoreStats {
            label_encodings: word_lists.len(),
            texts: 0,
        };
        let mark = tape.len();
        let mut rows = Vec::new();
        for ids in texts {
            let text = self.encode_text(&mut tape, &bound, ids)?;
            let p = self.match_labels(&mut tape, &bound, text, labels)?;
            rows.push(tape.value(p).data().to_vec());
            tape.truncate(mark);
            stats.texts += 1;
        }
        Ok((rows, stats))
    }
}

/// Work done by [`ClessModel::score_texts`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ScoreStats {
    /// Label rows passed through the label encoder.
    pub label_encodings: usize,
    pub texts: usize,
}
