//! End-to-end workflow shared by the command line and the experiment
//! presets: prepare a corpus, initialize, pretrain, fine-tune, evaluate.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{
    bin_classes, class_counts, encode, ingest_strict, split_80_10_10, subsample_labels, write_jsonl,
    ClassBinning, DatasetSplit, EncodedInstance, LabelVocab, RawInstance, Vocabulary,
};
use crate::embeddings::{load_vectors, random_init, skipgram_pretrain, EmbeddingMatrix, SkipGramConfig};
use crate::error::{Error, Result};
use crate::eval::{ap_report, longtail_report, score_model, truth_matrix, zeror_scores, APReport, BinReport, ScoreMatrix};
use crate::model::{ClessConfig, ClessModel};
use crate::sampler::SamplerConfig;
use crate::trainer::{finetune, pretrain, DevSet, OnImprove, RunLog, TrainConfig};

/// Multiplier applied to patience when training on a subset of the data.
pub const REDUCED_DATA_PATIENCE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrepareConfig {
    /// Tokens rarer than this map to the unknown token.
    pub min_count: usize,
    /// Texts are truncated to this many tokens.
    pub max_len: usize,
    /// Seed of the train/dev/test shuffle.
    pub split_seed: u64,
    pub n_bins: usize,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            min_count: 1,
            max_len: 100,
            split_seed: 0,
            n_bins: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// A corpus ready for training: vocabularies, encoded instances, the
/// split and the frequency bins of the training label counts.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: PrepareConfig,
    pub raw: Vec<RawInstance>,
    pub vocab: Vocabulary,
    pub labels: LabelVocab,
    pub encoded: Vec<EncodedInstance>,
    pub split: DatasetSplit,
    pub binning: ClassBinning,
}

impl Prepared {
    /// Builds everything from raw instances. Texts without a single token
    /// are dropped with a warning.
    pub fn from_raw(raw: Vec<RawInstance>, config: PrepareConfig) -> Result<Self> {
        let before = raw.len();
        let raw: Vec<RawInstance> = raw
            .into_iter()
            .filter(|r| !crate::corpus::tokenize(&r.text).is_empty())
            .collect();
        if raw.len() < before {
            log::warn!("dropped {} texts without tokens", before - raw.len());
        }
        let vocab = Vocabulary::build(&raw, config.min_count)?;
        let labels = LabelVocab::build(&raw, &vocab);
        let split = split_80_10_10(raw.len(), config.split_seed)?;
        Self::assemble(config, raw, vocab, labels, split)
    }

    fn assemble(
        config: PrepareConfig,
        raw: Vec<RawInstance>,
        vocab: Vocabulary,
        labels: LabelVocab,
        split: DatasetSplit,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("corpus has no labels".into()));
        }
        if config.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        let encoded = encode(&raw, &vocab, &labels, config.max_len);
        let train_counts = class_counts(split.train.iter().map(|&i| &encoded[i]), labels.len());
        let binning = bin_classes(&train_counts, config.n_bins)?;
        Ok(Prepared {
            config,
            raw,
            vocab,
            labels,
            encoded,
            split,
            binning,
        })
    }

    pub fn ids(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.split.train,
            Split::Dev => &self.split.dev,
            Split::Test => &self.split.test,
        }
    }

    pub fn instances(&self, split: Split) -> Vec<&EncodedInstance> {
        self.ids(split).iter().map(|&i| &self.encoded[i]).collect()
    }

    pub fn labeled(&self, split: Split) -> Vec<&EncodedInstance> {
        self.instances(split).into_iter().filter(|i| i.is_labeled()).collect()
    }

    /// Token ids of every training text, labeled or not.
    pub fn train_texts(&self) -> Vec<&[usize]> {
        self.instances(Split::Train)
            .into_iter()
            .map(|i| i.token_ids.as_slice())
            .collect()
    }

    pub fn train_class_counts(&self) -> Vec<usize> {
        class_counts(self.instances(Split::Train), self.labels.len())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_jsonl(&dir.join("corpus.jsonl"), &self.raw)?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        self.labels.save(&dir.join("labels.txt"))?;
        write_json(&dir.join("split.json"), &self.split)?;
        write_json(&dir.join("prepare.json"), &self.config)?;
        write_text(&dir.join("bins.csv"), &self.bins_csv())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: PrepareConfig = read_json(&dir.join("prepare.json"))?;
        let raw = ingest_strict(&dir.join("corpus.jsonl"))?;
        let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
        let labels = LabelVocab::load(&dir.join("labels.txt"), &vocab)?;
        let split: DatasetSplit = read_json(&dir.join("split.json"))?;
        let n = raw.len();
        if split.train.iter().chain(&split.dev).chain(&split.test).any(|&i| i >= n) {
            return Err(Error::Data(format!("split refers to instances beyond the {n} in the corpus")));
        }
        Self::assemble(config, raw, vocab, labels, split)
    }

    /// `class,name,train_count,bin` for every class.
    pub fn bins_csv(&self) -> String {
        let counts = self.train_class_counts();
        let mut out = String::from("class,name,train_count,bin\n");
        for (c, class) in self.labels.classes().iter().enumerate() {
            let _ = writeln!(out, "{c},{},{},{}", csv_field(&class.name), counts[c], self.binning.bin_of[c]);
        }
        out
    }
}

pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    write_text(path, &(text + "\n"))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// How the shared embedding table starts out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingInit {
    Random,
    /// Skip-gram on the training texts.
    SkipGram { window: usize, negatives: usize, epochs: usize },
    /// word2vec text file.
    File(PathBuf),
}

/// A freshly initialized model for the prepared corpus.
pub fn init_model(prepared: &Prepared, mut config: ClessConfig, init: &EmbeddingInit) -> Result<ClessModel> {
    config.vocab_size = prepared.vocab.len();
    let table: EmbeddingMatrix = match init {
        EmbeddingInit::Random => random_init(config.vocab_size, config.d, config.seed),
        EmbeddingInit::SkipGram {
            window,
            negatives,
            epochs,
        } => {
            let sentences: Vec<Vec<usize>> = prepared.train_texts().iter().map(|t| t.to_vec()).collect();
            let sg = SkipGramConfig {
                dim: config.d,
                window: *window,
                negatives: *negatives,
                epochs: *epochs,
                seed: config.seed,
                ..SkipGramConfig::default()
            };
            skipgram_pretrain(&sentences, config.vocab_size, &sg)?
        }
        EmbeddingInit::File(path) => {
            let (table, coverage) = load_vectors(path, &prepared.vocab, config.d, config.seed)?;
            log::info!(
                "{}: {} of {} vocabulary rows from file",
                path.display(),
                coverage.from_file,
                prepared.vocab.len()
            );
            table
        }
    };
    ClessModel::new(config, table, prepared.vocab.fingerprint())
}

/// Patience multiplier for a run on `fraction` of the data.
pub fn patience_multiplier_for(fraction: f64) -> usize {
    if fraction < 1.0 {
        REDUCED_DATA_PATIENCE
    } else {
        1
    }
}

/// Schedule for a run on `fraction` of the data: extended patience and
/// `1 / fraction` times the epochs, so the step budget stays comparable.
pub fn schedule_for_fraction(cfg: &TrainConfig, fraction: f64) -> TrainConfig {
    TrainConfig {
        patience_multiplier: patience_multiplier_for(fraction),
        max_epochs: (cfg.max_epochs as f64 / fraction).ceil() as usize,
        ..*cfg
    }
}

/// Pretrains on a seeded `data_fraction` of the training texts.
pub fn run_pretrain(
    prepared: &Prepared,
    model: ClessModel,
    sampler: &SamplerConfig,
    cfg: &TrainConfig,
    data_fraction: f64,
    on_improve: &mut OnImprove<'_>,
) -> Result<(ClessModel, RunLog)> {
    let train_ids = prepared.ids(Split::Train);
    let keep = subsample_labels(train_ids, data_fraction, cfg.seed ^ 0xDA7A)?.labeled;
    let texts: Vec<&[usize]> = keep.iter().map(|&i| prepared.encoded[i].token_ids.as_slice()).collect();
    log::info!("pretraining on {} of {} training texts", texts.len(), train_ids.len());
    let dev = prepared.labeled(Split::Dev);
    let dev = DevSet {
        instances: &dev,
        labels: &prepared.labels,
    };
    pretrain(model, &texts, dev, sampler, cfg, on_improve)
}

/// Fine-tunes on a seeded `label_fraction` of the labeled training texts.
pub fn run_finetune(
    prepared: &Prepared,
    model: ClessModel,
    sampler: &SamplerConfig,
    cfg: &TrainConfig,
    label_fraction: f64,
    on_improve: &mut OnImprove<'_>,
) -> Result<(ClessModel, RunLog)> {
    let labeled: Vec<usize> = prepared
        .ids(Split::Train)
        .iter()
        .copied()
        .filter(|&i| prepared.encoded[i].is_labeled())
        .collect();
    let keep = subsample_labels(&labeled, label_fraction, cfg.seed ^ 0x1ABE1)?.labeled;
    let train: Vec<&EncodedInstance> = keep.iter().map(|&i| &prepared.encoded[i]).collect();
    log::info!("fine-tuning on {} of {} labeled texts", train.len(), labeled.len());
    let dev = prepared.labeled(Split::Dev);
    let dev = DevSet {
        instances: &dev,
        labels: &prepared.labels,
    };
    finetune(model, &train, &prepared.labels, dev, sampler, cfg, on_improve)
}

/// Reports of one model (or the baseline) on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub ap: APReport,
    pub bins: BinReport,
    pub prevalence: f64,
}

fn evaluate_matrix(m: &ScoreMatrix, prepared: &Prepared) -> Result<Evaluation> {
    Ok(Evaluation {
        ap: ap_report(m)?,
        bins: longtail_report(m, &prepared.binning)?,
        prevalence: m.prevalence(),
    })
}

/// Scores the labeled instances of `split` against every class.
pub fn evaluate(model: &ClessModel, prepared: &Prepared, split: Split) -> Result<(Evaluation, ScoreMatrix)> {
    if model.vocab_hash() != prepared.vocab.fingerprint() {
        return Err(crate::error::CheckpointError::VocabHash {
            found: model.vocab_hash(),
            expected: prepared.vocab.fingerprint(),
        }
        .into());
    }
    let instances = prepared.labeled(split);
    let (m, _) = score_model(model, &instances, &prepared.labels)?;
    Ok((evaluate_matrix(&m, prepared)?, m))
}

/// The constant-prevalence baseline on the labeled instances of `split`.
pub fn evaluate_zeror(prepared: &Prepared, split: Split) -> Result<(Evaluation, ScoreMatrix)> {
    let n_train = prepared.labeled(Split::Train).len();
    let truth = truth_matrix(&prepared.labeled(split), prepared.labels.len());
    let m = zeror_scores(&prepared.train_class_counts(), n_train, &truth)?;
    Ok((evaluate_matrix(&m, prepared)?, m))
}
