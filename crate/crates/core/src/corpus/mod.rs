//! Raw multi-label text data: ingestion, vocabularies, encoding, splits,
//! few-shot subsampling, frequency binning and a synthetic long-tailed
//! corpus generator.

mod binning;
mod split;
mod synthetic;
mod vocab;

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use binning::{bin_classes, ClassBinning};
pub use split::{split_80_10_10, subsample_labels, DatasetSplit, LabelSubsample};
pub use synthetic::{generate_synthetic_corpus, SyntheticSpec};
pub(crate) use vocab::Fnv1a;
pub use vocab::{LabelClass, LabelVocab, Vocabulary, PAD, PAD_TOKEN, UNK, UNK_TOKEN};

use crate::error::{Error, Result};

/// One text with its (possibly multi-word) label strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawInstance {
    pub text: String,
    #[serde(default)]
    pub labels: Vec<String>,
}

impl RawInstance {
    /// Records without labels only feed self-supervised pretraining.
    pub fn is_unlabeled(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Lowercases and splits on whitespace and punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Canonical class key for a label string.
pub fn normalize_label(label: &str) -> String {
    label
        .trim()
        .to_lowercase()
        .replace(|c: char| c == '\t' || c == '\n' || c == '\r', " ")
}

/// A line of an input file that could not be turned into an instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedLine {
    pub line: usize,
    pub message: String,
}

/// Result of reading a JSONL corpus.
#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub instances: Vec<RawInstance>,
    pub rejected: Vec<RejectedLine>,
}

impl Ingested {
    pub fn unlabeled_count(&self) -> usize {
        self.instances.iter().filter(|i| i.is_unlabeled()).count()
    }
}

/// Reads one `{"text": ..., "labels": [...]}` object per line, keeping
/// input order. Blank lines are skipped; malformed lines are collected in
/// [`Ingested::rejected`].
pub fn ingest(path: &Path) -> Result<Ingested> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Ingested::default();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line) {
            Ok(inst) => out.instances.push(inst),
            Err(message) => out.rejected.push(RejectedLine {
                line: i + 1,
                message,
            }),
        }
    }
    Ok(out)
}

/// Like [`ingest`], but fails on the first malformed line.
pub fn ingest_strict(path: &Path) -> Result<Vec<RawInstance>> {
    let ingested = ingest(path)?;
    if let Some(bad) = ingested.rejected.first() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: bad.line,
            message: bad.message.clone(),
        });
    }
    Ok(ingested.instances)
}

fn parse_line(line: &str) -> std::result::Result<RawInstance, String> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let obj = value.as_object().ok_or("expected a JSON object")?;
    let text = obj
        .get("text")
        .ok_or("missing field \"text\"")?
        .as_str()
        .ok_or("field \"text\" must be a string")?;
    if text.trim().is_empty() {
        return Err("field \"text\" is empty".into());
    }
    let labels = match obj.get("labels") {
        None | Some(serde_json::Value::Null) => Vec::new(),
        Some(serde_json::Value::Array(items)) => items
            .iter()
            .map(|v| v.as_str().map(str::to_string))
            .collect::<Option<Vec<_>>>()
            .ok_or("labels must be strings")?,
        Some(_) => return Err("field \"labels\" must be an array".into()),
    };
    Ok(RawInstance {
        text: text.to_string(),
        labels,
    })
}

pub fn write_jsonl(path: &Path, instances: &[RawInstance]) -> Result<()> {
    let mut buf = Vec::new();
    for inst in instances {
        serde_json::to_writer(&mut buf, inst).expect("serializing strings cannot fail");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// A text mapped to vocabulary ids together with its real labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedInstance {
    pub instance_id: usize,
    /// Text token ids, truncated to the configured maximum length.
    pub token_ids: Vec<usize>,
    /// Class ids into the [`LabelVocab`], sorted and deduplicated.
    pub label_ids: Vec<usize>,
    /// Word ids of each label in `label_ids`.
    pub label_word_ids: Vec<Vec<usize>>,
}

impl EncodedInstance {
    pub fn is_labeled(&self) -> bool {
        !self.label_ids.is_empty()
    }
}

pub fn encode(
    instances: &[RawInstance],
    vocab: &Vocabulary,
    labels: &LabelVocab,
    max_len: usize,
) -> Vec<EncodedInstance> {
    instances
        .iter()
        .enumerate()
        .map(|(instance_id, raw)| {
            let mut token_ids = vocab.encode(&raw.text);
            token_ids.truncate(max_len);
            let mut label_ids: Vec<usize> =
                raw.labels.iter().filter_map(|l| labels.id(l)).collect();
            label_ids.sort_unstable();
            label_ids.dedup();
            let label_word_ids = label_ids
                .iter()
                .map(|&c| labels.class(c).word_ids.clone())
                .collect();
            EncodedInstance {
                instance_id,
                token_ids,
                label_ids,
                label_word_ids,
            }
        })
        .collect()
}

/// Positive-occurrence count per class over the given instances.
pub fn class_counts<'a>(
    instances: impl IntoIterator<Item = &'a EncodedInstance>,
    n_classes: usize,
) -> Vec<usize> {
    let mut counts = vec![0; n_classes];
    for inst in instances {
        for &c in &inst.label_ids {
            counts[c] += 1;
        }
    }
    counts
}
