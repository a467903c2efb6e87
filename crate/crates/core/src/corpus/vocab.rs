use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::{normalize_label, tokenize, RawInstance};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token ↔ id mapping shared by text words and label words.
///
/// Ids 0 and 1 are reserved for padding and unknown tokens. Retained
/// tokens follow in order of descending corpus count, ties broken
/// lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Counts text tokens and label words over `instances` and keeps every
    /// token seen at least `min_count` times.
    pub fn build(instances: &[RawInstance], min_count: usize) -> Result<Self> {
        if min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        if instances.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for inst in instances {
            for tok in tokenize(&inst.text) {
                *counts.entry(tok).or_default() += 1;
            }
            for label in &inst.labels {
                for tok in tokenize(label) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut kept: Vec<(String, u64)> = Vec::new();
        let mut dropped = 0;
        for (tok, n) in counts {
            if n >= min_count as u64 {
                kept.push((tok, n));
            } else {
                dropped += n;
            }
        }
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut entries = vec![(PAD_TOKEN.to_string(), 0), (UNK_TOKEN.to_string(), dropped)];
        entries.extend(kept);
        Ok(Self::from_entries(entries))
    }

    fn from_entries(entries: Vec<(String, u64)>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (t, _))| (t.clone(), i))
            .collect();
        let (tokens, counts) = entries.into_iter().unzip();
        Vocabulary {
            tokens,
            counts,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or [`UNK`] when it is not in the vocabulary.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Tokenizes and maps `text` to ids.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Maps ids back to tokens, skipping padding.
    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter()
            .filter(|&&id| id != PAD)
            .map(|&id| self.token(id))
            .collect()
    }

    /// 64-bit FNV-1a over the tokens in id order, each terminated by `\n`.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv1a::new();
        for t in &self.tokens {
            h.write(t.as_bytes());
            h.write(b"\n");
        }
        h.finish()
    }

    /// Writes one `token<TAB>count` line per id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (t, c) in self.tokens.iter().zip(&self.counts) {
            let _ = writeln!(out, "{t}\t{c}");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let parse_err = |message: &str| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: message.to_string(),
            };
            let (tok, count) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected `token<TAB>count`"))?;
            let count = count.parse().map_err(|_| parse_err("count is not an integer"))?;
            entries.push((tok.to_string(), count));
        }
        if entries.len() < 2 || entries[PAD].0 != PAD_TOKEN || entries[UNK].0 != UNK_TOKEN {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: "vocabulary must start with <pad> and <unk>".into(),
            });
        }
        Ok(Self::from_entries(entries))
    }
}

/// 64-bit FNV-1a.
pub(crate) struct Fnv1a(u64);

impl Fnv1a {
    pub(crate) fn new() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

/// One class of the real label set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelClass {
    pub name: String,
    /// Ids of the label's words in the shared vocabulary; never empty.
    pub word_ids: Vec<usize>,
    pub count: u64,
}

/// The real label classes, ordered by name. A class id is its position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVocab {
    classes: Vec<LabelClass>,
    index: HashMap<String, usize>,
}

impl LabelVocab {
    pub fn build(instances: &[RawInstance], vocab: &Vocabulary) -> Self {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for inst in instances {
            for label in &inst.labels {
                *counts.entry(normalize_label(label)).or_default() += 1;
            }
        }
        let mut names: Vec<(String, u64)> = counts.into_iter().collect();
        names.sort();
        Self::from_names(names, vocab)
    }

    fn from_names(names: Vec<(String, u64)>, vocab: &Vocabulary) -> Self {
        let classes: Vec<LabelClass> = names
            .into_iter()
            .map(|(name, count)| {
                let mut word_ids = vocab.encode(&name);
                if word_ids.is_empty() {
                    word_ids.push(UNK);
                }
                LabelClass {
                    name,
                    word_ids,
                    count,
                }
            })
            .collect();
        let index = classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.name.clone(), i))
            .collect();
        LabelVocab { classes, index }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[LabelClass] {
        &self.classes
    }

    pub fn class(&self, id: usize) -> &LabelClass {
        &self.classes[id]
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(&normalize_label(label)).copied()
    }

    /// Word-id lists of every class in class-id order.
    pub fn word_lists(&self) -> Vec<Vec<usize>> {
        self.classes.iter().map(|c| c.word_ids.clone()).collect()
    }

    /// Writes one `name<TAB>count` line per class id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for c in &self.classes {
            let _ = writeln!(out, "{}\t{}", c.name, c.count);
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut names = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let parsed = line
                .rsplit_once('\t')
                .and_then(|(n, c)| c.parse::<u64>().ok().map(|c| (n.to_string(), c)));
            match parsed {
                Some(entry) => names.push(entry),
                None => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: i + 1,
                        message: "expected `name<TAB>count`".into(),
                    })
                }
            }
        }
        Ok(Self::from_names(names, vocab))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(text: &str, labels: &[&str]) -> RawInstance {
        RawInstance {
            text: text.into(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn min_count_threshold() {
        let v = Vocabulary::build(&[raw("a a b", &[])], 2).unwrap();
        assert!(v.get("a").is_some());
        assert_eq!(v.get("b"), None);
        assert_eq!(v.id("b"), UNK);
        assert_eq!(v.count(UNK), 1);
    }

    #[test]
    fn label_words_share_the_table() {
        let v = Vocabulary::build(&[raw("what is a p value", &["p-value"])], 1).unwrap();
        let labels = LabelVocab::build(&[raw("what is a p value", &["p-value"])], &v);
        assert_eq!(labels.len(), 1);
        assert_eq!(labels.class(0).word_ids, vec![v.id("p"), v.id("value")]);
        assert_eq!(v.count(v.id("value")), 2);
    }

    #[test]
    fn deterministic_build() {
        let corpus = vec![raw("x y z y", &["z"]), raw("y q", &["r"])];
        let a = Vocabulary::build(&corpus, 1).unwrap();
        let b = Vocabulary::build(&corpus, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.token(2), "y");
    }

    #[test]
    fn empty_corpus_and_zero_min_count_rejected() {
        assert!(Vocabulary::build(&[], 1).is_err());
        assert!(Vocabulary::build(&[raw("a", &[])], 0).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = vec![raw("Alpha beta, beta?", &["Gamma ray"])];
        let v = Vocabulary::build(&corpus, 1).unwrap();
        v.save(&dir.path().join("vocab.txt")).unwrap();
        let back = Vocabulary::load(&dir.path().join("vocab.txt")).unwrap();
        assert_eq!(v, back);

        let l = LabelVocab::build(&corpus, &v);
        l.save(&dir.path().join("labels.txt")).unwrap();
        assert_eq!(LabelVocab::load(&dir.path().join("labels.txt"), &v).unwrap(), l);
    }

    #[test]
    fn fingerprint_distinguishes_vocabularies() {
        let a = Vocabulary::build(&[raw("a b", &[])], 1).unwrap();
        let b = Vocabulary::build(&[raw("a c", &[])], 1).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn oov_label_words_map_to_unk() {
        let v = Vocabulary::build(&[raw("a a", &[])], 2).unwrap();
        let l = LabelVocab::build(&[raw("a a", &["unseen-term"])], &v);
        assert_eq!(l.class(0).word_ids, vec![UNK, UNK]);
    }
}
