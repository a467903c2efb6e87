//! One-command experiment presets on the synthetic long-tailed corpus:
//! zero-shot scale-up (pseudo-label count and pretraining data size),
//! few-shot fine-tuning, and long-tail frequency bins. Trained models are
//! cached so presets sharing a run train it once.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{generate_synthetic_corpus, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{ClessConfig, ClessModel};
use crate::pipeline::{
    csv_field, evaluate, evaluate_zeror, init_model, run_finetune, run_pretrain, schedule_for_fraction,
    EmbeddingInit, Evaluation, PrepareConfig, Prepared, Split,
};
use crate::sampler::SamplerConfig;
use crate::trainer::{Mode, RunLog, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub synthetic: SyntheticSpec,
    pub prepare: PrepareConfig,
    /// `vocab_size` and `seed` are filled in per run.
    pub model: ClessConfig,
    pub embedding: EmbeddingInit,
    pub sampler: SamplerConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub seeds: Vec<u64>,
    pub pseudo_label_axis: Vec<usize>,
    pub data_fraction_axis: Vec<f64>,
    pub label_fraction_axis: Vec<f64>,
    /// Label fraction of the long-tail comparison.
    pub longtail_label_fraction: f64,
}

impl ExperimentConfig {
    /// Sizes that finish on a single laptop core in minutes per seed.
    pub fn desk() -> Self {
        ExperimentConfig {
            synthetic: SyntheticSpec {
                seed: 42,
                ..SyntheticSpec::default()
            },
            prepare: PrepareConfig::default(),
            model: ClessConfig {
                d: 32,
                filters_per_width: 32,
                matcher_hidden: vec![64],
                ..ClessConfig::base(0)
            },
            embedding: EmbeddingInit::Random,
            sampler: SamplerConfig::default(),
            pretrain: TrainConfig {
                max_epochs: 20,
                patience: 5,
                ..TrainConfig::new(Mode::Pretrain)
            },
            finetune: TrainConfig {
                max_epochs: 30,
                patience: 5,
                ..TrainConfig::new(Mode::Finetune)
            },
            seeds: vec![0, 1, 2],
            pseudo_label_axis: vec![150, 500],
            data_fraction_axis: vec![1.0, 0.25],
            label_fraction_axis: vec![1.0, 0.5, 0.1],
            longtail_label_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    ZeroShotScaleup,
    FewShot,
    Longtail,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero_shot_scaleup" => Ok(Preset::ZeroShotScaleup),
            "few_shot" => Ok(Preset::FewShot),
            "longtail" => Ok(Preset::Longtail),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected zero_shot_scaleup, few_shot or longtail)"
            ))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::ZeroShotScaleup => "zero_shot_scaleup",
            Preset::FewShot => "few_shot",
            Preset::Longtail => "longtail",
        })
    }
}

/// A trained model with its run log.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: ClessModel,
    pub log: RunLog,
}

impl Trained {
    pub fn best_dev_ap(&self) -> f64 {
        self.log.best_record().map_or(f64::NAN, |r| r.ap_micro_dev)
    }
}

/// One line of an experiment summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub preset: String,
    pub seed: Option<u64>,
    pub variant: String,
    pub best_dev_ap_micro: Option<f64>,
    pub test_ap_micro: f64,
    pub test_ap_macro: f64,
    pub bin_ap: Vec<Option<f64>>,
    pub bin_mean: Option<f64>,
}

pub fn rows_to_csv(rows: &[ResultRow]) -> String {
    let n_bins = rows.iter().map(|r| r.bin_ap.len()).max().unwrap_or(0);
    let mut out = String::from("preset,seed,variant,best_dev_ap_micro,test_ap_micro,test_ap_macro");
    for b in 0..n_bins {
        let _ = write!(out, ",bin{b}_ap_micro");
    }
    out.push_str(",bin_mean\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            r.preset,
            r.seed.map_or(String::new(), |s| s.to_string()),
            csv_field(&r.variant),
            opt(r.best_dev_ap_micro),
            r.test_ap_micro,
            r.test_ap_macro
        );
        for b in 0..n_bins {
            let _ = write!(out, ",{}", opt(r.bin_ap.get(b).copied().flatten()));
        }
        let _ = writeln!(out, ",{}", opt(r.bin_mean));
    }
    out
}

pub fn pretrain_variant(pseudo_labels: usize, data_fraction: f64) -> String {
    format!("pretrain_pl{pseudo_labels}_data{}", percent(data_fraction))
}

pub fn finetune_variant(pretrained: bool, label_fraction: f64) -> String {
    let init = if pretrained { "pretrained" } else { "scratch" };
    format!("finetune_{init}_labels{}", percent(label_fraction))
}

fn percent(f: f64) -> String {
    format!("{}", (f * 100.0).round() as u64)
}

type PretrainKey = (u64, usize, u64);
type FinetuneKey = (u64, bool, u64);

/// Prepared synthetic corpus plus every model trained so far.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub prepared: Prepared,
    pretrained: BTreeMap<PretrainKey, Trained>,
    finetuned: BTreeMap<FinetuneKey, Trained>,
}

fn key_fraction(f: f64) -> u64 {
    f.to_bits()
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let raw = generate_synthetic_corpus(&config.synthetic)?;
        let prepared = Prepared::from_raw(raw, config.prepare)?;
        Ok(Experiment {
            config,
            prepared,
            pretrained: BTreeMap::new(),
            finetuned: BTreeMap::new(),
        })
    }

    pub fn fresh_model(&self, seed: u64) -> Result<ClessModel> {
        let model = ClessConfig {
            seed,
            ..self.config.model.clone()
        };
        init_model(&self.prepared, model, &self.config.embedding)
    }

    pub fn zeror(&self) -> Result<Evaluation> {
        Ok(evaluate_zeror(&self.prepared, Split::Test)?.0)
    }

    /// Pretraining run on `data_fraction` of the training texts. Reduced
    /// runs wait proportionally more epochs and get extended patience.
    pub fn pretrained(&mut self, seed: u64, pseudo_labels: usize, data_fraction: f64) -> Result<&Trained> {
        let key = (seed, pseudo_labels, key_fraction(data_fraction));
        if !self.pretrained.contains_key(&key) {
            let cfg = TrainConfig {
                seed,
                ..schedule_for_fraction(&self.config.pretrain, data_fraction)
            };
            let sampler = SamplerConfig {
                pseudo_labels,
                ..self.config.sampler
            };
            log::info!("{} seed {seed}", pretrain_variant(pseudo_labels, data_fraction));
            let model = self.fresh_model(seed)?;
            let (model, log) = run_pretrain(&self.prepared, model, &sampler, &cfg, data_fraction, &mut |_, _| Ok(()))?;
            self.pretrained.insert(key, Trained { model, log });
        }
        Ok(&self.pretrained[&key])
    }

    /// Fine-tuning run on `label_fraction` of the labeled training texts,
    /// starting from the default pretraining run or from scratch.
    pub fn finetuned(&mut self, seed: u64, from_pretrained: bool, label_fraction: f64) -> Result<&Trained> {
        let key = (seed, from_pretrained, key_fraction(label_fraction));
        if !self.finetuned.contains_key(&key) {
            let start = if from_pretrained {
                let pl = self.config.sampler.pseudo_labels;
                self.pretrained(seed, pl, 1.0)?.model.clone()
            } else {
                self.fresh_model(seed)?
            };
            let cfg = TrainConfig {
                seed,
                ..self.config.finetune
            };
            log::info!("{} seed {seed}", finetune_variant(from_pretrained, label_fraction));
            let (model, log) =
                run_finetune(&self.prepared, start, &self.config.sampler, &cfg, label_fraction, &mut |_, _| Ok(()))?;
            self.finetuned.insert(key, Trained { model, log });
        }
        Ok(&self.finetuned[&key])
    }

    pub fn test_evaluation(&self, model: &ClessModel) -> Result<Evaluation> {
        Ok(evaluate(model, &self.prepared, Split::Test)?.0)
    }

    fn row(&self, preset: Preset, seed: Option<u64>, variant: String, trained: Option<&Trained>, e: &Evaluation) -> ResultRow {
        ResultRow {
            preset: preset.to_string(),
            seed,
            variant,
            best_dev_ap_micro: trained.map(Trained::best_dev_ap),
            test_ap_micro: e.ap.ap_micro,
            test_ap_macro: e.ap.ap_macro,
            bin_ap: e.bins.bin_ap.clone(),
            bin_mean: e.bins.mean,
        }
    }

    pub fn run_preset(&mut self, preset: Preset) -> Result<Vec<ResultRow>> {
        let zeror = self.zeror()?;
        let mut rows = vec![self.row(preset, None, "zeror".into(), None, &zeror)];
        for seed in self.config.seeds.clone() {
            match preset {
                Preset::ZeroShotScaleup => {
                    let default_pl = self.config.sampler.pseudo_labels;
                    let mut runs: Vec<(usize, f64)> =
                        self.config.pseudo_label_axis.iter().map(|&pl| (pl, 1.0)).collect();
                    for &f in &self.config.data_fraction_axis {
                        if !runs.contains(&(default_pl, f)) {
                            runs.push((default_pl, f));
                        }
                    }
                    for (pl, frac) in runs {
                        let trained = self.pretrained(seed, pl, frac)?.clone();
                        let e = self.test_evaluation(&trained.model)?;
                        rows.push(self.row(preset, Some(seed), pretrain_variant(pl, frac), Some(&trained), &e));
                    }
                }
                Preset::FewShot | Preset::Longtail => {
                    let fractions = if preset == Preset::FewShot {
                        self.config.label_fraction_axis.clone()
                    } else {
                        vec![self.config.longtail_label_fraction]
                    };
                    for frac in fractions {
                        for pretrained in [true, false] {
                            let trained = self.finetuned(seed, pretrained, frac)?.clone();
                            let e = self.test_evaluation(&trained.model)?;
                            rows.push(self.row(preset, Some(seed), finetune_variant(pretrained, frac), Some(&trained), &e));
                        }
                    }
                }
            }
        }
        Ok(rows)
    }
}

/// Median of a non-empty sample (mean of the middle pair for even sizes).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
