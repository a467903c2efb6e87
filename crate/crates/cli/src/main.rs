//! `cless`: prepare data, pretrain, fine-tune, evaluate and report.
//!
//! Exit codes: 0 success, 2 input error, 3 training failure, 4 artifact
//! mismatch.

mod report;
mod settings;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use cless_core::corpus::{generate_synthetic_corpus, ingest, SyntheticSpec};
use cless_core::experiment::{median, rows_to_csv, Experiment, ExperimentConfig, Preset, ResultRow};
use cless_core::model::{load_checkpoint, save_checkpoint, CheckpointMeta, ClessConfig, ClessModel};
use cless_core::numeric::AdamConfig;
use cless_core::pipeline::{
    csv_field, evaluate, evaluate_zeror, init_model, run_finetune, run_pretrain, schedule_for_fraction, write_json,
    write_text, EmbeddingInit, Evaluation, PrepareConfig, Prepared, Split,
};
use cless_core::sampler::SamplerConfig;
use cless_core::trainer::{Mode, RunLog, TrainConfig};
use report::NamedLog;
use settings::{parse_pair, Settings, SEED_ENV};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Mismatch(String),
}

#[derive(Parser, Debug)]
#[command(name = "cless", version, about = "Contrastive text-to-label matching: pretrain, fine-tune, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed (falls back to the config, then to CLESS_SEED).
    #[arg(long)]
    seed: Option<u64>,
    /// `key=value` overrides (for `report`, also run-log paths).
    args: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ingest a JSONL corpus (or generate the synthetic one) and write vocabularies, split and bins.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Generate the synthetic long-tailed corpus (keys n, classes, zipf, words).
        #[arg(long)]
        synthetic: bool,
        /// JSONL corpus, one {"text", "labels"} object per line.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Self-supervised pretraining on pseudo labels drawn from the texts.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Prepared data directory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Pseudo labels per text (half positive, half negative).
        #[arg(long)]
        pseudo_labels: Option<usize>,
        /// Fraction of training texts; below 1 patience is multiplied by 5.
        #[arg(long)]
        data_fraction: Option<f64>,
    },
    /// Supervised fine-tuning on real labels, from a checkpoint or from scratch.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to start from; omitted trains from scratch.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Fraction of labeled training texts.
        #[arg(long)]
        label_fraction: Option<f64>,
    },
    /// Score a checkpoint (or the constant baseline) on a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate the constant training-prevalence baseline.
        #[arg(long)]
        zeror: bool,
        /// Require a pretrain-only checkpoint (zero-shot evaluation).
        #[arg(long)]
        zero_shot: bool,
    },
    /// Learning-curve chart and summary over run logs.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Run a preset (zero_shot_scaleup, few_shot, longtail) on the synthetic corpus.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preset: Option<String>,
    },
}

const PREPARE_KEYS: &[(&str, &str)] = &[
    ("out", "runs/prepare"),
    ("seed", "0"),
    ("input", ""),
    ("synthetic", "false"),
    ("n", "5000"),
    ("classes", "200"),
    ("zipf", "1.2"),
    ("words", "2000"),
    ("min_count", "1"),
    ("max_len", "100"),
    ("split_seed", "0"),
    ("n_bins", "5"),
];

const MODEL_KEYS: &[(&str, &str)] = &[
    ("size", "base"),
    ("d", "128"),
    ("conv_widths", "1,2,3"),
    ("filters", ""),
    ("pool_k", "3"),
    ("hidden", "256"),
    ("embedding", "random"),
    ("vectors", ""),
    ("sg_window", "5"),
    ("sg_negatives", "5"),
    ("sg_epochs", "5"),
];

const TRAIN_KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("data", ""),
    ("batch_size", "32"),
    ("max_epochs", "20"),
    ("patience", "3"),
    ("lr", "0.001"),
    ("eval_every", "0"),
    ("negatives", "50"),
];

const EVAL_KEYS: &[(&str, &str)] = &[
    ("out", "runs/eval"),
    ("data", ""),
    ("checkpoint", ""),
    ("split", "test"),
    ("zeror", "false"),
    ("zero_shot", "false"),
];

const REPORT_KEYS: &[(&str, &str)] = &[("out", "runs/report")];

const EXPERIMENT_KEYS: &[(&str, &str)] = &[
    ("out", "runs/experiment"),
    ("preset", "zero_shot_scaleup"),
    ("seeds", "0,1,2"),
    ("data_seed", "42"),
    ("n", "5000"),
    ("classes", "200"),
    ("zipf", "1.2"),
    ("words", "2000"),
    ("d", "32"),
    ("conv_widths", "1,2,3"),
    ("filters", "32"),
    ("pool_k", "3"),
    ("hidden", "64"),
    ("batch_size", "32"),
    ("pretrain_epochs", "20"),
    ("finetune_epochs", "30"),
    ("patience", "5"),
    ("lr", "0.001"),
    ("pseudo_labels", "150"),
    ("negatives", "50"),
    ("pseudo_label_axis", "150,500"),
    ("data_fraction_axis", "1.0,0.25"),
    ("label_fraction_axis", "1.0,0.5,0.1"),
    ("longtail_label_fraction", "1.0"),
];

fn keys(parts: &[&[(&'static str, &'static str)]]) -> Vec<(&'static str, &'static str)> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

/// Splits positional arguments into overrides and plain paths, then
/// appends flag values so they take precedence.
fn overrides(common: &Common, flags: Vec<(&str, Option<String>)>) -> Result<(Vec<(String, String)>, Vec<PathBuf>)> {
    let mut pairs = Vec::new();
    let mut paths = Vec::new();
    for a in &common.args {
        if a.contains('=') {
            pairs.push(parse_pair(a).map_err(CliError::Input)?);
        } else {
            paths.push(PathBuf::from(a));
        }
    }
    if let Some(out) = &common.out {
        pairs.push(("out".into(), out.display().to_string()));
    }
    if let Some(seed) = common.seed {
        pairs.push(("seed".into(), seed.to_string()));
    }
    for (k, v) in flags {
        if let Some(v) = v {
            pairs.push((k.to_string(), v));
        }
    }
    Ok((pairs, paths))
}

/// Resolves settings, creates the output directory and echoes the
/// effective configuration into it.
fn setup(
    command: &str,
    defaults: &[(&str, &str)],
    common: &Common,
    flags: Vec<(&str, Option<String>)>,
) -> Result<(Settings, PathBuf, Vec<PathBuf>)> {
    let (pairs, paths) = overrides(common, flags)?;
    if command != "report" {
        reject_paths(&paths)?;
    }
    let env_seed = std::env::var(SEED_ENV).ok();
    let s = Settings::resolve(defaults, env_seed, common.config.as_deref(), &pairs)?;
    let out = s.required_path("out")?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_text(&out.join("config.txt"), &s.render(command))?;
    Ok((s, out, paths))
}

fn some<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn flag(on: bool) -> Option<String> {
    on.then(|| "true".to_string())
}

fn path_flag(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut message = String::from("error");
            for cause in e.chain() {
                let text = cause.to_string();
                if !message.contains(&text) {
                    message = format!("{message}: {text}");
                }
            }
            eprintln!("{message}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use cless_core::Error as E;
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<CliError>() {
            return match c {
                CliError::Input(_) => 2,
                CliError::Mismatch(_) => 4,
            };
        }
        if let Some(c) = cause.downcast_ref::<E>() {
            return match c {
                E::Io { .. } | E::Parse { .. } | E::Data(_) | E::Config(_) => 2,
                E::Checkpoint(_) => 4,
                E::Diverged { .. } | E::NonFinite(_) | E::Shape(_) | E::Index { .. } | E::Contract(_) => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare {
            common,
            synthetic,
            input,
        } => {
            let flags = vec![("synthetic", flag(synthetic)), ("input", path_flag(&input))];
            let (s, out, _) = setup("prepare", PREPARE_KEYS, &common, flags)?;
            cmd_prepare(&s, &out)
        }
        Command::Pretrain {
            common,
            data,
            pseudo_labels,
            data_fraction,
        } => {
            let defaults = keys(&[
                &[("out", "runs/pretrain"), ("pseudo_labels", "150"), ("data_fraction", "1.0")],
                MODEL_KEYS,
                TRAIN_KEYS,
            ]);
            let flags = vec![
                ("data", path_flag(&data)),
                ("pseudo_labels", some(&pseudo_labels)),
                ("data_fraction", some(&data_fraction)),
            ];
            let (s, out, _) = setup("pretrain", &defaults, &common, flags)?;
            cmd_train(&s, &out, Mode::Pretrain)
        }
        Command::Finetune {
            common,
            data,
            init,
            label_fraction,
        } => {
            let defaults = keys(&[
                &[("out", "runs/finetune"), ("init", ""), ("label_fraction", "1.0")],
                MODEL_KEYS,
                TRAIN_KEYS,
            ]);
            let flags = vec![
                ("data", path_flag(&data)),
                ("init", path_flag(&init)),
                ("label_fraction", some(&label_fraction)),
            ];
            let (s, out, _) = setup("finetune", &defaults, &common, flags)?;
            cmd_train(&s, &out, Mode::Finetune)
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            zeror,
            zero_shot,
        } => {
            let flags = vec![
                ("data", path_flag(&data)),
                ("checkpoint", path_flag(&checkpoint)),
                ("zeror", flag(zeror)),
                ("zero_shot", flag(zero_shot)),
            ];
            let (s, out, _) = setup("eval", EVAL_KEYS, &common, flags)?;
            cmd_eval(&s, &out)
        }
        Command::Report { common } => {
            let (_, out, paths) = setup("report", REPORT_KEYS, &common, vec![])?;
            cmd_report(&out, &paths)
        }
        Command::Experiment { common, preset } => {
            let (s, out, _) = setup("experiment", EXPERIMENT_KEYS, &common, vec![("preset", preset)])?;
            cmd_experiment(&s, &out)
        }
    }
}

fn reject_paths(paths: &[PathBuf]) -> Result<()> {
    match paths.first() {
        Some(p) => Err(CliError::Input(format!("unexpected argument `{}` (expected key=value)", p.display())).into()),
        None => Ok(()),
    }
}

fn cmd_prepare(s: &Settings, out: &Path) -> Result<()> {
    let config = PrepareConfig {
        min_count: s.get("min_count")?,
        max_len: s.get("max_len")?,
        split_seed: s.get("split_seed")?,
        n_bins: s.get("n_bins")?,
    };
    let raw = if s.get::<bool>("synthetic")? {
        generate_synthetic_corpus(&SyntheticSpec {
            n_instances: s.get("n")?,
            n_classes: s.get("classes")?,
            zipf_exponent: s.get("zipf")?,
            vocab_size: s.get("words")?,
            seed: s.get("seed")?,
        })?
    } else {
        let input = s
            .path("input")
            .ok_or_else(|| CliError::Input("either --synthetic or --input is required".into()))?;
        let ingested = ingest(&input)?;
        if let Some(first) = ingested.rejected.first() {
            log::warn!(
                "{}: skipped {} malformed lines (first at line {}: {})",
                input.display(),
                ingested.rejected.len(),
                first.line,
                first.message
            );
        }
        ingested.instances
    };
    let prepared = Prepared::from_raw(raw, config)?;
    prepared.save(out)?;
    println!(
        "prepared {} instances ({} train, {} dev, {} test), {} words, {} classes -> {}",
        prepared.encoded.len(),
        prepared.split.train.len(),
        prepared.split.dev.len(),
        prepared.split.test.len(),
        prepared.vocab.len(),
        prepared.labels.len(),
        out.display()
    );
    Ok(())
}

fn load_prepared(s: &Settings) -> Result<Prepared> {
    let dir = s.required_path("data")?;
    Ok(Prepared::load(&dir)?)
}

fn model_config(s: &Settings) -> Result<ClessConfig> {
    let base = match s.raw("size") {
        "base" => ClessConfig::base(0),
        "xl" => ClessConfig::xl(0),
        other => return Err(CliError::Input(format!("size = `{other}`: expected base or xl")).into()),
    };
    Ok(ClessConfig {
        d: s.get("d")?,
        conv_widths: s.list("conv_widths")?,
        filters_per_width: if s.raw("filters").is_empty() {
            base.filters_per_width
        } else {
            s.get("filters")?
        },
        pool_k: s.get("pool_k")?,
        matcher_hidden: s.list("hidden")?,
        seed: s.get("seed")?,
        ..base
    })
}

fn embedding_init(s: &Settings) -> Result<EmbeddingInit> {
    if let Some(path) = s.path("vectors") {
        return Ok(EmbeddingInit::File(path));
    }
    match s.raw("embedding") {
        "random" => Ok(EmbeddingInit::Random),
        "skipgram" => Ok(EmbeddingInit::SkipGram {
            window: s.get("sg_window")?,
            negatives: s.get("sg_negatives")?,
            epochs: s.get("sg_epochs")?,
        }),
        other => Err(CliError::Input(format!("embedding = `{other}`: expected random or skipgram (or set vectors)")).into()),
    }
}

fn train_config(s: &Settings, mode: Mode) -> Result<TrainConfig> {
    let eval_every: usize = s.get("eval_every")?;
    Ok(TrainConfig {
        batch_size: s.get("batch_size")?,
        max_epochs: s.get("max_epochs")?,
        patience: s.get("patience")?,
        adam: AdamConfig {
            lr: s.get("lr")?,
            ..AdamConfig::default()
        },
        eval_every: (eval_every > 0).then_some(eval_every),
        seed: s.get("seed")?,
        ..TrainConfig::new(mode)
    })
}

fn cmd_train(s: &Settings, out: &Path, mode: Mode) -> Result<()> {
    let prepared = load_prepared(s)?;
    let mut cfg = train_config(s, mode)?;
    let ckpt = out.join("model.ckpt");
    let mut save = |m: &ClessModel, r: &cless_core::trainer::EvalRecord| {
        let meta = CheckpointMeta {
            stage: mode.to_string(),
            epoch: r.epoch,
            step: r.step,
            dev_ap_micro: Some(r.ap_micro_dev),
        };
        save_checkpoint(&ckpt, m, &meta)
    };
    let (_, log) = match mode {
        Mode::Pretrain => {
            let fraction: f64 = s.get("data_fraction")?;
            cfg = schedule_for_fraction(&cfg, fraction);
            let sampler = SamplerConfig {
                pseudo_labels: s.get("pseudo_labels")?,
                negatives: s.get("negatives")?,
            };
            let model = init_model(&prepared, model_config(s)?, &embedding_init(s)?)?;
            run_pretrain(&prepared, model, &sampler, &cfg, fraction, &mut save)?
        }
        Mode::Finetune => {
            let fraction: f64 = s.get("label_fraction")?;
            let sampler = SamplerConfig {
                negatives: s.get("negatives")?,
                ..SamplerConfig::default()
            };
            let model = match s.path("init") {
                Some(path) => {
                    let c = load_checkpoint(&path, &prepared.vocab)?;
                    log::info!("starting from {} ({} stage)", path.display(), c.meta.stage);
                    c.model
                }
                None => init_model(&prepared, model_config(s)?, &embedding_init(s)?)?,
            };
            run_finetune(&prepared, model, &sampler, &cfg, fraction, &mut save)?
        }
    };
    write_text(&out.join("runlog.csv"), &log.to_csv())?;
    write_text(&out.join("runlog.json"), &log.to_json())?;
    match log.best_record() {
        Some(b) => println!(
            "{mode}: best dev AP_micro {:.4} at step {} (epoch {}), {} evaluations -> {}",
            b.ap_micro_dev,
            b.step,
            b.epoch,
            log.records.len(),
            ckpt.display()
        ),
        None => println!("{mode}: no evaluations"),
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    source: String,
    stage: String,
    split: &'a str,
    n_instances: usize,
    #[serde(flatten)]
    evaluation: &'a Evaluation,
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        other => Err(CliError::Input(format!("split = `{other}`: expected train, dev or test")).into()),
    }
}

fn cmd_eval(s: &Settings, out: &Path) -> Result<()> {
    let prepared = load_prepared(s)?;
    let split_name = s.raw("split");
    let split = parse_split(split_name)?;
    let (source, stage, (evaluation, matrix)) = if s.get::<bool>("zeror")? {
        ("zeror".to_string(), String::new(), evaluate_zeror(&prepared, split)?)
    } else {
        let path = s.required_path("checkpoint")?;
        let c = load_checkpoint(&path, &prepared.vocab)?;
        if s.get::<bool>("zero_shot")? && c.meta.stage != Mode::Pretrain.to_string() {
            return Err(CliError::Mismatch(format!(
                "{}: zero-shot evaluation needs a pretrain checkpoint, found stage `{}`",
                path.display(),
                c.meta.stage
            ))
            .into());
        }
        let result = evaluate(&c.model, &prepared, split)?;
        (path.display().to_string(), c.meta.stage, result)
    };
    write_json(
        &out.join("ap.json"),
        &EvalOutput {
            source,
            stage,
            split: split_name,
            n_instances: matrix.n_instances(),
            evaluation: &evaluation,
        },
    )?;
    let train_counts = prepared.train_class_counts();
    let mut ap_csv = String::from("class,name,train_count,bin,ap\n");
    for (c, ap) in evaluation.ap.per_class.iter().enumerate() {
        let _ = writeln!(
            ap_csv,
            "{c},{},{},{},{}",
            csv_field(&prepared.labels.class(c).name),
            train_counts[c],
            prepared.binning.bin_of[c],
            ap.map_or(String::new(), |v| v.to_string())
        );
    }
    write_text(&out.join("ap.csv"), &ap_csv)?;
    let bins = &evaluation.bins;
    let mut bins_csv = String::from("bin,classes,positives,ap_micro\n");
    for (b, ap) in bins.bin_ap.iter().enumerate() {
        let _ = writeln!(
            bins_csv,
            "{b},{},{},{}",
            bins.class_counts[b],
            bins.positives[b],
            ap.map_or(String::new(), |v| v.to_string())
        );
    }
    write_text(&out.join("bins.csv"), &bins_csv)?;
    println!(
        "{split_name}: AP_micro {:.4}, AP_macro {:.4}, mean bin AP {}, prevalence {:.5}",
        evaluation.ap.ap_micro,
        evaluation.ap.ap_macro,
        bins.mean.map_or("n/a".to_string(), |m| format!("{m:.4}")),
        evaluation.prevalence
    );
    Ok(())
}

/// Accepts a run directory or a `runlog.json` path.
fn read_runlog(path: &Path) -> Result<NamedLog> {
    let file = if path.is_dir() { path.join("runlog.json") } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file)
        .map_err(|e| CliError::Input(format!("{}: {e}", file.display())))?;
    let log = RunLog::from_json(&text)?;
    let name = if path.is_dir() {
        path.file_name()
    } else {
        path.parent().and_then(Path::file_name)
    }
    .map_or_else(|| file.display().to_string(), |n| n.to_string_lossy().into_owned());
    Ok(NamedLog { name, log })
}

fn cmd_report(out: &Path, paths: &[PathBuf]) -> Result<()> {
    if paths.is_empty() {
        return Err(CliError::Input("report needs at least one run log".into()).into());
    }
    let mut logs = Vec::new();
    for p in paths {
        let l = read_runlog(p)?;
        if l.log.records.is_empty() {
            log::warn!("{}: run log has no evaluations, skipped", p.display());
        } else {
            logs.push(l);
        }
    }
    if logs.is_empty() {
        return Err(CliError::Input("every run log is empty".into()).into());
    }
    write_text(&out.join("curves.svg"), &report::curves_svg(&logs))?;
    write_text(&out.join("summary.csv"), &report::summary_csv(&logs))?;
    println!("{} runs -> {}", logs.len(), out.display());
    Ok(())
}

fn experiment_config(s: &Settings) -> Result<ExperimentConfig> {
    let base = ExperimentConfig::desk();
    let train = |mode: Mode, epochs: &str| -> Result<TrainConfig> {
        Ok(TrainConfig {
            batch_size: s.get("batch_size")?,
            max_epochs: s.get(epochs)?,
            patience: s.get("patience")?,
            adam: AdamConfig {
                lr: s.get("lr")?,
                ..AdamConfig::default()
            },
            ..TrainConfig::new(mode)
        })
    };
    Ok(ExperimentConfig {
        synthetic: SyntheticSpec {
            n_instances: s.get("n")?,
            n_classes: s.get("classes")?,
            zipf_exponent: s.get("zipf")?,
            vocab_size: s.get("words")?,
            seed: s.get("data_seed")?,
        },
        model: ClessConfig {
            d: s.get("d")?,
            conv_widths: s.list("conv_widths")?,
            filters_per_width: s.get("filters")?,
            pool_k: s.get("pool_k")?,
            matcher_hidden: s.list("hidden")?,
            ..base.model.clone()
        },
        sampler: SamplerConfig {
            pseudo_labels: s.get("pseudo_labels")?,
            negatives: s.get("negatives")?,
        },
        pretrain: train(Mode::Pretrain, "pretrain_epochs")?,
        finetune: train(Mode::Finetune, "finetune_epochs")?,
        seeds: s.list("seeds")?,
        pseudo_label_axis: s.list("pseudo_label_axis")?,
        data_fraction_axis: s.list("data_fraction_axis")?,
        label_fraction_axis: s.list("label_fraction_axis")?,
        longtail_label_fraction: s.get("longtail_label_fraction")?,
        ..base
    })
}

/// Median over seeds of each variant, in first-seen order.
fn medians_csv(rows: &[ResultRow]) -> String {
    let mut variants: Vec<&str> = Vec::new();
    for r in rows {
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
    }
    let mut out = String::from("variant,runs,median_test_ap_micro,median_test_ap_macro,median_bin_mean,median_tail_bin_ap\n");
    for v in variants {
        let group: Vec<&ResultRow> = rows.iter().filter(|r| r.variant == v).collect();
        let med = |f: &dyn Fn(&ResultRow) -> Option<f64>| -> String {
            let vals: Vec<f64> = group.iter().filter_map(|r| f(r)).collect();
            if vals.is_empty() {
                String::new()
            } else {
                median(&vals).to_string()
            }
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            csv_field(v),
            group.len(),
            med(&|r| Some(r.test_ap_micro)),
            med(&|r| Some(r.test_ap_macro)),
            med(&|r| r.bin_mean),
            med(&|r| r.bin_ap.last().copied().flatten())
        );
    }
    out
}

fn cmd_experiment(s: &Settings, out: &Path) -> Result<()> {
    let preset: Preset = s.raw("preset").parse().map_err(|e: cless_core::Error| CliError::Input(e.to_string()))?;
    let mut exp = Experiment::new(experiment_config(s)?)?;
    let rows = exp.run_preset(preset)?;
    write_text(&out.join("results.csv"), &rows_to_csv(&rows))?;
    write_json(&out.join("results.json"), &rows)?;
    let medians = medians_csv(&rows);
    write_text(&out.join("medians.csv"), &medians)?;
    print!("{medians}");
    Ok(())
}
