//! Training loops for self-supervised pretraining and supervised
//! fine-tuning. Both select the parameters with the best development
//! micro AP on the real labels; in pretraining the real labels are only
//! used for that selection, never in the loss.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedInstance, LabelVocab};
use crate::error::{Error, Result};
use crate::eval::{ap_micro, ap_macro, score_model};
use crate::model::ClessModel;
use crate::numeric::{adam_step, AdamConfig, AdamState};
use crate::sampler::{build_supervised_batch, sample_pseudo_batch, PairBatch, SamplerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Pretrain,
    Finetune,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Pretrain => "pretrain",
            Mode::Finetune => "finetune",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Scales `patience`, for runs on reduced data.
    pub patience_multiplier: usize,
    pub adam: AdamConfig,
    /// Steps between dev evaluations; `None` evaluates once per epoch.
    pub eval_every: Option<usize>,
    pub seed: u64,
    pub mode: Mode,
}

impl TrainConfig {
    pub fn new(mode: Mode) -> Self {
        TrainConfig {
            batch_size: 32,
            max_epochs: 20,
            patience: 3,
            patience_multiplier: 1,
            adam: AdamConfig::default(),
            eval_every: None,
            seed: 0,
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 || self.patience_multiplier == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.batch_size == 0 || (self.mode == Mode::Pretrain && self.batch_size < 2) {
            return Err(Error::Config(format!(
                "batch size {} is too small for {}",
                self.batch_size, self.mode
            )));
        }
        if self.eval_every == Some(0) {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn effective_patience(&self) -> usize {
        self.patience * self.patience_multiplier
    }
}

/// One development evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub epoch: usize,
    /// Mean training loss since the previous evaluation.
    pub loss: f64,
    pub ap_micro_dev: f64,
    pub ap_macro_dev: f64,
    /// Wall time since the start of the run.
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub mode: Mode,
    pub records: Vec<EvalRecord>,
    /// Index into `records` of the selected evaluation.
    pub best: Option<usize>,
    pub stop_reason: StopReason,
}

impl RunLog {
    pub fn best_record(&self) -> Option<&EvalRecord> {
        self.best.map(|i| &self.records[i])
    }

    pub const CSV_HEADER: &'static str = "step,epoch,loss,ap_micro_dev,ap_macro_dev,seconds";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.epoch, r.loss, r.ap_micro_dev, r.ap_macro_dev, r.seconds
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run logs serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("run log: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Improved,
    NoImprovement,
    Exhausted,
}

/// Stops after `patience` consecutive observations that do not beat the
/// best value so far.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, value: f64) -> Progress {
        if self.best.map_or(true, |b| value > b) {
            self.best = Some(value);
            self.since_best = 0;
            Progress::Improved
        } else {
            self.since_best += 1;
            if self.since_best >= self.patience {
                Progress::Exhausted
            } else {
                Progress::NoImprovement
            }
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

/// Labeled development data scored against the full label set.
#[derive(Debug, Clone, Copy)]
pub struct DevSet<'a> {
    pub instances: &'a [&'a EncodedInstance],
    pub labels: &'a LabelVocab,
}

impl DevSet<'_> {
    fn evaluate(&self, model: &ClessModel) -> Result<(f64, f64)> {
        let (m, _) = score_model(model, self.instances, self.labels)?;
        Ok((ap_micro(&m)?, ap_macro(&m)?))
    }
}

/// Called with the model and its record whenever dev AP improves.
pub type OnImprove<'a> = dyn FnMut(&ClessModel, &EvalRecord) -> Result<()> + 'a;

/// Self-supervised pretraining on pseudo labels drawn from `texts`.
pub fn pretrain(
    model: ClessModel,
    texts: &[&[usize]],
    dev: DevSet<'_>,
    sampler: &SamplerConfig,
    cfg: &TrainConfig,
    on_improve: &mut OnImprove<'_>,
) -> Result<(ClessModel, RunLog)> {
    if cfg.mode != Mode::Pretrain {
        return Err(Error::Config("pretrain needs mode = pretrain".into()));
    }
    if texts.len() < 2 {
        return Err(Error::Data("pretraining needs at least 2 texts".into()));
    }
    let (g, b) = sampler.pseudo_split();
    let vocab_size = model.config().vocab_size;
    run(model, texts.len(), dev, cfg, on_improve, |ids, rng| {
        let batch: Vec<&[usize]> = ids.iter().map(|&i| texts[i]).collect();
        sample_pseudo_batch(&batch, g, b, vocab_size, rng)
    })
}

/// Supervised fine-tuning on the real labels of `train`.
pub fn finetune(
    model: ClessModel,
    train: &[&EncodedInstance],
    labels: &LabelVocab,
    dev: DevSet<'_>,
    sampler: &SamplerConfig,
    cfg: &TrainConfig,
    on_improve: &mut OnImprove<'_>,
) -> Result<(ClessModel, RunLog)> {
    if cfg.mode != Mode::Finetune {
        return Err(Error::Config("finetune needs mode = finetune".into()));
    }
    let train: Vec<&EncodedInstance> = train.iter().copied().filter(|i| i.is_labeled()).collect();
    if train.is_empty() {
        return Err(Error::Data("fine-tuning needs labeled instances".into()));
    }
    run(model, train.len(), dev, cfg, on_improve, |ids, rng| {
        let batch: Vec<&EncodedInstance> = ids.iter().map(|&i| train[i]).collect();
        Ok(build_supervised_batch(&batch, labels, sampler.negatives, rng))
    })
}

/// Epoch order split into batches; in pretraining a trailing single-item
/// batch joins the previous one so that negatives can be drawn.
fn batches(order: &[usize], size: usize, min_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < min_size) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * size;
        out[n - 1] = &order[start..];
    }
    out
}

fn run(
    mut model: ClessModel,
    n_items: usize,
    dev: DevSet<'_>,
    cfg: &TrainConfig,
    on_improve: &mut OnImprove<'_>,
    mut make_batch: impl FnMut(&[usize], &mut ChaCha8Rng) -> Result<PairBatch>,
) -> Result<(ClessModel, RunLog)> {
    cfg.validate()?;
    if dev.instances.iter().all(|i| !i.is_labeled()) {
        return Err(Error::Data("development set has no labels".into()));
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.adam, model.params());
    let mut stopper = EarlyStopping::new(cfg.effective_patience());
    let mut log = RunLog {
        mode: cfg.mode,
        records: Vec::new(),
        best: None,
        stop_reason: StopReason::MaxEpochs,
    };
    let mut best_model = model.clone();
    let min_batch = if cfg.mode == Mode::Pretrain { 2 } else { 1 };
    let mut order: Vec<usize> = (0..n_items).collect();
    let (mut step, mut loss_sum, mut loss_n) = (0usize, 0.0, 0usize);

    'epochs: for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let epoch_batches = batches(&order, cfg.batch_size, min_batch);
        let n_batches = epoch_batches.len();
        for (bi, ids) in epoch_batches.into_iter().enumerate() {
            let batch = make_batch(ids, &mut rng)?;
            if batch.is_empty() {
                continue;
            }
            let loss = model.loss_and_grads(&batch)?;
            step += 1;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            adam_step(model.params_mut(), &mut adam).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} (epoch {epoch}, step {step})")),
                e => e,
            })?;
            loss_sum += loss;
            loss_n += 1;

            let due = match cfg.eval_every {
                Some(k) => step % k == 0,
                None => bi + 1 == n_batches,
            };
            if !due {
                continue;
            }
            let (micro, macro_) = dev.evaluate(&model)?;
            let record = EvalRecord {
                step,
                epoch,
                loss: loss_sum / loss_n.max(1) as f64,
                ap_micro_dev: micro,
                ap_macro_dev: macro_,
                seconds: started.elapsed().as_secs_f64(),
            };
            (loss_sum, loss_n) = (0.0, 0);
            log::info!(
                "{} epoch {epoch} step {step}: loss {:.5}, dev AP micro {micro:.5}, macro {macro_:.5}",
                cfg.mode,
                record.loss
            );
            let progress = stopper.observe(micro);
            log.records.push(record);
            if progress == Progress::Improved {
                log.best = Some(log.records.len() - 1);
                best_model = model.clone();
                on_improve(&best_model, log.records.last().expect("just pushed"))?;
            }
            if progress == Progress::Exhausted {
                log.stop_reason = StopReason::Patience;
                break 'epochs;
            }
        }
    }
    if log.records.is_empty() {
        return Err(Error::Data("training finished without a dev evaluation".into()));
    }
    for (_, t) in best_model.params_mut().iter_mut() {
        t.clear_grad();
    }
    Ok((best_model, log))
}
