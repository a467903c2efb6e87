use cless_core::corpus::{generate_synthetic_corpus, SyntheticSpec, PAD};
use cless_core::eval::{ap_micro, score_model};
use cless_core::model::ClessConfig;
use cless_core::pipeline::{evaluate, init_model, run_finetune, run_pretrain, EmbeddingInit, PrepareConfig, Prepared, Split};
use cless_core::sampler::SamplerConfig;
use cless_core::trainer::{Mode, RunLog, StopReason, TrainConfig};
use cless_core::Error;

fn prepared() -> Prepared {
    let raw = generate_synthetic_corpus(&SyntheticSpec {
        n_instances: 300,
        n_classes: 20,
        zipf_exponent: 1.0,
        vocab_size: 150,
        seed: 3,
    })
    .unwrap();
    Prepared::from_raw(raw, PrepareConfig::default()).unwrap()
}

fn config() -> ClessConfig {
    ClessConfig {
        d: 12,
        conv_widths: vec![1, 2],
        filters_per_width: 8,
        pool_k: 2,
        matcher_hidden: vec![16],
        vocab_size: 0,
        seed: 5,
    }
}

fn sampler() -> SamplerConfig {
    SamplerConfig {
        pseudo_labels: 20,
        negatives: 10,
    }
}

fn train_cfg(mode: Mode) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        max_epochs: 4,
        patience: 2,
        ..TrainConfig::new(mode)
    }
}

fn best_is_max(log: &RunLog) {
    let best = log.best_record().unwrap().ap_micro_dev;
    let max = log.records.iter().map(|r| r.ap_micro_dev).fold(f64::MIN, f64::max);
    assert_eq!(best, max);
}

#[test]
fn pretraining_returns_the_best_checkpoint_and_is_reproducible() {
    let p = prepared();
    let run = || {
        let model = init_model(&p, config(), &EmbeddingInit::Random).unwrap();
        let mut saved = Vec::new();
        let (m, log) = run_pretrain(&p, model, &sampler(), &train_cfg(Mode::Pretrain), 1.0, &mut |m, r| {
            saved.push((m.clone(), r.ap_micro_dev));
            Ok(())
        })
        .unwrap();
        (m, log, saved)
    };
    let (model, log, saved) = run();
    best_is_max(&log);
    // the returned model is the last one reported as an improvement
    let (last_saved, ap) = saved.last().unwrap();
    assert_eq!(&model, last_saved);
    assert_eq!(*ap, log.best_record().unwrap().ap_micro_dev);
    let dev = p.labeled(Split::Dev);
    let (m, _) = score_model(&model, &dev, &p.labels).unwrap();
    assert_eq!(ap_micro(&m).unwrap(), *ap);
    assert!(model.embedding().row(PAD).iter().all(|&v| v == 0.0));

    let (again, log_again, _) = run();
    assert_eq!(again, model);
    let strip = |l: &RunLog| l.records.iter().map(|r| (r.step, r.loss.to_bits(), r.ap_micro_dev.to_bits())).collect::<Vec<_>>();
    assert_eq!(strip(&log), strip(&log_again));
}

#[test]
fn the_pretrained_matcher_is_the_one_used_for_real_labels() {
    let p = prepared();
    let model = init_model(&p, config(), &EmbeddingInit::Random).unwrap();
    let (model, _) = run_pretrain(&p, model, &sampler(), &train_cfg(Mode::Pretrain), 1.0, &mut |_, _| Ok(())).unwrap();
    let before: Vec<(String, Vec<f64>)> = model
        .matcher_params()
        .iter()
        .map(|(n, t)| (n.to_string(), t.data().to_vec()))
        .collect();
    let (zero_shot, _) = evaluate(&model, &p, Split::Test).unwrap();
    let after: Vec<(String, Vec<f64>)> = model
        .matcher_params()
        .iter()
        .map(|(n, t)| (n.to_string(), t.data().to_vec()))
        .collect();
    assert_eq!(before, after);
    assert!(zero_shot.ap.ap_micro > 0.0);
}

#[test]
fn full_fraction_visits_every_labeled_instance_once_per_epoch() {
    let p = prepared();
    let n_labeled = p.labeled(Split::Train).len();
    let model = init_model(&p, config(), &EmbeddingInit::Random).unwrap();
    let cfg = TrainConfig {
        max_epochs: 2,
        patience: 10,
        ..train_cfg(Mode::Finetune)
    };
    let (_, log) = run_finetune(&p, model, &sampler(), &cfg, 1.0, &mut |_, _| Ok(())).unwrap();
    let per_epoch = n_labeled.div_ceil(cfg.batch_size);
    let steps: Vec<usize> = log.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![per_epoch, 2 * per_epoch]);
    assert_eq!(log.stop_reason, StopReason::MaxEpochs);
    best_is_max(&log);
}

#[test]
fn patience_stops_the_run() {
    let p = prepared();
    let model = init_model(&p, config(), &EmbeddingInit::Random).unwrap();
    let cfg = TrainConfig {
        max_epochs: 200,
        patience: 1,
        eval_every: Some(1),
        ..train_cfg(Mode::Finetune)
    };
    let (_, log) = run_finetune(&p, model, &sampler(), &cfg, 0.5, &mut |_, _| Ok(())).unwrap();
    assert_eq!(log.stop_reason, StopReason::Patience);
    let best = log.best.unwrap();
    assert_eq!(log.records.len(), best + 2);
}

#[test]
fn divergence_is_reported() {
    let p = prepared();
    let mut model = init_model(&p, config(), &EmbeddingInit::Random).unwrap();
    for (_, t) in model.params_mut().iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = f64::NAN);
    }
    let err = run_finetune(&p, model, &sampler(), &train_cfg(Mode::Finetune), 1.0, &mut |_, _| Ok(())).unwrap_err();
    assert!(matches!(err, Error::Diverged { epoch: 1, step: 1, .. }), "{err:?}");
}

#[test]
fn wrong_mode_is_rejected() {
    let p = prepared();
    let model = init_model(&p, config(), &EmbeddingInit::Random).unwrap();
    let err = run_pretrain(&p, model, &sampler(), &train_cfg(Mode::Finetune), 1.0, &mut |_, _| Ok(()));
    assert!(matches!(err, Err(Error::Config(_))));
}
