use std::collections::BTreeSet;

use wdiff::diffusion::ScheduleConfig;
use wdiff::io::checkpoint::{self, Checkpoint};
use wdiff::io::toy::{make_toy, ToyKind};
use wdiff::io::{Dataset, RunConfig};
use wdiff::train::{model_from_checkpoint, Trainer, TrainerConfig};
use wdiff::{Error, ModelConfig, Tensor, Variant};

fn tiny(variant: Variant) -> RunConfig {
    let mut model = ModelConfig::toy(variant);
    model.base_channels = 8;
    model.image_size = 8;
    model.attention_resolutions = BTreeSet::from([model.layout().feature_size(8) / 2]);
    let mut cfg = RunConfig::new(model);
    cfg.schedule = ScheduleConfig {
        timesteps: 50,
        ..ScheduleConfig::default()
    };
    cfg.trainer.batch_size = 4;
    cfg.trainer.lr = 1e-3;
    cfg.trainer.ema_rate = 0.9;
    cfg.trainer.log_every = 1;
    cfg.trainer.seed = 3;
    cfg
}

fn blobs(n: usize, size: usize) -> Dataset {
    Dataset::from_images(&make_toy(ToyKind::Blobs, n, size, 1).unwrap()).unwrap()
}

#[test]
fn every_parameter_receives_a_gradient() {
    let data = blobs(4, 8);
    for v in Variant::ALL {
        let mut t = Trainer::new(tiny(v)).unwrap();
        let stats = t.train_step(data.images()).unwrap();
        assert!(stats.missing_grads.is_empty(), "{v}: {:?}", stats.missing_grads);
        assert!(stats.loss.is_finite() && stats.grad_norm > 0.0, "{v}");
        assert_eq!(stats.timesteps.len(), 4);
        assert!(stats.timesteps.iter().all(|&t| (1..=50).contains(&t)));
    }
}

#[test]
fn fresh_model_loss_is_unit_noise_energy() {
    let data = blobs(32, 8);
    let mut t = Trainer::new(tiny(Variant::Sfunet)).unwrap();
    let stats = t.train_step(data.images()).unwrap();
    assert!((stats.loss - 1.0).abs() < 0.1, "{}", stats.loss);
}

#[test]
fn default_ema_rate_after_one_step() {
    let data = blobs(4, 8);
    let mut cfg = tiny(Variant::SpatialOnly);
    cfg.trainer.ema_rate = TrainerConfig::default().ema_rate;
    assert_eq!(cfg.trainer.ema_rate, 0.9999);
    let mut t = Trainer::new(cfg).unwrap();
    let before = t.model().params().clone();
    t.train_step(data.images()).unwrap();
    for ((e, b), a) in t.ema().tensors().iter().zip(before.tensors()).zip(t.model().params().tensors()) {
        for ((&e, &b), &a) in e.data().iter().zip(b.data()).zip(a.data()) {
            let expected = 0.9999 * b as f64 + 0.0001 * a as f64;
            assert!((e as f64 - expected).abs() <= 1e-7 * expected.abs().max(1.0));
        }
    }
}

#[test]
fn zero_learning_rate_leaves_params_bitwise() {
    let data = blobs(4, 8);
    let mut cfg = tiny(Variant::Sfunet);
    cfg.trainer.lr = 0.0;
    let mut t = Trainer::new(cfg).unwrap();
    let before = t.model().params().clone();
    t.train_step(data.images()).unwrap();
    assert_eq!(&before, t.model().params());
}

#[test]
fn update_moves_params_and_ema_lags() {
    let data = blobs(4, 8);
    let mut t = Trainer::new(tiny(Variant::Sfunet)).unwrap();
    let before = t.model().params().clone();
    t.train_step(data.images()).unwrap();
    assert_eq!(t.step(), 1);
    let after = t.model().params();
    let changed = before.tensors().iter().zip(after.tensors()).filter(|(a, b)| a != b).count();
    assert!(changed > 0);
    // ema = 0.9 * before + 0.1 * after
    for ((e, b), a) in t.ema().tensors().iter().zip(before.tensors()).zip(after.tensors()) {
        for ((&e, &b), &a) in e.data().iter().zip(b.data()).zip(a.data()) {
            assert!((e as f64 - (0.9 * b as f64 + 0.1 * a as f64)).abs() < 1e-6);
        }
    }
}

#[test]
fn non_finite_loss_reports_step_and_timesteps() {
    let mut t = Trainer::new(tiny(Variant::Sfunet)).unwrap();
    let bad = Tensor::<f32>::full(&[2, 3, 8, 8], f32::NAN);
    match t.train_step(&bad) {
        Err(Error::NonFinite(msg)) => {
            assert!(msg.contains("step 1") && msg.contains("t = ["), "{msg}");
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(t.step(), 0);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = blobs(10, 8);
    let mut cfg = tiny(Variant::Sfunet);
    cfg.trainer.iterations = 12;
    let mut straight = Trainer::new(cfg.clone()).unwrap();
    let mut log_a = Vec::new();
    let losses = straight.fit(&data, &mut log_a, None).unwrap();
    assert_eq!(losses.len(), 12);

    let mut half = cfg.clone();
    half.trainer.iterations = 5;
    let mut first = Trainer::new(half).unwrap();
    let mut log_b = Vec::new();
    let mut resumed_losses = first.fit(&data, &mut log_b, None).unwrap();
    let bytes = first.to_checkpoint().encode();
    let ck = Checkpoint::decode(&bytes, "mem".as_ref()).unwrap();
    let mut second = Trainer::from_checkpoint(&ck, Some(cfg)).unwrap();
    assert_eq!(second.step(), 5);
    resumed_losses.extend(second.fit(&data, &mut log_b, None).unwrap());

    assert_eq!(losses, resumed_losses);
    assert_eq!(straight.model().params(), second.model().params());
    assert_eq!(straight.ema(), second.ema());
    let columns = |log: &[u8]| -> Vec<String> {
        String::from_utf8(log.to_vec())
            .unwrap()
            .lines()
            .map(|l| l.split_whitespace().take(3).collect::<Vec<_>>().join(" "))
            .collect()
    };
    assert_eq!(columns(&log_a), columns(&log_b));
    assert_eq!(columns(&log_a).len(), 12);
}

#[test]
fn fit_writes_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.wdck");
    let data = blobs(6, 8);
    let mut cfg = tiny(Variant::SpatialOnly);
    cfg.trainer.iterations = 4;
    cfg.trainer.log_every = 2;
    cfg.trainer.checkpoint_every = 2;
    let mut t = Trainer::new(cfg.clone()).unwrap();
    let mut log = Vec::new();
    t.fit(&data, &mut log, Some(&path)).unwrap();
    let text = String::from_utf8(log).unwrap();
    let steps: Vec<&str> = text.lines().map(|l| l.split(' ').next().unwrap()).collect();
    assert_eq!(steps, ["2", "4"]);
    for line in text.lines() {
        let cols: Vec<&str> = line.split(' ').collect();
        assert_eq!(cols.len(), 4);
        assert!(cols[1].parse::<f64>().unwrap().is_finite());
        assert!(cols[3].parse::<u64>().is_ok());
    }
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.state.as_ref().unwrap().step, 4);
    assert_eq!(ck.config, cfg.to_json());
    let (_, ema_model) = model_from_checkpoint(&ck, true).unwrap();
    assert_eq!(ema_model.params(), t.ema());
    let (_, raw_model) = model_from_checkpoint(&ck, false).unwrap();
    assert_eq!(raw_model.params(), t.model().params());
    for name in [checkpoint::PARAMS, checkpoint::EMA, checkpoint::ADAM_M, checkpoint::ADAM_V] {
        assert!(ck.section(name).is_some(), "{name}");
    }
}

#[test]
fn zero_iterations_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("init.wdck");
    let mut cfg = tiny(Variant::Sfunet);
    cfg.trainer.iterations = 0;
    let mut t = Trainer::new(cfg).unwrap();
    let mut log = Vec::new();
    assert!(t.fit(&blobs(2, 8), &mut log, Some(&path)).unwrap().is_empty());
    assert!(log.is_empty());
    let ck = Checkpoint::load(&path).unwrap();
    let (_, model) = model_from_checkpoint(&ck, true).unwrap();
    assert_eq!(model.params(), t.model().params());
}

#[test]
fn mismatched_dataset_is_rejected_without_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("never.wdck");
    let mut t = Trainer::new(tiny(Variant::Sfunet)).unwrap();
    let mut log = Vec::new();
    assert!(t.fit(&blobs(2, 16), &mut log, Some(&path)).is_err());
    assert!(!path.exists());
}

#[test]
fn resume_rejects_a_different_model() {
    let t = Trainer::new(tiny(Variant::Sfunet)).unwrap();
    let ck = t.to_checkpoint();
    let other = tiny(Variant::SpatialOnly);
    assert!(Trainer::from_checkpoint(&ck, Some(other)).is_err());
}

#[test]
fn short_run_reduces_loss() {
    let data = blobs(32, 8);
    let mut cfg = tiny(Variant::Sfunet);
    cfg.trainer.iterations = 150;
    cfg.trainer.batch_size = 8;
    cfg.model.dropout = 0.0;
    let mut t = Trainer::new(cfg).unwrap();
    let losses = t.fit(&data, &mut std::io::sink(), None).unwrap();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (head, tail) = (mean(&losses[..20]), mean(&losses[130..]));
    assert!(tail < 0.8 * head, "{head} -> {tail}");
}
