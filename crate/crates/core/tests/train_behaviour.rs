mod common;

use mtflow::data::SamplePair;
use mtflow::datagen::{generate_sample, sample_name, FilamentSpec, NoiseSpec};
use mtflow::flow::{self, FlowDraw, Objective};
use mtflow::model::{self, ModelConfig};
use mtflow::train::{adamw_update, fit, train, AdamState, Checkpoint, ModelKind, TrainConfig, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT, TRAIN_LOG};

fn pairs(count: usize, seed: u64) -> Vec<SamplePair> {
    (0..count)
        .map(|i| {
            let (im, m) = generate_sample(&FilamentSpec::simple(), &NoiseSpec::default(), 16, 16, seed + i as u64).unwrap();
            SamplePair::new(im, m, sample_name(i, count)).unwrap()
        })
        .collect()
}

fn config(max_epochs: usize) -> TrainConfig {
    TrainConfig { max_epochs, patience: max_epochs, t_max: 5, lr0: 1e-3, seed: 3, ..TrainConfig::default() }
}

fn tiny_baseline() -> ModelConfig {
    ModelConfig { in_channels: 1, time_conditioning: false, ..common::tiny_flow_config() }
}

#[test]
fn fifty_steps_on_one_sample_reduce_loss() {
    let cfg = common::tiny_flow_config();
    let (image, mask) = generate_sample(&FilamentSpec::simple(), &NoiseSpec::default(), 16, 16, 1).unwrap();
    let probes: Vec<FlowDraw> = (0..8).map(|k| FlowDraw::sample(16, 16, 500 + k)).collect();
    let obj = Objective::default();
    let loss = |w: &model::WeightSet| {
        probes.iter().map(|d| flow::flow_loss_with_draw(&cfg, w, &image, &mask, d, &obj).unwrap()).sum::<f64>() / 8.0
    };
    let mut w = model::init_weights(&cfg, 0).unwrap();
    let mut st = AdamState::new(&w);
    let initial = loss(&w);
    for step in 0..50 {
        let out = flow::training_step(&cfg, &w, &image, &mask, step, &obj).unwrap();
        adamw_update(&mut w, &out.grads, &mut st, 3e-3, 1e-5).unwrap();
    }
    let last = loss(&w);
    assert!(last < initial, "{initial} -> {last}");
}

#[test]
fn fit_writes_checkpoints_and_one_log_line_per_epoch() {
    let tmp = tempfile::tempdir().unwrap();
    let data = pairs(5, 10);
    let out = train(ModelKind::Baseline, tiny_baseline(), config(3), &data[..3], &data[3..], Some(tmp.path())).unwrap();
    assert_eq!(out.last.next_epoch, 3);
    let log = std::fs::read_to_string(tmp.path().join(TRAIN_LOG)).unwrap();
    assert_eq!(log.lines().count(), 3);
    let best = Checkpoint::load(&tmp.path().join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(best, out.best);
    assert_eq!(Checkpoint::load(&tmp.path().join(LAST_CHECKPOINT)).unwrap(), out.last);
    let best_epoch = best.early_stopping.best_epoch.unwrap();
    let best_val = out.last.history[best_epoch].val_loss;
    assert!(out.last.history.iter().all(|r| r.val_loss >= best_val));
}

#[test]
fn resumed_fit_appends_log_and_matches_uninterrupted() {
    let data = pairs(5, 20);
    let (tr, va) = data.split_at(3);
    let full = TrainConfig { patience: 2, ..config(4) };
    let straight = train(ModelKind::MtFlow, common::tiny_flow_config(), full.clone(), tr, va, None).unwrap();

    let tmp = tempfile::tempdir().unwrap();
    let first = TrainConfig { max_epochs: 2, ..full };
    train(ModelKind::MtFlow, common::tiny_flow_config(), first, tr, va, Some(tmp.path())).unwrap();
    let mut ck = Checkpoint::load(&tmp.path().join(LAST_CHECKPOINT)).unwrap();
    ck.train.max_epochs = 4;
    let resumed = fit(Trainer::from_checkpoint(ck).unwrap(), tr, va, Some(tmp.path())).unwrap();
    assert_eq!(resumed.last.history, straight.last.history);
    assert_eq!(resumed.last.weights, straight.last.weights);
    let log = std::fs::read_to_string(tmp.path().join(TRAIN_LOG)).unwrap();
    let expected: Vec<String> = straight.last.history.iter().map(|r| r.log_line()).collect();
    assert_eq!(log.lines().collect::<Vec<_>>(), expected);
}

#[test]
fn early_stopping_halts_before_budget() {
    let data = pairs(4, 30);
    // Updates of 1e-30 vanish in f32 arithmetic, so the validation loss never
    // strictly improves after the first epoch.
    let cfg = TrainConfig { lr0: 1e-30, weight_decay: 0.0, patience: 2, max_epochs: 10, ..config(10) };
    let out = train(ModelKind::Baseline, tiny_baseline(), cfg, &data[..2], &data[2..], None).unwrap();
    assert!(out.stopped_early());
    assert_eq!(out.last.next_epoch, 3);
    assert_eq!(out.best.next_epoch, 1);
}
