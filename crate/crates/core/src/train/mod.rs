//! Optimization loop: epoch-seeded shuffling and augmentation, per-batch
//! gradient averaging, AdamW with a cosine schedule, frozen-draw
//! validation, early stopping and checkpoints.

mod checkpoint;
mod optim;

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use optim::{adamw_update, cosine_lr, AdamState, EarlyStopping, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use crate::data::{apply_augment, AugmentParams, SamplePair};
use crate::error::{Error, IoContext, Result};
use crate::flow::{self, FlowDraw, LossWeights, Objective, StepOutput};
use crate::model::{self, ModelConfig, WeightSet};
use crate::seed::{self, tags};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const FAILED_CHECKPOINT: &str = "last_good.ckpt";
pub const TRAIN_LOG: &str = "train.log";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    /// Time-conditioned vector-field network integrated at inference.
    #[serde(rename = "mtflow")]
    MtFlow,
    /// Same backbone, one forward pass, sigmoid output.
    #[serde(rename = "unet")]
    Baseline,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::MtFlow => "mtflow",
            ModelKind::Baseline => "unet",
        }
    }

    pub fn default_config(self) -> ModelConfig {
        match self {
            ModelKind::MtFlow => ModelConfig::mtflow(),
            ModelKind::Baseline => ModelConfig::baseline(),
        }
    }

    /// Rejects configs whose channel layout does not fit this kind.
    pub fn check_config(self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        let ok = match self {
            ModelKind::MtFlow => config.in_channels == 2 && config.time_conditioning,
            ModelKind::Baseline => config.in_channels == 1 && !config.time_conditioning,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "model config does not describe a {} network",
                self.name()
            )))
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mtflow" => Ok(ModelKind::MtFlow),
            "unet" | "baseline" => Ok(ModelKind::Baseline),
            other => Err(Error::InvalidConfig(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub t_max: usize,
    pub eta_min: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub aux_cfm_weight: f64,
    /// Euler steps in the differentiable training reconstruction.
    pub rollout_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 2,
            lr0: 1e-4,
            weight_decay: 1e-5,
            t_max: 100,
            eta_min: 0.0,
            patience: 30,
            max_epochs: 300,
            seed: 0,
            loss_weights: LossWeights::default(),
            aux_cfm_weight: 0.0,
            rollout_steps: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(format!("train config: {m}")));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail("lr0 must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight_decay must be >= 0");
        }
        if self.t_max == 0 {
            return fail("t_max must be at least 1");
        }
        if !(0.0..=self.lr0).contains(&self.eta_min) {
            return fail("eta_min must lie in [0, lr0]");
        }
        if self.patience == 0 || self.max_epochs == 0 {
            return fail("patience and max_epochs must be at least 1");
        }
        if self.patience > self.max_epochs {
            return fail("patience must not exceed max_epochs");
        }
        if !(self.aux_cfm_weight >= 0.0 && self.aux_cfm_weight.is_finite()) {
            return fail("aux_cfm_weight must be >= 0");
        }
        if self.rollout_steps == 0 {
            return fail("rollout_steps must be at least 1");
        }
        self.loss_weights.validate()
    }

    pub fn objective(&self) -> Objective {
        Objective {
            weights: self.loss_weights,
            aux_cfm_weight: self.aux_cfm_weight,
            rollout_steps: self.rollout_steps,
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        cosine_lr(epoch, self.lr0, self.eta_min, self.t_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} lr={:.6e} train_loss={:.8} val_loss={:.8}",
            self.epoch, self.lr, self.train_loss, self.val_loss
        )
    }
}

/// Seed of the validation draw for a sample: a function of its name only,
/// so every epoch scores the same `(t, x0)`.
pub fn validation_seed(name: &str) -> u64 {
    seed::derive(seed::fnv1a(name.as_bytes()), &[tags::VALIDATION])
}

/// Loss of one sample without gradients, using its frozen validation draw.
pub fn validation_loss(
    kind: ModelKind,
    config: &ModelConfig,
    weights: &WeightSet<f32>,
    sample: &SamplePair,
    objective: &Objective,
) -> Result<f64> {
    match kind {
        ModelKind::MtFlow => {
            let (h, w) = sample.shape();
            let draw = FlowDraw::sample(h, w, validation_seed(&sample.name));
            flow::flow_loss_with_draw(config, weights, &sample.image, &sample.mask, &draw, objective)
        }
        ModelKind::Baseline => {
            let p = model::forward_baseline(config, weights, &sample.image)?;
            flow::wbce_loss(&sample.mask, &p, objective.weights)
        }
    }
}

/// Mean validation loss over a set (parallel, reduced in order).
pub fn mean_validation_loss(
    kind: ModelKind,
    config: &ModelConfig,
    weights: &WeightSet<f32>,
    samples: &[SamplePair],
    objective: &Objective,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("validation set is empty".into()));
    }
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|s| validation_loss(kind, config, weights, s, objective))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Summed loss and mean gradient of a batch, accumulated in input order.
fn average_gradients(template: &WeightSet<f32>, outputs: &[StepOutput]) -> (f64, WeightSet<f32>) {
    let mut grads = template.zeros_like();
    let mut loss = 0.0;
    for out in outputs {
        loss += out.loss;
        grads.add_scaled(&out.grads, 1.0);
    }
    grads.scale(1.0 / outputs.len() as f32);
    (loss, grads)
}

/// Training state between epochs.
#[derive(Debug, Clone)]
pub struct Trainer {
    state: Checkpoint,
}

impl Trainer {
    pub fn new(kind: ModelKind, model: ModelConfig, train: TrainConfig) -> Result<Self> {
        kind.check_config(&model)?;
        train.validate()?;
        let weights = model::init_weights(&model, seed::derive(train.seed, &[tags::INIT]))?;
        let adam = AdamState::new(&weights);
        Ok(Self {
            state: Checkpoint {
                kind,
                early_stopping: EarlyStopping::new(train.patience),
                model,
                train,
                weights,
                adam,
                next_epoch: 0,
                history: Vec::new(),
            },
        })
    }

    pub fn from_checkpoint(checkpoint: Checkpoint) -> Result<Self> {
        checkpoint.kind.check_config(&checkpoint.model)?;
        checkpoint.train.validate()?;
        Ok(Self { state: checkpoint })
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.state
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.state
    }

    pub fn weights(&self) -> &WeightSet<f32> {
        &self.state.weights
    }

    pub fn is_finished(&self) -> bool {
        self.state.early_stopping.should_stop() || self.state.next_epoch >= self.state.train.max_epochs
    }

    fn sample_step(&self, epoch: usize, index: usize, sample: &SamplePair) -> Result<StepOutput> {
        let st = &self.state;
        let base = st.train.seed;
        let e = epoch as u64;
        let i = index as u64;
        let mut aug_rng = seed::rng(seed::derive(base, &[tags::AUGMENT, e, i]));
        let aug = apply_augment(sample, AugmentParams::sample(&mut aug_rng));
        match st.kind {
            ModelKind::MtFlow => flow::training_step(
                &st.model,
                &st.weights,
                &aug.image,
                &aug.mask,
                seed::derive(base, &[tags::STEP, e, i]),
                &st.train.objective(),
            ),
            ModelKind::Baseline => {
                flow::baseline_step(&st.model, &st.weights, &aug.image, &aug.mask, st.train.loss_weights)
            }
        }
    }

    /// Runs one epoch. On error the weights are those before the failing
    /// batch's update.
    pub fn run_epoch(&mut self, train_set: &[SamplePair], val_set: &[SamplePair]) -> Result<EpochRecord> {
        if train_set.is_empty() || val_set.is_empty() {
            return Err(Error::InvalidConfig("training and validation sets must be non-empty".into()));
        }
        let epoch = self.state.next_epoch;
        let cfg = self.state.train.clone();
        let lr = cfg.lr(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive(cfg.seed, &[tags::SHUFFLE, epoch as u64])));

        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let outputs: Vec<StepOutput> = batch
                .par_iter()
                .map(|&i| self.sample_step(epoch, i, &train_set[i]))
                .collect::<Result<_>>()?;
            let (batch_loss, grads) = average_gradients(&self.state.weights, &outputs);
            loss_sum += batch_loss;
            let st = &mut self.state;
            adamw_update(&mut st.weights, &grads, &mut st.adam, lr, cfg.weight_decay)?;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let st = &self.state;
        let val_loss = mean_validation_loss(st.kind, &st.model, &st.weights, val_set, &cfg.objective())?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { t: f64::NAN, seed: cfg.seed });
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
        };
        let st = &mut self.state;
        st.early_stopping.observe(epoch, val_loss);
        st.history.push(record.clone());
        st.next_epoch += 1;
        Ok(record)
    }
}

/// Result of [`fit`]: the best-by-validation and final states.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
}

impl TrainOutcome {
    pub fn stopped_early(&self) -> bool {
        self.last.early_stopping.should_stop()
    }
}

fn append_log(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).with_path("opening", path)?;
    writeln!(f, "{line}").with_path("writing", path)
}

/// Trains until early stopping or `max_epochs`. With `out_dir`, writes
/// `best.ckpt` on every improvement, `last.ckpt` after every epoch and one
/// `train.log` line per epoch; on failure the last good state goes to
/// `last_good.ckpt`.
pub fn fit(mut trainer: Trainer, train_set: &[SamplePair], val_set: &[SamplePair], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).with_path("creating", dir)?;
    }
    let path = |name: &str| -> Option<PathBuf> { out_dir.map(|d| d.join(name)) };
    let resuming = trainer.state.next_epoch > 0;
    let mut best = match (resuming, path(BEST_CHECKPOINT)) {
        (true, Some(p)) if p.exists() => Some(Checkpoint::load(&p)?),
        _ => None,
    };
    if let (false, Some(p)) = (resuming, path(TRAIN_LOG)) {
        fs::write(&p, "").with_path("writing", &p)?;
    }
    while !trainer.is_finished() {
        let before = trainer.state.clone();
        let record = match trainer.run_epoch(train_set, val_set) {
            Ok(r) => r,
            Err(e) => {
                if let Some(p) = path(FAILED_CHECKPOINT) {
                    // Mid-epoch weights are consistent with the optimizer state
                    // but not with `next_epoch`; keep the epoch-start state too.
                    let mut good = trainer.state.clone();
                    good.next_epoch = before.next_epoch;
                    good.save(&p)?;
                }
                return Err(e);
            }
        };
        let improved = trainer.state.early_stopping.best_epoch == Some(record.epoch);
        if improved {
            best = Some(trainer.state.clone());
            if let Some(p) = path(BEST_CHECKPOINT) {
                trainer.state.save(&p)?;
            }
        }
        if let Some(p) = path(LAST_CHECKPOINT) {
            trainer.state.save(&p)?;
        }
        if let Some(p) = path(TRAIN_LOG) {
            append_log(&p, &record.log_line())?;
        }
    }
    let last = trainer.into_checkpoint();
    let best = best.unwrap_or_else(|| last.clone());
    Ok(TrainOutcome { best, last })
}

/// Fresh training run.
pub fn train(
    kind: ModelKind,
    model: ModelConfig,
    train_cfg: TrainConfig,
    train_set: &[SamplePair],
    val_set: &[SamplePair],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    fit(Trainer::new(kind, model, train_cfg)?, train_set, val_set, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_sample, FilamentSpec, NoiseSpec};

    fn tiny(kind: ModelKind) -> ModelConfig {
        ModelConfig {
            base_filters: 4,
            depth: 2,
            groupnorm_groups: 2,
            time_embed_dim: 8,
            mlp_hidden_dim: 8,
            ..kind.default_config()
        }
    }

    fn samples(n: usize, seed: u64) -> Vec<SamplePair> {
        (0..n)
            .map(|i| {
                let (image, mask) =
                    generate_sample(&FilamentSpec::simple(), &NoiseSpec::default(), 16, 16, seed + i as u64).unwrap();
                SamplePair::new(image, mask, format!("s{i}")).unwrap()
            })
            .collect()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            patience: 400,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(Trainer::new(ModelKind::MtFlow, tiny(ModelKind::Baseline), TrainConfig::default()).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let cfg = TrainConfig {
            max_epochs: 1,
            patience: 1,
            ..TrainConfig::default()
        };
        let data = samples(3, 0);
        let out = train(ModelKind::MtFlow, tiny(ModelKind::MtFlow), cfg, &data[..2], &data[2..], None).unwrap();
        let bytes = out.last.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, out.last);
        for (a, b) in back.weights.params().iter().zip(out.last.weights.params()) {
            let ab: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn corrupted_checkpoints_rejected() {
        let t = Trainer::new(ModelKind::Baseline, tiny(ModelKind::Baseline), TrainConfig::default()).unwrap();
        let bytes = t.checkpoint().to_bytes().unwrap();
        let mut bad_magic = bytes.clone();
        bad_magic[0] ^= 0xff;
        let err = Checkpoint::from_bytes(&bad_magic).unwrap_err();
        assert!(err.to_string().contains("corrupted checkpoint"), "{err}");
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::CorruptedCheckpoint(_))));
        let mut version = bytes.clone();
        version[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&version), Err(Error::CheckpointVersion { found: 9, .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 10]), Err(Error::CorruptedCheckpoint(_))));
    }

    #[test]
    fn identical_batch_matches_single_sample_update() {
        let data = samples(1, 4);
        let t = Trainer::new(ModelKind::Baseline, tiny(ModelKind::Baseline), TrainConfig::default()).unwrap();
        let step = t.sample_step(0, 0, &data[0]).unwrap();
        let update = |outputs: &[StepOutput]| {
            let (_, grads) = average_gradients(t.weights(), outputs);
            let mut w = t.weights().clone();
            let mut adam = AdamState::new(&w);
            adamw_update(&mut w, &grads, &mut adam, 1e-3, 1e-5).unwrap();
            w
        };
        let single = update(std::slice::from_ref(&step));
        for b in [2, 3, 5] {
            let batch = update(&vec![step.clone(); b]);
            for (pa, pb) in single.params().iter().zip(batch.params()) {
                for (x, y) in pa.data.iter().zip(&pb.data) {
                    assert!((x - y).abs() <= 1e-6, "batch {b}: {x} vs {y}");
                }
            }
        }
    }
}
