//! Desk-scale end-to-end run: generate a small synthetic dataset, train the
//! flow model and the single-pass baseline, evaluate both on the held-out
//! split and emit the comparative table.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, split, SplitSpec};
use crate::datagen::{generate_dataset, FilamentSpec, NoiseSpec};
use crate::error::{IoContext, Result};
use crate::eval::{all_foreground_dice, evaluate_model, format_table, MetricsReport};
use crate::infer::InferenceConfig;
use crate::model::ModelConfig;
use crate::train::{train, EpochRecord, ModelKind, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReproConfig {
    pub count: usize,
    pub size: usize,
    pub data_seed: u64,
    pub filament: FilamentSpec,
    pub noise: NoiseSpec,
    pub split: SplitSpec,
    /// Flow network; the baseline shares it with one input channel and no
    /// time path.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferenceConfig,
}

impl Default for ReproConfig {
    fn default() -> Self {
        Self {
            count: 80,
            size: 64,
            data_seed: 7,
            filament: FilamentSpec::simple(),
            noise: NoiseSpec::default(),
            split: SplitSpec::default(),
            model: ModelConfig::mtflow().with_base_filters(16),
            train: desk_train_config(),
            infer: InferenceConfig::default(),
        }
    }
}

/// Default hyperparameters with the cosine period and patience shrunk in
/// proportion to a 30-epoch budget (100 -> 30 and 30 -> 9).
pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        t_max: 30,
        patience: 9,
        max_epochs: 30,
        ..TrainConfig::default()
    }
}

/// The single-pass network with the same backbone as `flow`.
pub fn baseline_of(flow: &ModelConfig) -> ModelConfig {
    ModelConfig {
        in_channels: 1,
        time_conditioning: false,
        ..flow.clone()
    }
}

#[derive(Debug, Clone)]
pub struct ModelRun {
    pub kind: ModelKind,
    pub report: MetricsReport,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone)]
pub struct ReproOutcome {
    pub runs: Vec<ModelRun>,
    pub all_foreground_dice: f64,
    pub table: String,
}

impl ReproOutcome {
    pub fn run(&self, kind: ModelKind) -> Option<&ModelRun> {
        self.runs.iter().find(|r| r.kind == kind)
    }
}

/// Runs the whole pipeline under `out_dir`:
/// `data/`, `<model>/{best,last}.ckpt`, `<model>/train.log`,
/// `<model>/metrics.csv` and `table.txt`.
pub fn repro(cfg: &ReproConfig, out_dir: &Path) -> Result<ReproOutcome> {
    let data_dir = out_dir.join("data");
    generate_dataset(&cfg.filament, &cfg.noise, cfg.size, cfg.size, cfg.count, cfg.data_seed, &data_dir)?;
    let pairs = load_dataset(&data_dir)?;
    let (train_set, val_set, test_set) = split(pairs, &cfg.split)?;

    let mut runs = Vec::new();
    for kind in [ModelKind::MtFlow, ModelKind::Baseline] {
        let model = match kind {
            ModelKind::MtFlow => cfg.model.clone(),
            ModelKind::Baseline => baseline_of(&cfg.model),
        };
        let dir = out_dir.join(kind.name());
        let outcome = train(kind, model.clone(), cfg.train.clone(), &train_set, &val_set, Some(&dir))?;
        let best = &outcome.best;
        let (report, _) = evaluate_model(
            kind.name(),
            kind,
            &model,
            &best.weights,
            &test_set,
            &cfg.infer,
            cfg.train.loss_weights,
            true,
        )?;
        report.write_csv(&dir.join("metrics.csv"))?;
        runs.push(ModelRun {
            kind,
            report,
            history: outcome.last.history.clone(),
            best_epoch: best.early_stopping.best_epoch,
            checkpoint: dir.join(crate::train::BEST_CHECKPOINT),
        });
    }
    let rows: Vec<_> = runs.iter().map(|r| (r.kind.name().to_string(), r.report.mean)).collect();
    let table = format_table(&rows);
    let path = out_dir.join("table.txt");
    fs::write(&path, &table).with_path("writing", &path)?;
    Ok(ReproOutcome {
        runs,
        all_foreground_dice: all_foreground_dice(&test_set),
        table,
    })
}
