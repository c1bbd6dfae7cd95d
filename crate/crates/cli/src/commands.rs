use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use mtflow::data::{load_dataset, split, SamplePair};
use mtflow::datagen::{generate_dataset, IMAGES_DIR, MANIFEST_FILE};
use mtflow::domain::{normalize_image, threshold, Image, ProbMap};
use mtflow::eval::{evaluate_model, evaluate_predictions, format_table, overlay, MetricsReport, Prediction};
use mtflow::infer::{segment_batch, write_segmentation, PROBMAPS_DIR};
use mtflow::io;
use mtflow::pipeline::{repro as run_repro, ReproConfig};
use mtflow::train::{fit, Checkpoint, ModelKind, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT, TRAIN_LOG};

use crate::config::{Profile, RunConfig};
use crate::{EvaluateArgs, GenerateArgs, InferArgs, InferFlags, ModelFlags, ReproArgs, TrainArgs, TrainFlags};

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn apply_model(cfg: &mut RunConfig, f: &ModelFlags) {
    set(&mut cfg.model.base_filters, f.base_filters);
    set(&mut cfg.model.depth, f.depth);
    set(&mut cfg.model.groupnorm_groups, f.groupnorm_groups);
}

fn model_overridden(f: &ModelFlags) -> bool {
    f.base_filters.is_some() || f.depth.is_some() || f.groupnorm_groups.is_some()
}

fn apply_train(cfg: &mut RunConfig, f: &TrainFlags) {
    let t = &mut cfg.train;
    set(&mut t.batch_size, f.batch_size);
    set(&mut t.lr0, f.lr);
    set(&mut t.weight_decay, f.weight_decay);
    set(&mut t.t_max, f.t_max);
    set(&mut t.eta_min, f.eta_min);
    set(&mut t.patience, f.patience);
    set(&mut t.max_epochs, f.max_epochs);
    set(&mut t.seed, f.train_seed);
    set(&mut t.aux_cfm_weight, f.aux_cfm_weight);
    set(&mut t.rollout_steps, f.rollout_steps);
    // A short smoke run should not be rejected for keeping the default patience.
    if f.max_epochs.is_some() && f.patience.is_none() {
        t.patience = t.patience.min(t.max_epochs);
    }
}

fn apply_infer(cfg: &mut RunConfig, f: &InferFlags) {
    let i = &mut cfg.infer;
    set(&mut i.num_steps, f.steps);
    set(&mut i.seed, f.seed);
    set(&mut i.tau, f.tau);
    set(&mut i.ensemble, f.ensemble);
}

fn require(path: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.ok_or_else(|| anyhow!("missing {what}: pass a flag or set it under [paths]"))
}

fn parse_kind(s: Option<&str>) -> Result<Option<ModelKind>> {
    s.map(|s| s.parse::<ModelKind>().map_err(|e| anyhow!("{e}"))).transpose()
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref(), Profile::Standard, None, a.variant)?;
    set(&mut cfg.generate.count, a.count);
    set(&mut cfg.generate.size, a.size);
    set(&mut cfg.generate.seed, a.seed);
    set_opt(&mut cfg.paths.out, a.out);
    let out = require(cfg.paths.out.clone(), "output directory (--out)")?;
    let g = &cfg.generate;
    let manifest = generate_dataset(&cfg.filament, &cfg.noise, g.size, g.size, g.count, g.seed, &out).map_err(|e| {
        if let mtflow::Error::PartialOutput { completed, .. } = &e {
            for p in completed {
                eprintln!("completed before failure: {}", p.display());
            }
        }
        anyhow!(e)
    })?;
    cfg.echo(&out)?;
    println!(
        "wrote {} pairs; manifest {}",
        manifest.entries.len(),
        out.join(MANIFEST_FILE).display()
    );
    Ok(())
}

fn load_pairs(root: &Path) -> Result<Vec<SamplePair>> {
    for sub in [IMAGES_DIR, mtflow::datagen::MASKS_DIR] {
        let p = root.join(sub);
        if !p.is_dir() {
            bail!("dataset directory {} does not exist", p.display());
        }
    }
    let pairs = load_dataset(root).with_context(|| format!("loading dataset {}", root.display()))?;
    if pairs.is_empty() {
        bail!("dataset {} contains no image/mask pairs", root.display());
    }
    Ok(pairs)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let kind_flag = parse_kind(a.model.as_deref())?;
    let mut cfg = RunConfig::load(a.config.as_deref(), Profile::Standard, kind_flag, None)?;
    apply_model(&mut cfg, &a.model_flags);
    apply_train(&mut cfg, &a.train_flags);
    set_opt(&mut cfg.paths.data, a.data);
    set_opt(&mut cfg.paths.out, a.out);
    let data = require(cfg.paths.data.clone(), "dataset (--data)")?;
    let out = require(cfg.paths.out.clone(), "output directory (--out)")?;
    let pairs = load_pairs(&data)?;
    let (train_set, val_set, _) = split(pairs, &cfg.split)?;

    let trainer = if a.resume {
        let path = out.join(LAST_CHECKPOINT);
        let ckpt = Checkpoint::load(&path).with_context(|| format!("resuming from {}", path.display()))?;
        if ckpt.kind != cfg.run.model || ckpt.model.fingerprint() != cfg.model.fingerprint() {
            bail!("checkpoint {} was trained with a different model configuration", path.display());
        }
        // The epoch budget may be extended; every other hyperparameter stays
        // as trained so the continuation matches an uninterrupted run.
        let mut ckpt = ckpt;
        let budget = (cfg.train.max_epochs, cfg.train.patience);
        let mut requested = cfg.train.clone();
        requested.max_epochs = ckpt.train.max_epochs;
        requested.patience = ckpt.train.patience;
        if requested != ckpt.train {
            eprintln!("note: resuming with the checkpoint's training hyperparameters; only max_epochs and patience are taken from this run");
        }
        ckpt.train.max_epochs = budget.0;
        ckpt.train.patience = budget.1;
        ckpt.early_stopping.patience = budget.1;
        cfg.train = ckpt.train.clone();
        Trainer::from_checkpoint(ckpt)?
    } else {
        Trainer::new(cfg.run.model, cfg.model.clone(), cfg.train.clone())?
    };
    cfg.echo(&out)?;
    let outcome = fit(trainer, &train_set, &val_set, Some(&out))?;
    for r in &outcome.last.history {
        println!("{}", r.log_line());
    }
    println!(
        "best epoch {:?}; checkpoint {}; log {}",
        outcome.best.early_stopping.best_epoch,
        out.join(BEST_CHECKPOINT).display(),
        out.join(TRAIN_LOG).display()
    );
    Ok(())
}

/// Sorted `(name, path)` of PNGs in `dir`.
fn list_pngs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            out.push((name, path));
        }
    }
    out.sort();
    Ok(out)
}

fn checkpoint_matches(ckpt: &Checkpoint, cfg: &RunConfig, path: &Path) -> Result<()> {
    if ckpt.model.fingerprint() != cfg.model.fingerprint() {
        bail!(
            "model configuration differs from checkpoint {} (fingerprint {:016x} vs {:016x})",
            path.display(),
            cfg.model.fingerprint(),
            ckpt.model.fingerprint()
        );
    }
    Ok(())
}

pub fn infer(a: InferArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref(), Profile::Standard, None, None)?;
    set_opt(&mut cfg.paths.checkpoint, a.checkpoint);
    set_opt(&mut cfg.paths.data, a.input);
    set_opt(&mut cfg.paths.out, a.out);
    apply_infer(&mut cfg, &a.infer_flags);
    if a.emit_trajectory {
        cfg.infer.emit_trajectory = true;
    }
    let ckpt_path = require(cfg.paths.checkpoint.clone(), "checkpoint (--checkpoint)")?;
    let input = require(cfg.paths.data.clone(), "input directory (--input)")?;
    let out = require(cfg.paths.out.clone(), "output directory (--out)")?;
    let ckpt = Checkpoint::load(&ckpt_path).with_context(|| format!("loading {}", ckpt_path.display()))?;

    // An explicit model description must agree with the checkpoint.
    let file_has_model = match &a.config {
        Some(p) => std::fs::read_to_string(p)?.parse::<toml::Table>()?.contains_key("model"),
        None => false,
    };
    if file_has_model || model_overridden(&a.model_flags) {
        let mut expected = cfg.clone();
        if !file_has_model {
            expected.model = ckpt.model.clone();
        }
        apply_model(&mut expected, &a.model_flags);
        checkpoint_matches(&ckpt, &expected, &ckpt_path)?;
    }
    cfg.run.model = ckpt.kind;
    cfg.model = ckpt.model.clone();
    cfg.infer.validate()?;

    let dir = if input.join(IMAGES_DIR).is_dir() { input.join(IMAGES_DIR) } else { input.clone() };
    let files = list_pngs(&dir)?;
    if files.is_empty() {
        bail!("no PNG images in {}", dir.display());
    }
    let images: Vec<Image> = files
        .iter()
        .map(|(_, p)| Ok(normalize_image(&io::read_gray(p)?)?))
        .collect::<Result<_>>()?;
    let results = segment_batch(ckpt.kind, &ckpt.model, &ckpt.weights, &images, &cfg.infer, cfg.infer.seed);
    cfg.echo(&out)?;
    let mut failures = Vec::new();
    let mut written = 0;
    for ((name, _), r) in files.iter().zip(results) {
        match r {
            Ok(seg) => {
                written += write_segmentation(&out, name, &seg)?.len();
            }
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    println!("segmented {} images, wrote {written} files to {}", files.len() - failures.len(), out.display());
    if !failures.is_empty() {
        bail!("{} images failed:\n  {}", failures.len(), failures.join("\n  "));
    }
    Ok(())
}

fn label_for(path: &Path, all: &[PathBuf]) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
    let parent = path
        .parent()
        .and_then(|p| p.file_name())
        .and_then(|s| s.to_str())
        .map(str::to_string);
    let stems_clash = all
        .iter()
        .filter(|p| p.file_stem() == path.file_stem())
        .count()
        > 1;
    match (stems_clash, parent) {
        (true, Some(parent)) => format!("{parent}/{stem}"),
        _ => stem,
    }
}

fn write_overlays(out: &Path, label: &str, set: &[SamplePair], probs: &[(String, ProbMap)], tau: f64) -> Result<()> {
    for (s, (_, p)) in set.iter().zip(probs) {
        let ov = overlay(&s.mask, &threshold(p, tau)?)?;
        ov.save(&out.join("overlays").join(label).join(format!("{}.png", s.name)))?;
    }
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref(), Profile::Standard, None, None)?;
    set_opt(&mut cfg.paths.data, a.data);
    set_opt(&mut cfg.paths.out, a.out);
    apply_infer(&mut cfg, &a.infer_flags);
    cfg.infer.validate()?;
    let data = require(cfg.paths.data.clone(), "dataset (--data)")?;
    let out = require(cfg.paths.out.clone(), "output directory (--out)")?;
    let mut models = a.models.clone();
    if models.is_empty() && a.predictions.is_none() {
        if let Some(c) = cfg.paths.checkpoint.clone() {
            models.push(c);
        } else {
            bail!("nothing to evaluate: pass --model <checkpoint> or --predictions <dir>");
        }
    }
    let pairs = load_pairs(&data)?;
    let test_set = if a.test_split { split(pairs, &cfg.split)?.2 } else { pairs };
    if test_set.is_empty() {
        bail!("test set is empty");
    }
    cfg.echo(&out)?;

    let mut reports: Vec<MetricsReport> = Vec::new();
    for path in &models {
        let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        let label = label_for(path, &models);
        let (report, segs) = evaluate_model(
            &label,
            ckpt.kind,
            &ckpt.model,
            &ckpt.weights,
            &test_set,
            &cfg.infer,
            cfg.train.loss_weights,
            a.pooled,
        )?;
        let probs: Vec<(String, ProbMap)> = test_set
            .iter()
            .zip(segs)
            .filter_map(|(s, r)| r.ok().map(|seg| (s.name.clone(), seg.prob)))
            .collect();
        if probs.len() == test_set.len() {
            write_overlays(&out, &label, &test_set, &probs, cfg.infer.tau)?;
        }
        reports.push(report);
    }
    if let Some(pred_dir) = &a.predictions {
        let dir = if pred_dir.join(PROBMAPS_DIR).is_dir() { pred_dir.join(PROBMAPS_DIR) } else { pred_dir.clone() };
        let probs: Vec<(String, ProbMap)> = test_set
            .iter()
            .map(|s| {
                let p = dir.join(format!("{}.png", s.name));
                let grid = io::read_prob(&p).with_context(|| format!("reading prediction {}", p.display()))?;
                Ok((s.name.clone(), ProbMap::new(grid)?))
            })
            .collect::<Result<_>>()?;
        let preds: Vec<Prediction> = test_set
            .iter()
            .zip(&probs)
            .map(|(s, (_, p))| Prediction {
                name: &s.name,
                truth: &s.mask,
                prob: p,
            })
            .collect();
        let label = "predictions";
        let report = evaluate_predictions(label, &preds, cfg.infer.tau, cfg.train.loss_weights, a.pooled)?;
        write_overlays(&out, label, &test_set, &probs, cfg.infer.tau)?;
        reports.push(report);
    }

    let mut rows = Vec::new();
    for r in &reports {
        let file = out.join(format!("metrics_{}.csv", r.model.replace('/', "_")));
        r.write_csv(&file)?;
        rows.push((r.model.clone(), r.mean));
        if let Some(p) = r.pooled {
            rows.push((format!("{} (pooled)", r.model), p));
        }
        for (name, err) in &r.failures {
            eprintln!("{}: {name} failed: {err}", r.model);
        }
    }
    let table = format_table(&rows);
    std::fs::write(out.join("table.txt"), &table)?;
    print!("{table}");
    let failed: usize = reports.iter().map(|r| r.failures.len()).sum();
    if failed > 0 {
        bail!("{failed} images could not be evaluated");
    }
    Ok(())
}

pub fn repro(a: ReproArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref(), Profile::Desk, Some(ModelKind::MtFlow), a.variant)?;
    set(&mut cfg.generate.count, a.count);
    set(&mut cfg.generate.size, a.size);
    set(&mut cfg.generate.seed, a.data_seed);
    apply_model(&mut cfg, &a.model_flags);
    apply_train(&mut cfg, &a.train_flags);
    apply_infer(&mut cfg, &a.infer_flags);
    set_opt(&mut cfg.paths.out, a.out);
    let out = require(cfg.paths.out.clone(), "output directory (--out)")?;
    let repro_cfg = ReproConfig {
        count: cfg.generate.count,
        size: cfg.generate.size,
        data_seed: cfg.generate.seed,
        filament: cfg.filament.clone(),
        noise: cfg.noise.clone(),
        split: cfg.split,
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        infer: cfg.infer.clone(),
    };
    cfg.echo(&out)?;
    let outcome = run_repro(&repro_cfg, &out)?;
    for run in &outcome.runs {
        println!(
            "{}: {} epochs, best epoch {:?}",
            run.kind.name(),
            run.history.len(),
            run.best_epoch
        );
    }
    print!("{}", outcome.table);
    println!("all-foreground Dice: {:.4}", outcome.all_foreground_dice);
    Ok(())
}
