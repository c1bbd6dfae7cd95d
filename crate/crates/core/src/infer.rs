//! Inference: Euler integration of the learned field from seeded noise,
//! or a single forward pass for the baseline.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{sigmoid, threshold, validate_tau, FlowState, Image, Mask, ProbMap};
use crate::error::{Error, Result};
use crate::flow::{euler_integrate, sample_noise, EulerSchedule};
use crate::io;
use crate::model::{self, ModelConfig, WeightSet};
use crate::seed;
use crate::train::ModelKind;

pub const PROBMAPS_DIR: &str = "probmaps";
pub const MASKS_DIR: &str = "masks";
pub const TRAJECTORY_DIR: &str = "trajectory";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub num_steps: usize,
    pub seed: u64,
    pub tau: f64,
    pub emit_trajectory: bool,
    /// Number of noise draws whose probability maps are averaged.
    pub ensemble: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            num_steps: 10,
            seed: 0,
            tau: 0.5,
            emit_trajectory: false,
            ensemble: 1,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        EulerSchedule::new(self.num_steps)?;
        validate_tau(self.tau)?;
        if self.ensemble == 0 {
            return Err(Error::InvalidConfig("ensemble size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub prob: ProbMap,
    pub mask: Mask,
    /// All `N + 1` states of the first noise draw, when requested.
    pub trajectory: Option<Vec<FlowState>>,
}

/// Noise seed of ensemble member `k`; member 0 uses the configured seed.
fn member_seed(seed: u64, k: usize) -> u64 {
    if k == 0 {
        seed
    } else {
        seed::derive(seed, &[k as u64])
    }
}

/// Integrates `dx/dt = v(x, t | image)` from `x0 = noise(seed)` and
/// thresholds `sigmoid(x_N)`.
pub fn segment(
    config: &ModelConfig,
    weights: &WeightSet<f32>,
    image: &Image,
    cfg: &InferenceConfig,
) -> Result<Segmentation> {
    cfg.validate()?;
    let (h, w) = image.shape();
    config.check_input_size(h, w)?;
    let schedule = EulerSchedule::new(cfg.num_steps)?;
    let mut prob_sum = vec![0.0f64; h * w];
    let mut trajectory = None;
    for k in 0..cfg.ensemble {
        let x0: FlowState = sample_noise(h, w, member_seed(cfg.seed, k));
        let states = euler_integrate(
            |x, t| model::forward_mtflow(config, weights, image, x, t),
            &x0,
            schedule,
        )?;
        let p = sigmoid(states.last().expect("N + 1 states"));
        for (s, &v) in prob_sum.iter_mut().zip(p.as_slice()) {
            *s += f64::from(v);
        }
        if k == 0 && cfg.emit_trajectory {
            trajectory = Some(states);
        }
    }
    let prob = if cfg.ensemble == 1 {
        ProbMap::from_vec(h, w, prob_sum.iter().map(|&v| v as f32).collect())?
    } else {
        let k = cfg.ensemble as f64;
        ProbMap::from_vec(h, w, prob_sum.iter().map(|&v| (v / k) as f32).collect())?
    };
    let mask = threshold(&prob, cfg.tau)?;
    Ok(Segmentation { prob, mask, trajectory })
}

/// Dispatches on model kind; the baseline ignores the step count and seed.
pub fn predict(
    kind: ModelKind,
    config: &ModelConfig,
    weights: &WeightSet<f32>,
    image: &Image,
    cfg: &InferenceConfig,
) -> Result<Segmentation> {
    match kind {
        ModelKind::MtFlow => segment(config, weights, image, cfg),
        ModelKind::Baseline => {
            cfg.validate()?;
            let prob = model::forward_baseline(config, weights, image)?;
            let mask = threshold(&prob, cfg.tau)?;
            Ok(Segmentation {
                prob,
                mask,
                trajectory: None,
            })
        }
    }
}

/// Segments every image with seed `base_seed + index`, in parallel. Each
/// entry carries its own result so one failure does not stop the rest.
pub fn segment_batch(
    kind: ModelKind,
    config: &ModelConfig,
    weights: &WeightSet<f32>,
    images: &[Image],
    cfg: &InferenceConfig,
    base_seed: u64,
) -> Vec<Result<Segmentation>> {
    images
        .par_iter()
        .enumerate()
        .map(|(i, img)| predict(kind, config, weights, img, &cfg.with_seed(base_seed.wrapping_add(i as u64))))
        .collect()
}

/// Writes `probmaps/<name>.png` (16-bit), `masks/<name>.png` (8-bit) and,
/// if present, `trajectory/<name>/step_<n>.png` (sigmoid of each state).
pub fn write_segmentation(out_dir: &Path, name: &str, seg: &Segmentation) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let prob_path = out_dir.join(PROBMAPS_DIR).join(format!("{name}.png"));
    io::write_gray16(&prob_path, seg.prob.grid())?;
    written.push(prob_path);
    let mask_path = out_dir.join(MASKS_DIR).join(format!("{name}.png"));
    io::write_mask(&mask_path, &seg.mask)?;
    written.push(mask_path);
    if let Some(states) = &seg.trajectory {
        let digits = (states.len() - 1).to_string().len().max(2);
        for (n, state) in states.iter().enumerate() {
            let path = out_dir
                .join(TRAJECTORY_DIR)
                .join(name)
                .join(format!("step_{n:0digits$}.png"));
            io::write_gray16(&path, sigmoid(state).grid())?;
            written.push(path);
        }
    }
    Ok(written)
}
