//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use mtflow::flow::{self, FlowDraw, Objective};
use mtflow::model::{self, ModelConfig, WeightSet};
use mtflow::{Grid, Image, Mask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// depth 2, 4 base filters; GroupNorm(8) cannot split 4 channels, so 2 groups.
pub fn tiny_flow_config() -> ModelConfig {
    ModelConfig {
        base_filters: 4,
        depth: 2,
        groupnorm_groups: 2,
        time_embed_dim: 8,
        mlp_hidden_dim: 8,
        in_channels: 2,
        out_channels: 1,
        time_conditioning: true,
    }
}

pub fn random_image(h: usize, w: usize, rng: &mut impl Rng) -> Image<f64> {
    Image::from_unit(Grid::from_fn(h, w, |_, _| rng.gen_range(0.0..1.0))).unwrap()
}

pub fn random_mask(h: usize, w: usize, p: f64, rng: &mut impl Rng) -> Mask {
    Mask::from_vec(h, w, (0..h * w).map(|_| u8::from(rng.gen_bool(p))).collect()).unwrap()
}

pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

/// Central differences on `samples_per_tensor` entries of every tensor.
/// Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn check_gradients(
    config: &ModelConfig,
    weights: &WeightSet<f64>,
    analytic: &WeightSet<f64>,
    loss: impl Fn(&WeightSet<f64>) -> f64,
    samples_per_tensor: usize,
    step: f64,
    floor: f64,
    seed: u64,
) -> GradCheck {
    let _ = config;
    let mut rng = rng(seed);
    let mut probe = weights.clone();
    let mut out = GradCheck { checked: 0, max_rel_error: 0.0, worst: String::new() };
    for (pi, param) in weights.params().iter().enumerate() {
        let n = param.data.len();
        let picks: Vec<usize> = if n <= samples_per_tensor {
            (0..n).collect()
        } else {
            (0..samples_per_tensor).map(|_| rng.gen_range(0..n)).collect()
        };
        for i in picks {
            let orig = param.data[i];
            probe.params_mut()[pi].data[i] = orig + step;
            let hi = loss(&probe);
            probe.params_mut()[pi].data[i] = orig - step;
            let lo = loss(&probe);
            probe.params_mut()[pi].data[i] = orig;
            let numeric = (hi - lo) / (2.0 * step);
            let a = analytic.params()[pi].data[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            out.checked += 1;
            if rel > out.max_rel_error {
                out.max_rel_error = rel;
                out.worst = format!("{}[{i}] analytic {a:e} numeric {numeric:e}", param.name);
            }
        }
    }
    out
}

/// Flow-model gradient check on the tiny configuration in f64.
pub fn flow_gradient_check(samples_per_tensor: usize, objective: &Objective) -> GradCheck {
    let cfg = tiny_flow_config();
    let mut r = rng(2024);
    let weights: WeightSet<f64> = model::init_weights(&cfg, 31).unwrap().cast();
    // Perturb biases and norm affines away from their init so every group is exercised.
    let mut weights = weights;
    for p in weights.params_mut() {
        if p.name.ends_with(".bias") || p.name.contains(".norm") {
            for v in &mut p.data {
                *v += r.gen_range(-0.3..0.3);
            }
        }
    }
    let image = random_image(16, 16, &mut r);
    let mask = random_mask(16, 16, 0.2, &mut r);
    let draw: FlowDraw<f64> = FlowDraw::sample(16, 16, 99);
    let step = flow::flow_step_with_draw(&cfg, &weights, &image, &mask, &draw, objective).unwrap();
    check_gradients(
        &cfg,
        &weights,
        &step.grads,
        |w| flow::flow_loss_with_draw(&cfg, w, &image, &mask, &draw, objective).unwrap(),
        samples_per_tensor,
        1e-5,
        1e-6,
        7,
    )
}

/// Confusion counts by explicit row/column traversal.
pub fn oracle_counts(y: &Mask, yhat: &Mask) -> [u64; 4] {
    let (h, w) = y.shape();
    let mut c = [0u64; 4];
    for r in 0..h {
        for col in 0..w {
            let truth = y.grid().get(r, col) == 1;
            let pred = yhat.grid().get(r, col) == 1;
            let slot = match (truth, pred) {
                (true, true) => 0,
                (false, true) => 1,
                (true, false) => 2,
                (false, false) => 3,
            };
            c[slot] += 1;
        }
    }
    c
}

/// Dice, sensitivity, precision and MCC from the definitions. An image with
/// no foreground in either mask scores 1 on the first three; MCC is 0 when
/// any marginal is empty.
pub fn oracle_metrics(y: &Mask, yhat: &Mask) -> [f64; 4] {
    let [tp, fp, fn_, tn] = oracle_counts(y, yhat).map(|v| v as f64);
    let empty = tp + fp + fn_ == 0.0;
    let frac = |num: f64, den: f64| {
        if den > 0.0 {
            num / den
        } else if empty {
            1.0
        } else {
            0.0
        }
    };
    let dice = frac(2.0 * tp, 2.0 * tp + fp + fn_);
    let sens = frac(tp, tp + fn_);
    let prec = frac(tp, tp + fp);
    let prod = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    let mcc = if prod == 0.0 { 0.0 } else { (tp * tn - fp * fn_) / prod.sqrt() };
    [dice, sens, prec, mcc]
}

/// Precision-recall area by thresholding at every distinct score, highest
/// first, and summing `(R_k - R_{k-1}) * P_k`.
pub fn brute_force_pr_auc(y: &[u8], p: &[f32]) -> f64 {
    let mut thresholds: Vec<f32> = p.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let positives = y.iter().filter(|&&v| v == 1).count() as f64;
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for thr in thresholds {
        let mut tp = 0.0;
        let mut predicted = 0.0;
        for (&label, &score) in y.iter().zip(p) {
            if score >= thr {
                predicted += 1.0;
                if label == 1 {
                    tp += 1.0;
                }
            }
        }
        let recall = tp / positives;
        area += (recall - prev_recall) * (tp / predicted);
        prev_recall = recall;
    }
    area
}

/// Unweighted binary cross-entropy, averaged over pixels.
pub fn bce_oracle(y: &[u8], p: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&label, &q) in y.iter().zip(p) {
        total += if label == 1 { -q.ln() } else { -(1.0 - q).ln() };
    }
    total / y.len() as f64
}
