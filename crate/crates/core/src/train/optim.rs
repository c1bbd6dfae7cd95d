use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::WeightSet;
use crate::real::Real;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Cosine annealing from `lr0` to `eta_min` over `t_max` epochs, held at
/// `eta_min` afterwards.
pub fn cosine_lr(epoch: usize, lr0: f64, eta_min: f64, t_max: usize) -> f64 {
    if t_max == 0 {
        return eta_min;
    }
    let progress = epoch.min(t_max) as f64 / t_max as f64;
    eta_min + (lr0 - eta_min) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: WeightSet<T>,
    pub v: WeightSet<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(weights: &WeightSet<T>) -> Self {
        Self {
            m: weights.zeros_like(),
            v: weights.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW step in place. Weight decay is decoupled: `theta *= 1 - lr*wd`
/// before the bias-corrected adaptive update.
pub fn adamw_update<T: Real>(
    weights: &mut WeightSet<T>,
    grads: &WeightSet<T>,
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    weights.ensure_same_keys(grads)?;
    weights.ensure_same_keys(&state.m)?;
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient(name.to_string()));
    }
    state.step += 1;
    let step = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(step);
    let bc2 = 1.0 - ADAM_BETA2.powi(step);
    let decay = 1.0 - lr * weight_decay;
    let (b1, b2) = (ADAM_BETA1, ADAM_BETA2);
    for (i, p) in weights.params_mut().iter_mut().enumerate() {
        let g = &grads.params()[i].data;
        let m = &mut state.m.params_mut()[i].data;
        let v = &mut state.v.params_mut()[i].data;
        for j in 0..p.data.len() {
            let gj = g[j].to_f64_lossy();
            let mj = b1 * m[j].to_f64_lossy() + (1.0 - b1) * gj;
            let vj = b2 * v[j].to_f64_lossy() + (1.0 - b2) * gj * gj;
            m[j] = T::from_f64_lossy(mj);
            v[j] = T::from_f64_lossy(vj);
            let m_hat = mj / bc1;
            let v_hat = vj / bc2;
            let theta = p.data[j].to_f64_lossy() * decay - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            p.data[j] = T::from_f64_lossy(theta);
        }
    }
    Ok(())
}

/// Tracks the best validation loss; an epoch counts as an improvement only
/// if it is strictly lower.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_loss: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_loss: None,
            best_epoch: None,
            epochs_since_improvement: 0,
        }
    }

    /// Records an epoch's validation loss; returns whether it improved.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if self.best_loss.map_or(true, |b| loss < b) {
            self.best_loss = Some(loss);
            self.best_epoch = Some(epoch);
            self.epochs_since_improvement = 0;
            true
        } else {
            self.epochs_since_improvement += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.epochs_since_improvement >= self.patience
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Param;
    use proptest::prelude::*;

    fn scalar(v: f64) -> WeightSet<f64> {
        WeightSet::from_params(vec![Param {
            name: "p".into(),
            shape: vec![1],
            data: vec![v],
        }])
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 1e-4, 0.0, 100), 1e-4);
        assert!(cosine_lr(100, 1e-4, 0.0, 100).abs() < 1e-20);
        assert!((cosine_lr(50, 1e-4, 0.0, 100) - 5e-5).abs() < 1e-18);
        assert_eq!(cosine_lr(250, 1e-4, 1e-6, 100), cosine_lr(100, 1e-4, 1e-6, 100));
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut w = scalar(0.7);
        let g = scalar(0.0);
        let mut st = AdamState::new(&w);
        adamw_update(&mut w, &g, &mut st, 1e-3, 0.0).unwrap();
        assert_eq!(w.params()[0].data[0], 0.7);
    }

    #[test]
    fn zero_gradient_applies_pure_decay() {
        let mut w = scalar(0.7);
        let g = scalar(0.0);
        let mut st = AdamState::new(&w);
        adamw_update(&mut w, &g, &mut st, 1e-2, 0.1).unwrap();
        assert_eq!(w.params()[0].data[0], 0.7 * (1.0 - 1e-2 * 0.1));
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut w = scalar(0.7);
        let g = scalar(f64::NAN);
        let mut st = AdamState::new(&w);
        match adamw_update(&mut w, &g, &mut st, 1e-3, 0.0) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "p"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn patience_walkthrough() {
        let mut es = EarlyStopping::new(2);
        let mut stopped_at = None;
        for (e, l) in [1.0, 0.9, 0.95, 0.96].into_iter().enumerate() {
            es.observe(e, l);
            if es.should_stop() {
                stopped_at = Some(e);
                break;
            }
        }
        assert_eq!(stopped_at, Some(3));
        assert_eq!(es.best_epoch, Some(1));
    }

    #[test]
    fn equal_loss_is_not_improvement() {
        let mut es = EarlyStopping::new(5);
        assert!(es.observe(0, 1.0));
        assert!(!es.observe(1, 1.0));
        assert_eq!(es.best_epoch, Some(0));
    }

    proptest! {
        #[test]
        fn lr_non_increasing(lr0 in 1e-6f64..1.0, frac in 0.0f64..1.0, t_max in 1usize..300) {
            let eta = lr0 * frac;
            for e in 0..=t_max {
                prop_assert!(cosine_lr(e + 1, lr0, eta, t_max) <= cosine_lr(e, lr0, eta, t_max));
            }
        }

        #[test]
        fn best_is_minimum(losses in prop::collection::vec(0.0f64..10.0, 1..40)) {
            let mut es = EarlyStopping::new(1000);
            for (e, &l) in losses.iter().enumerate() {
                es.observe(e, l);
            }
            let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(es.best_loss, Some(min));
        }
    }
}
