//! Flow-matching path, Euler sampler and the training objective.
//!
//! The mask state moves on the straight line `x_t = (1 - t) x0 + t x1`
//! between Gaussian noise and the ground truth, so the target field is the
//! constant displacement `x1 - x0`. Training scores the one-step
//! extrapolation `sigmoid(x_t + (1 - t) v)` with weighted BCE; inference
//! integrates the learned field with forward Euler.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{sigmoid, sigmoid_f64, FlowState, Image, Mask, ProbMap, TimeScalar, VectorField};
use crate::error::{Error, Result};
use crate::model::{self, unet, Features, Layout, ModelConfig, WeightSet};
use crate::real::Real;
use crate::seed::{self, tags};

/// Probability clamp applied before logarithms.
pub const PROB_EPS: f64 = 1e-7;

fn zip_map<T: Copy, U: Copy, V>(
    a: &[T],
    b: &[U],
    mut f: impl FnMut(T, U) -> V,
) -> Vec<V> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Point on the straight path from `x0` (t = 0) to `x1` (t = 1).
pub fn interpolate<T: Real>(x0: &FlowState<T>, x1: &Mask, t: TimeScalar) -> Result<FlowState<T>> {
    x0.grid().ensure_same_shape(x1.grid())?;
    let (h, w) = x0.shape();
    if t == TimeScalar::ZERO {
        return Ok(x0.clone());
    }
    if t == TimeScalar::ONE {
        return Ok(x1.to_state());
    }
    let tt = T::from_f64_lossy(t.value());
    let keep = T::one() - tt;
    let data = zip_map(x0.as_slice(), x1.as_slice(), |a, m| {
        keep * a + if m == 1 { tt } else { T::zero() }
    });
    FlowState::from_vec(h, w, data)
}

/// `x1 - x0`, the displacement the learned field should match.
pub fn target_field<T: Real>(x0: &FlowState<T>, x1: &Mask) -> Result<VectorField<T>> {
    x0.grid().ensure_same_shape(x1.grid())?;
    let (h, w) = x0.shape();
    let data = zip_map(x0.as_slice(), x1.as_slice(), |a, m| T::from_u8(m).unwrap() - a);
    VectorField::from_vec(h, w, data)
}

/// I.i.d. standard-normal initial mask state.
pub fn sample_noise<T: Real>(height: usize, width: usize, seed: u64) -> FlowState<T> {
    let mut rng = seed::rng(seed);
    let data = (0..height * width)
        .map(|_| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    FlowState::from_vec(height, width, data).expect("normal samples are finite")
}

/// Uniform grid `t_n = n / N`, `n = 0..N-1`, with step `1 / N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EulerSchedule {
    num_steps: usize,
}

impl EulerSchedule {
    pub fn new(num_steps: usize) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::InvalidConfig("Euler schedule needs at least one step".into()));
        }
        Ok(Self { num_steps })
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn step_size(&self) -> f64 {
        1.0 / self.num_steps as f64
    }

    pub fn times(&self) -> impl Iterator<Item = TimeScalar> + '_ {
        (0..self.num_steps).map(move |n| TimeScalar::new(n as f64 / self.num_steps as f64).unwrap())
    }
}

/// Forward Euler from `x0` over the schedule; returns all `N + 1` states.
pub fn euler_integrate<T: Real, F>(
    mut field_fn: F,
    x0: &FlowState<T>,
    schedule: EulerSchedule,
) -> Result<Vec<FlowState<T>>>
where
    F: FnMut(&FlowState<T>, TimeScalar) -> Result<VectorField<T>>,
{
    let dt = T::from_f64_lossy(schedule.step_size());
    let (h, w) = x0.shape();
    let mut trajectory = Vec::with_capacity(schedule.num_steps() + 1);
    trajectory.push(x0.clone());
    for (step, t) in schedule.times().enumerate() {
        let current = trajectory.last().expect("non-empty");
        let v = match field_fn(current, t) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => return Err(Error::NonFiniteStep { step }),
            Err(e) => return Err(e),
        };
        current.grid().ensure_same_shape(v.grid())?;
        let next = zip_map(current.as_slice(), v.as_slice(), |x, d| x + dt * d);
        let next = FlowState::from_vec(h, w, next).map_err(|_| Error::NonFiniteStep { step })?;
        trajectory.push(next);
    }
    Ok(trajectory)
}

/// Single-step reconstruction `sigmoid(x_t + (1 - t) v)`.
pub fn reconstruct_train<T: Real>(
    x_t: &FlowState<T>,
    t: TimeScalar,
    v: &VectorField<T>,
) -> Result<ProbMap<T>> {
    x_t.grid().ensure_same_shape(v.grid())?;
    if t.value() >= 1.0 {
        return Err(Error::InvalidConfig("reconstruction requires t < 1".into()));
    }
    Ok(sigmoid(&extrapolate(x_t, t, v)?))
}

fn extrapolate<T: Real>(x_t: &FlowState<T>, t: TimeScalar, v: &VectorField<T>) -> Result<FlowState<T>> {
    let remaining = T::from_f64_lossy(1.0 - t.value());
    let (h, w) = x_t.shape();
    FlowState::from_vec(h, w, zip_map(x_t.as_slice(), v.as_slice(), |x, d| x + remaining * d))
}

/// Foreground and background weights for the cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w1: f64,
    pub w0: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w1: 1.0, w0: 0.25 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w1 > 0.0 && self.w0 > 0.0 && self.w1.is_finite() && self.w0.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "loss weights must be positive and finite, got w1 = {}, w0 = {}",
                self.w1, self.w0
            )))
        }
    }
}

/// Weighted BCE, `-(1/HW) sum [w1 y log p + w0 (1 - y) log(1 - p)]` with
/// `p` clamped to `[eps, 1 - eps]`.
pub fn wbce_loss<T: Real>(y: &Mask, yhat: &ProbMap<T>, w: LossWeights) -> Result<f64> {
    y.grid().ensure_same_shape(yhat.grid())?;
    let n = y.as_slice().len() as f64;
    let total: f64 = y
        .as_slice()
        .iter()
        .zip(yhat.as_slice())
        .map(|(&label, &p)| {
            let p = p.to_f64_lossy().clamp(PROB_EPS, 1.0 - PROB_EPS);
            if label == 1 {
                w.w1 * p.ln()
            } else {
                w.w0 * (1.0 - p).ln()
            }
        })
        .sum();
    Ok(-total / n)
}

/// Gradient of [`wbce_loss`] with respect to the pre-sigmoid logits.
fn wbce_logit_grad<T: Real>(y: &Mask, logits: &[T], w: LossWeights) -> (f64, Vec<T>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = y
        .as_slice()
        .iter()
        .zip(logits)
        .map(|(&label, &z)| {
            let p = sigmoid_f64(z.to_f64_lossy());
            let clamped = !(PROB_EPS..=1.0 - PROB_EPS).contains(&p);
            let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            let g = if label == 1 {
                loss -= w.w1 * pc.ln();
                if clamped { 0.0 } else { -w.w1 * (1.0 - p) }
            } else {
                loss -= w.w0 * (1.0 - pc).ln();
                if clamped { 0.0 } else { w.w0 * p }
            };
            T::from_f64_lossy(g / n)
        })
        .collect();
    (loss / n, grad)
}

/// Mean squared deviation of `v` from the target displacement.
pub fn aux_cfm_loss<T: Real>(v: &VectorField<T>, x0: &FlowState<T>, x1: &Mask) -> Result<f64> {
    let target = target_field(x0, x1)?;
    v.grid().ensure_same_shape(target.grid())?;
    let n = v.as_slice().len() as f64;
    Ok(v.as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(&a, &b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2))
        .sum::<f64>()
        / n)
}

/// Random quantities of one flow training step.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDraw<T = f32> {
    pub t: TimeScalar,
    pub x0: FlowState<T>,
}

impl<T: Real> FlowDraw<T> {
    /// `t ~ U[0, 1)` and `x0 ~ N(0, I)`, both derived from `seed`.
    pub fn sample(height: usize, width: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed::derive(seed, &[tags::FLOW_TIME]));
        let t: f64 = rng.gen_range(0.0..1.0);
        Self {
            t: TimeScalar::new(t).expect("in range"),
            x0: sample_noise(height, width, seed::derive(seed, &[tags::FLOW_NOISE])),
        }
    }

    pub fn cast<U: Real>(&self) -> FlowDraw<U> {
        FlowDraw {
            t: self.t,
            x0: self.x0.cast(),
        }
    }
}

/// Objective settings shared by every training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub weights: LossWeights,
    /// Weight on [`aux_cfm_loss`]; zero leaves plain WBCE.
    pub aux_cfm_weight: f64,
    /// Euler steps from `t` to 1 in the differentiable reconstruction.
    pub rollout_steps: usize,
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            aux_cfm_weight: 0.0,
            rollout_steps: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput<T = f32> {
    pub loss: f64,
    pub grads: WeightSet<T>,
}

fn features_of<T: Real>(image: &[T], state: &[T], h: usize, w: usize) -> Features<T> {
    let mut data = Vec::with_capacity(2 * h * w);
    data.extend_from_slice(image);
    data.extend_from_slice(state);
    Features {
        channels: 2,
        height: h,
        width: w,
        data,
    }
}

/// Loss and parameter gradients for a flow step with fixed `(t, x0)`.
pub fn flow_step_with_draw<T: Real>(
    config: &ModelConfig,
    weights: &WeightSet<T>,
    image: &Image<T>,
    x1: &Mask,
    draw: &FlowDraw<T>,
    objective: &Objective,
) -> Result<StepOutput<T>> {
    objective.weights.validate()?;
    if objective.rollout_steps == 0 {
        return Err(Error::InvalidConfig("rollout_steps must be at least 1".into()));
    }
    if draw.t.value() >= 1.0 {
        return Err(Error::InvalidConfig("training time must be < 1".into()));
    }
    let x_t = interpolate(&draw.x0, x1, draw.t)?;
    // Validates channel layout and spatial divisibility.
    model::mtflow_input(config, image, &x_t)?;
    let layout = Layout::new(config);
    WeightSet::<T>::zeros(layout.specs()).ensure_same_keys(weights)?;
    let (h, w) = image.shape();

    let steps = objective.rollout_steps;
    let dt = (1.0 - draw.t.value()) / steps as f64;
    let dt_t = T::from_f64_lossy(dt);
    let mut states = vec![x_t.as_slice().to_vec()];
    let mut tapes = Vec::with_capacity(steps);
    let mut first_field = None;
    for k in 0..steps {
        let t_k = draw.t.value() + k as f64 * dt;
        let state = states.last().expect("non-empty");
        let (v, tape) = unet::forward(&layout, weights, features_of(image.as_slice(), state, h, w), Some(t_k));
        let next = zip_map(state, &v.data, |x, d| x + dt_t * d);
        if k == 0 {
            first_field = Some(v.data);
        }
        tapes.push((tape, t_k));
        states.push(next);
    }
    let logits = states.last().expect("non-empty");
    let (mut loss, logit_grad) = wbce_logit_grad(x1, logits, objective.weights);

    let first_field = first_field.expect("at least one step");
    let mut aux_grad = None;
    if objective.aux_cfm_weight > 0.0 {
        let v = VectorField::from_vec(h, w, first_field.clone())
            .map_err(|_| Error::NonFiniteLoss { t: draw.t.value(), seed: 0 })?;
        loss += objective.aux_cfm_weight * aux_cfm_loss(&v, &draw.x0, x1)?;
        let target = target_field(&draw.x0, x1)?;
        let scale = T::from_f64_lossy(2.0 * objective.aux_cfm_weight / (h * w) as f64);
        aux_grad = Some(zip_map(&first_field, target.as_slice(), |a, b| scale * (a - b)));
    }
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { t: draw.t.value(), seed: 0 });
    }

    let mut grads = WeightSet::zeros(layout.specs());
    let mut state_grad = logit_grad;
    for (k, (tape, _)) in tapes.iter().enumerate().rev() {
        let mut field_grad: Vec<T> = state_grad.iter().map(|&g| g * dt_t).collect();
        if k == 0 {
            if let Some(extra) = &aux_grad {
                for (g, &e) in field_grad.iter_mut().zip(extra) {
                    *g = *g + e;
                }
            }
        }
        let grad_out = Features {
            channels: 1,
            height: h,
            width: w,
            data: field_grad,
        };
        let (g, input_grad) = unet::backward(&layout, weights, tape, &grad_out);
        grads.add_scaled(&g, T::one());
        if k > 0 {
            let (_, through_state) = input_grad.split(1);
            for (s, &d) in state_grad.iter_mut().zip(&through_state.data) {
                *s = *s + d;
            }
        }
    }
    Ok(StepOutput { loss, grads })
}

/// One flow-matching training step: draws `(t, x0)` from `seed`, then
/// scores the reconstruction against `x1`.
pub fn training_step(
    config: &ModelConfig,
    weights: &WeightSet<f32>,
    image: &Image<f32>,
    x1: &Mask,
    seed: u64,
    objective: &Objective,
) -> Result<StepOutput<f32>> {
    let (h, w) = image.shape();
    let draw = FlowDraw::sample(h, w, seed);
    flow_step_with_draw(config, weights, image, x1, &draw, objective).map_err(|e| match e {
        Error::NonFiniteLoss { t, .. } => Error::NonFiniteLoss { t, seed },
        other => other,
    })
}

/// Loss and gradients for the single-pass baseline.
pub fn baseline_step<T: Real>(
    config: &ModelConfig,
    weights: &WeightSet<T>,
    image: &Image<T>,
    y: &Mask,
    loss_weights: LossWeights,
) -> Result<StepOutput<T>> {
    loss_weights.validate()?;
    image.grid().ensure_same_shape(y.grid())?;
    let input = model::baseline_input(config, image)?;
    let layout = Layout::new(config);
    WeightSet::<T>::zeros(layout.specs()).ensure_same_keys(weights)?;
    let (out, tape) = unet::forward(&layout, weights, input, None);
    let (loss, logit_grad) = wbce_logit_grad(y, &out.data, loss_weights);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { t: 0.0, seed: 0 });
    }
    let grad_out = Features {
        data: logit_grad,
        ..out
    };
    let (grads, _) = unet::backward(&layout, weights, &tape, &grad_out);
    Ok(StepOutput { loss, grads })
}

/// Validation loss of the flow model at a fixed draw (no gradients).
pub fn flow_loss_with_draw<T: Real>(
    config: &ModelConfig,
    weights: &WeightSet<T>,
    image: &Image<T>,
    x1: &Mask,
    draw: &FlowDraw<T>,
    objective: &Objective,
) -> Result<f64> {
    let x_t = interpolate(&draw.x0, x1, draw.t)?;
    let steps = objective.rollout_steps.max(1);
    let dt = (1.0 - draw.t.value()) / steps as f64;
    let mut state = x_t;
    let mut first = None;
    for k in 0..steps {
        let t_k = TimeScalar::new(draw.t.value() + k as f64 * dt)?;
        let v = model::forward_mtflow(config, weights, image, &state, t_k)?;
        let dt_t = T::from_f64_lossy(dt);
        let (h, w) = state.shape();
        state = FlowState::from_vec(h, w, zip_map(state.as_slice(), v.as_slice(), |x, d| x + dt_t * d))?;
        if k == 0 {
            first = Some(v);
        }
    }
    let mut loss = wbce_loss(x1, &sigmoid(&state), objective.weights)?;
    if objective.aux_cfm_weight > 0.0 {
        loss += objective.aux_cfm_weight * aux_cfm_loss(&first.expect("one step"), &draw.x0, x1)?;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Grid;
    use proptest::prelude::*;

    fn mask_from(bits: &[u8], h: usize, w: usize) -> Mask {
        Mask::from_vec(h, w, bits.to_vec()).unwrap()
    }

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let x0 = FlowState::filled(2, 2, -1.0f32);
        let x1 = Mask::ones(2, 2);
        assert_eq!(interpolate(&x0, &x1, TimeScalar::ZERO).unwrap(), x0);
        assert_eq!(interpolate(&x0, &x1, TimeScalar::ONE).unwrap(), x1.to_state());
        let mid = interpolate(&x0, &x1, TimeScalar::new(0.25).unwrap()).unwrap();
        assert!(mid.as_slice().iter().all(|&v| v == -0.5));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let x0 = FlowState::filled(2, 2, 0.0f32);
        let x1 = Mask::ones(2, 3);
        assert!(matches!(interpolate(&x0, &x1, TimeScalar::ZERO), Err(Error::ShapeMismatch { .. })));
        assert!(target_field(&x0, &x1).is_err());
        assert!(aux_cfm_loss(&VectorField::filled(2, 2, 0.0f32), &x0, &x1).is_err());
    }

    #[test]
    fn target_field_cases() {
        let x1 = mask_from(&[0, 1, 1, 0], 2, 2);
        let same = x1.to_state::<f32>();
        assert!(target_field(&same, &x1).unwrap().as_slice().iter().all(|&v| v == 0.0));
        let zero = FlowState::filled(2, 2, 0.0f32);
        let ones = Mask::ones(2, 2);
        assert!(target_field(&zero, &ones).unwrap().as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn noise_is_seeded_and_standard() {
        let a: FlowState = sample_noise(256, 256, 9);
        assert_eq!(a, sample_noise(256, 256, 9));
        let n = a.as_slice().len() as f64;
        let mean = a.as_slice().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = a.as_slice().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 4.0 / n.sqrt(), "mean {mean}");
        assert!((0.9..=1.1).contains(&var), "var {var}");
    }

    #[test]
    fn schedule_grid() {
        let s = EulerSchedule::new(8).unwrap();
        let times: Vec<f64> = s.times().map(TimeScalar::value).collect();
        assert_eq!(times.len(), 8);
        assert_eq!(times[0], 0.0);
        assert_eq!(times[7], 7.0 / 8.0);
        let total: f64 = (0..8).map(|_| s.step_size()).sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(EulerSchedule::new(0).is_err());
    }

    #[test]
    fn single_euler_step() {
        let x0 = FlowState::from_vec(1, 2, vec![0.5f32, -1.0]).unwrap();
        let traj = euler_integrate(
            |x: &FlowState, _| VectorField::from_vec(1, 2, x.as_slice().iter().map(|v| v * 2.0).collect()),
            &x0,
            EulerSchedule::new(1).unwrap(),
        )
        .unwrap();
        assert_eq!(traj.len(), 2);
        assert_eq!(traj[1].as_slice(), &[1.5, -3.0]);
    }

    #[test]
    fn euler_reports_failing_step() {
        let x0 = FlowState::filled(1, 1, 0.0f32);
        let mut calls = 0;
        let err = euler_integrate(
            |_: &FlowState, _| {
                calls += 1;
                if calls == 3 {
                    VectorField::from_vec(1, 1, vec![f32::NAN])
                } else {
                    Ok(VectorField::filled(1, 1, 1.0))
                }
            },
            &x0,
            EulerSchedule::new(5).unwrap(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteStep { step: 2 }));
    }

    #[test]
    fn reconstruct_cases() {
        let x0 = FlowState::from_vec(1, 3, vec![0.3f32, -1.2, 2.0]).unwrap();
        let x1 = mask_from(&[1, 0, 1], 1, 3);
        let t = TimeScalar::new(0.6).unwrap();
        let xt = interpolate(&x0, &x1, t).unwrap();
        let v = target_field(&x0, &x1).unwrap();
        let p = reconstruct_train(&xt, t, &v).unwrap();
        let expected = sigmoid(&x1.to_state::<f32>());
        for (a, b) in p.as_slice().iter().zip(expected.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
        let zero = VectorField::filled(1, 3, 0.0f32);
        assert_eq!(reconstruct_train(&xt, t, &zero).unwrap(), sigmoid(&xt));
        let at0 = reconstruct_train(&x0, TimeScalar::ZERO, &v).unwrap();
        assert_eq!(at0, sigmoid(&extrapolate(&x0, TimeScalar::ZERO, &v).unwrap()));
        assert!(reconstruct_train(&xt, TimeScalar::ONE, &v).is_err());
    }

    #[test]
    fn wbce_reference_values() {
        let ones = Mask::ones(4, 4);
        let half = ProbMap::filled(4, 4, 0.5f64);
        let loss = wbce_loss(&ones, &half, LossWeights::default()).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-9);

        let y = mask_from(&[1, 0, 0, 1], 2, 2);
        let perfect = ProbMap::from_vec(2, 2, vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let loss = wbce_loss(&y, &perfect, LossWeights::default()).unwrap();
        assert!(loss >= 0.0 && loss < 1e-6, "{loss}");
    }

    #[test]
    fn wbce_logit_gradient_matches_differences() {
        let y = mask_from(&[1, 0, 1, 0], 2, 2);
        let z = [0.4f64, -1.3, 2.2, 0.1];
        let w = LossWeights::default();
        let (loss, g) = wbce_logit_grad(&y, &z, w);
        let eval = |zz: &[f64]| {
            let p = ProbMap::from_vec(2, 2, zz.iter().map(|&v| sigmoid_f64(v)).collect()).unwrap();
            wbce_loss(&y, &p, w).unwrap()
        };
        assert!((loss - eval(&z)).abs() < 1e-12);
        for i in 0..4 {
            let mut hi = z;
            let mut lo = z;
            hi[i] += 1e-6;
            lo[i] -= 1e-6;
            let fd = (eval(&hi) - eval(&lo)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn aux_loss_cases() {
        let x0 = FlowState::filled(2, 2, 0.0f32);
        let x1 = Mask::ones(2, 2);
        let v = target_field(&x0, &x1).unwrap();
        assert_eq!(aux_cfm_loss(&v, &x0, &x1).unwrap(), 0.0);
        let zero = VectorField::filled(2, 2, 0.0f32);
        assert_eq!(aux_cfm_loss(&zero, &x0, &x1).unwrap(), 1.0);
    }

    #[test]
    fn aux_loss_matches_double_loop() {
        let mut rng = seed::rng(5);
        for _ in 0..20 {
            let v: Vec<f64> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let x0: Vec<f64> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let x1: Vec<u8> = (0..16).map(|_| rng.gen_range(0..2)).collect();
            let mut acc = 0.0;
            for r in 0..4 {
                for c in 0..4 {
                    let i = r * 4 + c;
                    let d = v[i] - (x1[i] as f64 - x0[i]);
                    acc += d * d;
                }
            }
            let expected = acc / 16.0;
            let got = aux_cfm_loss(
                &VectorField::from_vec(4, 4, v).unwrap(),
                &FlowState::from_vec(4, 4, x0).unwrap(),
                &Mask::from_vec(4, 4, x1).unwrap(),
            )
            .unwrap();
            assert!((got - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn flow_draw_is_seeded() {
        let a: FlowDraw = FlowDraw::sample(8, 8, 3);
        let b: FlowDraw = FlowDraw::sample(8, 8, 3);
        assert_eq!(a, b);
        assert!(a.t.value() < 1.0);
        assert_ne!(a, FlowDraw::sample(8, 8, 4));
    }

    #[test]
    fn frozen_draw_step_is_deterministic() {
        let cfg = ModelConfig {
            base_filters: 4,
            depth: 2,
            groupnorm_groups: 2,
            time_embed_dim: 8,
            mlp_hidden_dim: 8,
            in_channels: 2,
            out_channels: 1,
            time_conditioning: true,
        };
        let w = model::init_weights(&cfg, 1).unwrap();
        let img = Image::from_unit(Grid::from_fn(16, 16, |r, c| ((r + c) % 5) as f32 / 4.0)).unwrap();
        let y = Mask::binarize(&Grid::from_fn(16, 16, |r, c| u8::from(r == c)));
        let draw = FlowDraw::sample(16, 16, 77);
        let obj = Objective::default();
        let a = flow_step_with_draw(&cfg, &w, &img, &y, &draw, &obj).unwrap();
        let b = flow_step_with_draw(&cfg, &w, &img, &y, &draw, &obj).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.grads, b.grads);
        let c = training_step(&cfg, &w, &img, &y, 77, &obj).unwrap();
        assert_eq!(c.loss, a.loss);
        let via_forward = flow_loss_with_draw(&cfg, &w, &img, &y, &draw, &obj).unwrap();
        assert!((via_forward - a.loss).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn oracle_field_recovers_mask(x0 in prop::collection::vec(-3f64..3.0, 9), bits in prop::collection::vec(0u8..2, 9), t in 0.0f64..0.999) {
            let x0 = FlowState::from_vec(3, 3, x0).unwrap();
            let x1 = Mask::from_vec(3, 3, bits).unwrap();
            let t = TimeScalar::new(t).unwrap();
            let xt = interpolate(&x0, &x1, t).unwrap();
            let v = target_field(&x0, &x1).unwrap();
            let z = extrapolate(&xt, t, &v).unwrap();
            for (a, &m) in z.as_slice().iter().zip(x1.as_slice()) {
                prop_assert!((a - m as f64).abs() < 1e-6);
            }
        }

        #[test]
        fn wbce_is_nonnegative(p in prop::collection::vec(0f64..=1.0, 16), bits in prop::collection::vec(0u8..2, 16), w1 in 0.01f64..5.0, w0 in 0.01f64..5.0) {
            let y = Mask::from_vec(4, 4, bits).unwrap();
            let p = ProbMap::from_vec(4, 4, p).unwrap();
            let loss = wbce_loss(&y, &p, LossWeights { w1, w0 }).unwrap();
            prop_assert!(loss >= 0.0);
        }
    }
}
