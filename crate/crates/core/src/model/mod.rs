//! Time-conditioned U-Net vector-field predictor and the single-pass
//! baseline built from the same blocks.
//!
//! Block structure: `conv3x3 -> GroupNorm -> SiLU`, then the block's time
//! projection is added channelwise, then `conv3x3 -> GroupNorm -> SiLU`.
//! The encoder max-pools after every level; the decoder upsamples with
//! nearest neighbour followed by a 3x3 convolution and concatenates the
//! matching encoder output before its block. A 1x1 head produces the raw
//! field. The baseline drops the time MLP and every time projection.

pub mod layers;
pub mod unet;
pub mod weights;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{sigmoid, FlowState, Image, ProbMap, TimeScalar, VectorField};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::seed;

pub use layers::Features;
pub use unet::{Layout, Tape};
pub use weights::{Param, ParamSpec, WeightSet};

/// Frequency multiplier applied to the continuous flow time.
pub const TIME_SCALE: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub base_filters: usize,
    pub depth: usize,
    pub groupnorm_groups: usize,
    pub time_embed_dim: usize,
    pub mlp_hidden_dim: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub time_conditioning: bool,
}

impl ModelConfig {
    /// Full-size flow model: 64 filters over four levels, GroupNorm(8).
    pub fn mtflow() -> Self {
        Self {
            base_filters: 64,
            depth: 4,
            groupnorm_groups: 8,
            time_embed_dim: 128,
            mlp_hidden_dim: 256,
            in_channels: 2,
            out_channels: 1,
            time_conditioning: true,
        }
    }

    /// The same backbone with one input channel and no time path.
    pub fn baseline() -> Self {
        Self {
            in_channels: 1,
            time_conditioning: false,
            ..Self::mtflow()
        }
    }

    pub fn with_base_filters(mut self, base_filters: usize) -> Self {
        self.base_filters = base_filters;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.groupnorm_groups == 0 || self.base_filters % self.groupnorm_groups != 0 {
            return fail(format!(
                "base_filters {} not divisible by groupnorm_groups {}",
                self.base_filters, self.groupnorm_groups
            ));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return fail("channel counts must be positive".into());
        }
        if self.time_conditioning {
            if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
                return fail(format!("time_embed_dim {} must be even and >= 2", self.time_embed_dim));
            }
            if self.mlp_hidden_dim == 0 {
                return fail("mlp_hidden_dim must be positive".into());
            }
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn check_input_size(&self, height: usize, width: usize) -> Result<()> {
        let m = self.size_multiple();
        if height % m != 0 || width % m != 0 {
            return Err(Error::InvalidDimensions {
                height,
                width,
                reason: format!("must be divisible by {m} for depth {}", self.depth),
            });
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).specs().iter().map(ParamSpec::numel).sum()
    }

    /// Stable fingerprint of the architecture, used to match checkpoints.
    pub fn fingerprint(&self) -> u64 {
        let text = serde_json::to_string(self).expect("config serializes");
        seed::fnv1a(text.as_bytes())
    }
}

pub(crate) fn sinusoidal_embed_f64(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let denom = (half.max(2) - 1) as f64;
    let scaled = t * TIME_SCALE;
    let freqs: Vec<f64> = (0..half)
        .map(|k| (-(k as f64) * 10000f64.ln() / denom).exp())
        .collect();
    freqs
        .iter()
        .map(|w| (scaled * w).sin())
        .chain(freqs.iter().map(|w| (scaled * w).cos()))
        .collect()
}

/// Sin/cos features of `t`: frequencies `1000 * 10000^(-k / (dim/2 - 1))`,
/// sines first.
pub fn sinusoidal_embed(t: TimeScalar, dim: usize) -> Result<Vec<f64>> {
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "embedding dimension {dim} must be even and >= 2"
        )));
    }
    Ok(sinusoidal_embed_f64(t.value(), dim))
}

/// Two dense layers with SiLU between them.
pub fn time_mlp<T: Real>(weights: &WeightSet<T>, embed: &[T]) -> Result<Vec<T>> {
    let lookup = |name: &str| {
        weights
            .get(name)
            .ok_or_else(|| Error::InvalidConfig(format!("missing parameter {name}")))
    };
    let (w1, b1) = (lookup("time_mlp.fc1.weight")?, lookup("time_mlp.fc1.bias")?);
    let (w2, b2) = (lookup("time_mlp.fc2.weight")?, lookup("time_mlp.fc2.bias")?);
    if w1.shape[1] != embed.len() {
        return Err(Error::InvalidConfig(format!(
            "embedding length {} does not match time_embed_dim {}",
            embed.len(),
            w1.shape[1]
        )));
    }
    let hidden = layers::silu_vec(&layers::linear_forward(&w1.data, &b1.data, embed));
    Ok(layers::linear_forward(&w2.data, &b2.data, &hidden))
}

fn stack<T: Real>(planes: &[&[T]], height: usize, width: usize) -> Features<T> {
    let mut data = Vec::with_capacity(planes.len() * height * width);
    for p in planes {
        data.extend_from_slice(p);
    }
    Features {
        channels: planes.len(),
        height,
        width,
        data,
    }
}

/// Network input for the flow model: image then state.
pub(crate) fn mtflow_input<T: Real>(
    config: &ModelConfig,
    image: &Image<T>,
    state: &FlowState<T>,
) -> Result<Features<T>> {
    if !config.time_conditioning || config.in_channels != 2 {
        return Err(Error::InvalidConfig(
            "flow model needs two input channels and time conditioning".into(),
        ));
    }
    image.grid().ensure_same_shape(state.grid())?;
    let (h, w) = image.shape();
    config.check_input_size(h, w)?;
    Ok(stack(&[image.as_slice(), state.as_slice()], h, w))
}

pub(crate) fn baseline_input<T: Real>(config: &ModelConfig, image: &Image<T>) -> Result<Features<T>> {
    if config.time_conditioning || config.in_channels != 1 {
        return Err(Error::InvalidConfig(
            "baseline needs one input channel and no time conditioning".into(),
        ));
    }
    let (h, w) = image.shape();
    config.check_input_size(h, w)?;
    Ok(stack(&[image.as_slice()], h, w))
}

fn check_weights<T: Real>(layout: &Layout, weights: &WeightSet<T>) -> Result<()> {
    let expected = WeightSet::<T>::zeros(layout.specs());
    expected.ensure_same_keys(weights)
}

/// Predicts the vector field at `(state, t)` conditioned on `image`.
pub fn forward_mtflow<T: Real>(
    config: &ModelConfig,
    weights: &WeightSet<T>,
    image: &Image<T>,
    state: &FlowState<T>,
    t: TimeScalar,
) -> Result<VectorField<T>> {
    let input = mtflow_input(config, image, state)?;
    let layout = Layout::new(config);
    check_weights(&layout, weights)?;
    let (h, w) = image.shape();
    let (out, _) = unet::forward(&layout, weights, input, Some(t.value()));
    VectorField::from_vec(h, w, out.data)
}

/// Single-pass segmentation through the shared backbone.
pub fn forward_baseline<T: Real>(
    config: &ModelConfig,
    weights: &WeightSet<T>,
    image: &Image<T>,
) -> Result<ProbMap<T>> {
    let input = baseline_input(config, image)?;
    let layout = Layout::new(config);
    check_weights(&layout, weights)?;
    let (h, w) = image.shape();
    let (out, _) = unet::forward(&layout, weights, input, None);
    Ok(sigmoid(&FlowState::from_vec(h, w, out.data)?))
}

/// Kaiming-normal weights (`std = sqrt(2 / fan_in)`), zero biases, unit
/// normalization scales.
pub fn init_weights(config: &ModelConfig, seed: u64) -> Result<WeightSet<f32>> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut rng = seed::rng(seed);
    let mut weights = WeightSet::zeros(layout.specs());
    for p in weights.params_mut() {
        let is_norm = p.name.contains(".norm");
        if p.name.ends_with(".bias") {
            continue;
        }
        if is_norm {
            p.data.fill(1.0);
            continue;
        }
        let fan_in: usize = p.shape[1..].iter().product();
        let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        for v in &mut p.data {
            *v = normal.sample(&mut rng) as f32;
        }
    }
    Ok(weights)
}
