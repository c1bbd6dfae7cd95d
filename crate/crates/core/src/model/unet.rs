//! U-Net graph: parameter layout, taped forward pass and reverse pass.

use super::layers::{self, ConvCache, ConvShape, Features, NormCache};
use super::weights::{ParamSpec, WeightSet};
use super::{sinusoidal_embed_f64, ModelConfig};
use crate::real::Real;

#[derive(Debug, Clone, Copy)]
struct ConvRef {
    weight: usize,
    bias: usize,
    shape: ConvShape,
}

#[derive(Debug, Clone, Copy)]
struct NormRef {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct LinearRef {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockRef {
    conv1: ConvRef,
    norm1: NormRef,
    time_proj: Option<LinearRef>,
    conv2: ConvRef,
    norm2: NormRef,
    out_channels: usize,
}

/// Parameter names, shapes and their positions in the graph.
#[derive(Debug, Clone)]
pub struct Layout {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    time_mlp: Option<(LinearRef, LinearRef)>,
    encoder: Vec<BlockRef>,
    bottleneck: BlockRef,
    /// Indexed by level; `up[l]` maps level `l + 1` channels to level `l`.
    up: Vec<ConvRef>,
    decoder: Vec<BlockRef>,
    head: ConvRef,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>) -> usize {
        self.specs.push(ParamSpec { name, shape });
        self.specs.len() - 1
    }

    fn conv(&mut self, prefix: &str, shape: ConvShape) -> ConvRef {
        let weight = self.push(
            format!("{prefix}.weight"),
            vec![shape.out_channels, shape.in_channels, shape.kernel, shape.kernel],
        );
        let bias = self.push(format!("{prefix}.bias"), vec![shape.out_channels]);
        ConvRef {
            weight,
            bias,
            shape,
        }
    }

    fn norm(&mut self, prefix: &str, channels: usize) -> NormRef {
        let gamma = self.push(format!("{prefix}.weight"), vec![channels]);
        let beta = self.push(format!("{prefix}.bias"), vec![channels]);
        NormRef { gamma, beta }
    }

    fn linear(&mut self, prefix: &str, n_in: usize, n_out: usize) -> LinearRef {
        let weight = self.push(format!("{prefix}.weight"), vec![n_out, n_in]);
        let bias = self.push(format!("{prefix}.bias"), vec![n_out]);
        LinearRef { weight, bias }
    }

    fn block(&mut self, prefix: &str, cin: usize, cout: usize, time_dim: Option<usize>) -> BlockRef {
        let conv1 = self.conv(
            &format!("{prefix}.conv1"),
            ConvShape {
                in_channels: cin,
                out_channels: cout,
                kernel: 3,
            },
        );
        let norm1 = self.norm(&format!("{prefix}.norm1"), cout);
        let time_proj = time_dim.map(|d| self.linear(&format!("{prefix}.time_proj"), d, cout));
        let conv2 = self.conv(
            &format!("{prefix}.conv2"),
            ConvShape {
                in_channels: cout,
                out_channels: cout,
                kernel: 3,
            },
        );
        let norm2 = self.norm(&format!("{prefix}.norm2"), cout);
        BlockRef {
            conv1,
            norm1,
            time_proj,
            conv2,
            norm2,
            out_channels: cout,
        }
    }
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Self {
        let mut b = Builder { specs: Vec::new() };
        let time_dim = config.time_conditioning.then_some(config.mlp_hidden_dim);
        let time_mlp = config.time_conditioning.then(|| {
            (
                b.linear("time_mlp.fc1", config.time_embed_dim, config.mlp_hidden_dim),
                b.linear("time_mlp.fc2", config.mlp_hidden_dim, config.mlp_hidden_dim),
            )
        });
        let width = |level: usize| config.base_filters << level;
        let mut encoder = Vec::with_capacity(config.depth);
        let mut cin = config.in_channels;
        for level in 0..config.depth {
            encoder.push(b.block(&format!("encoder.{level}"), cin, width(level), time_dim));
            cin = width(level);
        }
        let bottleneck = b.block("bottleneck", cin, width(config.depth), time_dim);
        let mut up = Vec::with_capacity(config.depth);
        let mut decoder = Vec::with_capacity(config.depth);
        for level in (0..config.depth).rev() {
            up.push(b.conv(
                &format!("decoder.{level}.up"),
                ConvShape {
                    in_channels: width(level + 1),
                    out_channels: width(level),
                    kernel: 3,
                },
            ));
            decoder.push(b.block(
                &format!("decoder.{level}"),
                2 * width(level),
                width(level),
                time_dim,
            ));
        }
        up.reverse();
        decoder.reverse();
        let head = b.conv(
            "head",
            ConvShape {
                in_channels: config.base_filters,
                out_channels: config.out_channels,
                kernel: 1,
            },
        );
        Self {
            config: config.clone(),
            specs: b.specs,
            time_mlp,
            encoder,
            bottleneck,
            up,
            decoder,
            head,
        }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }
}

// ---------------------------------------------------------------------------
// Forward

struct UnitCache<T> {
    conv: ConvCache<T>,
    norm: NormCache<T>,
    pre_act: Vec<T>,
}

struct BlockCache<T> {
    unit1: UnitCache<T>,
    unit2: UnitCache<T>,
}

struct TimeCache<T> {
    embed: Vec<T>,
    hidden_pre: Vec<T>,
    hidden: Vec<T>,
}

/// Intermediate values recorded by [`forward`] for [`backward`].
pub struct Tape<T> {
    time: Option<TimeCache<T>>,
    time_features: Option<Vec<T>>,
    encoder: Vec<BlockCache<T>>,
    pools: Vec<(Vec<u32>, usize, usize)>,
    bottleneck: BlockCache<T>,
    up: Vec<ConvCache<T>>,
    decoder: Vec<BlockCache<T>>,
    head: ConvCache<T>,
}

fn conv<T: Real>(w: &WeightSet<T>, r: ConvRef, x: &Features<T>) -> (Features<T>, ConvCache<T>) {
    layers::conv_forward(r.shape, w.data(r.weight), w.data(r.bias), x)
}

fn unit<T: Real>(
    w: &WeightSet<T>,
    conv_ref: ConvRef,
    norm: NormRef,
    groups: usize,
    x: &Features<T>,
) -> (Features<T>, UnitCache<T>) {
    let (h, conv_cache) = conv(w, conv_ref, x);
    let (h, norm_cache) = layers::group_norm_forward(groups, w.data(norm.gamma), w.data(norm.beta), &h);
    let (h, pre_act) = layers::silu_forward(h);
    (
        h,
        UnitCache {
            conv: conv_cache,
            norm: norm_cache,
            pre_act,
        },
    )
}

fn block<T: Real>(
    w: &WeightSet<T>,
    r: &BlockRef,
    groups: usize,
    time_features: Option<&[T]>,
    x: &Features<T>,
) -> (Features<T>, BlockCache<T>) {
    let (mut h, unit1) = unit(w, r.conv1, r.norm1, groups, x);
    if let (Some(proj), Some(tf)) = (r.time_proj, time_features) {
        let shift = layers::linear_forward(w.data(proj.weight), w.data(proj.bias), tf);
        let plane = h.plane();
        for (c, &s) in shift.iter().enumerate() {
            for v in &mut h.data[c * plane..(c + 1) * plane] {
                *v = *v + s;
            }
        }
    }
    let (h, unit2) = unit(w, r.conv2, r.norm2, groups, &h);
    (h, BlockCache { unit1, unit2 })
}

/// Runs the network on a stacked input. `t` must be given iff the layout is
/// time-conditioned. Returns the raw head output (one channel per output).
pub fn forward<T: Real>(
    layout: &Layout,
    w: &WeightSet<T>,
    input: Features<T>,
    t: Option<f64>,
) -> (Features<T>, Tape<T>) {
    let cfg = &layout.config;
    let groups = cfg.groupnorm_groups;
    debug_assert_eq!(input.channels, cfg.in_channels);

    let (time, time_features) = match (layout.time_mlp, t) {
        (Some((fc1, fc2)), Some(t)) => {
            let embed: Vec<T> = sinusoidal_embed_f64(t, cfg.time_embed_dim)
                .into_iter()
                .map(T::from_f64_lossy)
                .collect();
            let hidden_pre = layers::linear_forward(w.data(fc1.weight), w.data(fc1.bias), &embed);
            let hidden = layers::silu_vec(&hidden_pre);
            let out = layers::linear_forward(w.data(fc2.weight), w.data(fc2.bias), &hidden);
            (
                Some(TimeCache {
                    embed,
                    hidden_pre,
                    hidden,
                }),
                Some(out),
            )
        }
        (None, None) => (None, None),
        _ => panic!("time input must match the layout's time conditioning"),
    };
    let tf = time_features.as_deref();

    let mut x = input;
    let mut skips = Vec::with_capacity(cfg.depth);
    let mut encoder = Vec::with_capacity(cfg.depth);
    let mut pools = Vec::with_capacity(cfg.depth);
    for r in &layout.encoder {
        let (h, cache) = block(w, r, groups, tf, &x);
        encoder.push(cache);
        let (pooled, argmax) = layers::max_pool_forward(&h);
        pools.push((argmax, h.height, h.width));
        skips.push(h);
        x = pooled;
    }
    let (mut x, bottleneck) = block(w, &layout.bottleneck, groups, tf, &x);

    let mut up = Vec::with_capacity(cfg.depth);
    let mut decoder = Vec::with_capacity(cfg.depth);
    for level in (0..cfg.depth).rev() {
        let widened = layers::upsample_forward(&x);
        let (u, up_cache) = conv(w, layout.up[level], &widened);
        let joined = u.concat(&skips[level]);
        let (h, cache) = block(w, &layout.decoder[level], groups, tf, &joined);
        up.push(up_cache);
        decoder.push(cache);
        x = h;
    }
    // Stored shallow-first to mirror the layout indices.
    up.reverse();
    decoder.reverse();

    let (out, head) = conv(w, layout.head, &x);
    (
        out,
        Tape {
            time,
            time_features,
            encoder,
            pools,
            bottleneck,
            up,
            decoder,
            head,
        },
    )
}

// ---------------------------------------------------------------------------
// Backward

fn conv_back<T: Real>(
    w: &WeightSet<T>,
    grads: &mut WeightSet<T>,
    r: ConvRef,
    cache: &ConvCache<T>,
    g: &Features<T>,
) -> Features<T> {
    let mut gw = std::mem::take(&mut grads.params_mut()[r.weight].data);
    let mut gb = std::mem::take(&mut grads.params_mut()[r.bias].data);
    let dx = layers::conv_backward(r.shape, w.data(r.weight), cache, g, &mut gw, &mut gb);
    grads.params_mut()[r.weight].data = gw;
    grads.params_mut()[r.bias].data = gb;
    dx
}

fn unit_back<T: Real>(
    w: &WeightSet<T>,
    grads: &mut WeightSet<T>,
    conv_ref: ConvRef,
    norm: NormRef,
    groups: usize,
    cache: &UnitCache<T>,
    g: Features<T>,
) -> Features<T> {
    let g = layers::silu_backward(&cache.pre_act, g);
    let mut gg = std::mem::take(&mut grads.params_mut()[norm.gamma].data);
    let mut gb = std::mem::take(&mut grads.params_mut()[norm.beta].data);
    let g = layers::group_norm_backward(groups, w.data(norm.gamma), &cache.norm, &g, &mut gg, &mut gb);
    grads.params_mut()[norm.gamma].data = gg;
    grads.params_mut()[norm.beta].data = gb;
    conv_back(w, grads, conv_ref, &cache.conv, &g)
}

#[allow(clippy::too_many_arguments)]
fn block_back<T: Real>(
    w: &WeightSet<T>,
    grads: &mut WeightSet<T>,
    r: &BlockRef,
    groups: usize,
    cache: &BlockCache<T>,
    time_features: Option<&[T]>,
    time_grad: &mut [T],
    g: Features<T>,
) -> Features<T> {
    let g = unit_back(w, grads, r.conv2, r.norm2, groups, &cache.unit2, g);
    if let (Some(proj), Some(tf)) = (r.time_proj, time_features) {
        let plane = g.plane();
        let shift_grad: Vec<T> = (0..r.out_channels)
            .map(|c| g.data[c * plane..(c + 1) * plane].iter().copied().sum())
            .collect();
        let mut gw = std::mem::take(&mut grads.params_mut()[proj.weight].data);
        let mut gb = std::mem::take(&mut grads.params_mut()[proj.bias].data);
        let dtf = layers::linear_backward(w.data(proj.weight), tf, &shift_grad, &mut gw, &mut gb);
        grads.params_mut()[proj.weight].data = gw;
        grads.params_mut()[proj.bias].data = gb;
        for (a, b) in time_grad.iter_mut().zip(dtf) {
            *a = *a + b;
        }
    }
    unit_back(w, grads, r.conv1, r.norm1, groups, &cache.unit1, g)
}

/// Reverse pass. Returns parameter gradients and the gradient with respect
/// to the stacked input.
pub fn backward<T: Real>(
    layout: &Layout,
    w: &WeightSet<T>,
    tape: &Tape<T>,
    grad_out: &Features<T>,
) -> (WeightSet<T>, Features<T>) {
    let cfg = &layout.config;
    let groups = cfg.groupnorm_groups;
    let mut grads = WeightSet::zeros(&layout.specs);
    let tf = tape.time_features.as_deref();
    let mut time_grad = vec![T::zero(); tf.map_or(0, <[T]>::len)];

    let mut g = conv_back(w, &mut grads, layout.head, &tape.head, grad_out);
    let mut skip_grads = Vec::with_capacity(cfg.depth);
    for level in 0..cfg.depth {
        let gd = block_back(
            w,
            &mut grads,
            &layout.decoder[level],
            groups,
            &tape.decoder[level],
            tf,
            &mut time_grad,
            g,
        );
        let up_channels = layout.up[level].shape.out_channels;
        let (g_up, g_skip) = gd.split(up_channels);
        skip_grads.push(g_skip);
        let g_wide = conv_back(w, &mut grads, layout.up[level], &tape.up[level], &g_up);
        g = layers::upsample_backward(&g_wide);
    }
    let mut g = block_back(
        w,
        &mut grads,
        &layout.bottleneck,
        groups,
        &tape.bottleneck,
        tf,
        &mut time_grad,
        g,
    );
    for level in (0..cfg.depth).rev() {
        let (argmax, h, wd) = &tape.pools[level];
        let mut gp = layers::max_pool_backward(argmax, &g, *h, *wd);
        gp.add_assign(&skip_grads[level]);
        g = block_back(
            w,
            &mut grads,
            &layout.encoder[level],
            groups,
            &tape.encoder[level],
            tf,
            &mut time_grad,
            gp,
        );
    }

    if let (Some((fc1, fc2)), Some(time)) = (layout.time_mlp, &tape.time) {
        let mut gw = std::mem::take(&mut grads.params_mut()[fc2.weight].data);
        let mut gb = std::mem::take(&mut grads.params_mut()[fc2.bias].data);
        let dh = layers::linear_backward(w.data(fc2.weight), &time.hidden, &time_grad, &mut gw, &mut gb);
        grads.params_mut()[fc2.weight].data = gw;
        grads.params_mut()[fc2.bias].data = gb;
        let dpre = layers::silu_vec_backward(&time.hidden_pre, &dh);
        let mut gw = std::mem::take(&mut grads.params_mut()[fc1.weight].data);
        let mut gb = std::mem::take(&mut grads.params_mut()[fc1.bias].data);
        layers::linear_backward(w.data(fc1.weight), &time.embed, &dpre, &mut gw, &mut gb);
        grads.params_mut()[fc1.weight].data = gw;
        grads.params_mut()[fc1.bias].data = gb;
    }
    (grads, g)
}
