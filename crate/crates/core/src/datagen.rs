//! Procedural fluorescence filament scenes with pixel-exact masks.
//!
//! Geometry: each filament is a constant-speed random walk (1 px steps)
//! whose heading receives Gaussian increments; it bounces off a 2 px
//! border so it never leaves and re-enters the frame. The ideal render
//! anti-aliases every polyline segment; the mask is its support.
//!
//! Imaging: ideal render -> Gaussian PSF -> background -> Poisson shot
//! noise -> Gaussian read noise -> per-image min–max normalization.
//!
//! Default values target 64x64 desk-scale scenes and are regime choices,
//! not calibrated statistics of any published dataset.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};

use crate::domain::{normalize_image, Grid, Image, Mask};
use crate::error::{Error, IoContext, Result};
use crate::io;
use crate::seed::{self, tags, Rng};

const BORDER: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayMode {
    None,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilamentSpec {
    pub num_filaments: (usize, usize),
    pub length_px: (f64, f64),
    /// Standard deviation of the heading change per 1 px of arc (radians).
    pub curvature_sigma: f64,
    pub width_px: f64,
    pub intensity: f64,
    pub decay_mode: DecayMode,
    /// Intensity drops linearly to `1 - decay_fraction` at the far end.
    pub decay_fraction: f64,
}

impl Default for FilamentSpec {
    fn default() -> Self {
        Self::simple()
    }
}

impl FilamentSpec {
    /// Uniform intensity along every filament.
    pub fn simple() -> Self {
        Self {
            num_filaments: (3, 6),
            length_px: (24.0, 56.0),
            curvature_sigma: 0.08,
            width_px: 1.5,
            intensity: 1.0,
            decay_mode: DecayMode::None,
            decay_fraction: 0.0,
        }
    }

    /// Intensity fades along each filament.
    pub fn complex() -> Self {
        Self {
            decay_mode: DecayMode::Linear,
            decay_fraction: 0.8,
            ..Self::simple()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(format!("filament spec: {m}")));
        let (lo, hi) = self.num_filaments;
        if lo > hi {
            return fail("num_filaments min exceeds max");
        }
        let (lmin, lmax) = self.length_px;
        if !(lmin > 0.0 && lmin <= lmax && lmax.is_finite()) {
            return fail("length_px must satisfy 0 < min <= max");
        }
        if !(self.curvature_sigma >= 0.0 && self.curvature_sigma.is_finite()) {
            return fail("curvature_sigma must be finite and >= 0");
        }
        if !(self.width_px >= 1.0 && self.width_px.is_finite()) {
            return fail("width_px must be >= 1");
        }
        if !(self.intensity > 0.0 && self.intensity <= 1.0) {
            return fail("intensity must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.decay_fraction) {
            return fail("decay_fraction must lie in [0, 1)");
        }
        Ok(())
    }

    /// Relative intensity at arc-length fraction `s` in `[0, 1]`.
    fn profile(&self, s: f64) -> f64 {
        match self.decay_mode {
            DecayMode::None => 1.0,
            DecayMode::Linear => 1.0 - self.decay_fraction * s,
        }
    }
}

fn infinite_if_null<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub psf_sigma_px: f64,
    pub background_level: f64,
    /// Expected photons per unit intensity; `inf` disables shot noise.
    /// JSON has no infinity, so `null` reads back as `inf`.
    #[serde(deserialize_with = "infinite_if_null")]
    pub photon_scale: f64,
    pub read_noise_sigma: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            psf_sigma_px: 1.0,
            background_level: 0.1,
            photon_scale: 40.0,
            read_noise_sigma: 0.02,
        }
    }
}

impl NoiseSpec {
    /// No blur, background or noise of any kind.
    pub fn noiseless() -> Self {
        Self {
            psf_sigma_px: 0.0,
            background_level: 0.0,
            photon_scale: f64::INFINITY,
            read_noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(format!("noise spec: {m}")));
        if !(self.psf_sigma_px >= 0.0 && self.psf_sigma_px.is_finite()) {
            return fail("psf_sigma_px must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.background_level) {
            return fail("background_level must lie in [0, 1)");
        }
        if !(self.photon_scale > 0.0) {
            return fail("photon_scale must be > 0");
        }
        if !(self.read_noise_sigma >= 0.0 && self.read_noise_sigma.is_finite()) {
            return fail("read_noise_sigma must be finite and >= 0");
        }
        Ok(())
    }
}

/// Centerline of one filament, in pixel coordinates `(row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Filament {
    pub points: Vec<(f64, f64)>,
}

impl Filament {
    pub fn arc_length(&self) -> f64 {
        self.points
            .windows(2)
            .map(|p| ((p[1].0 - p[0].0).powi(2) + (p[1].1 - p[0].1).powi(2)).sqrt())
            .sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub filaments: Vec<Filament>,
}

fn check_size(height: usize, width: usize) -> Result<()> {
    if height < 16 || width < 16 || height % 16 != 0 || width % 16 != 0 {
        return Err(Error::InvalidDimensions {
            height,
            width,
            reason: "generated images must be multiples of 16".into(),
        });
    }
    Ok(())
}

fn random_walk(spec: &FilamentSpec, height: usize, width: usize, rng: &mut Rng) -> Filament {
    let (rmax, cmax) = (height as f64 - 1.0 - BORDER, width as f64 - 1.0 - BORDER);
    let mut pos = (rng.gen_range(BORDER..=rmax), rng.gen_range(BORDER..=cmax));
    let mut heading = rng.gen_range(0.0..2.0 * PI);
    let (lmin, lmax) = spec.length_px;
    let length = if lmax > lmin { rng.gen_range(lmin..=lmax) } else { lmin };
    let steps = length.round().max(1.0) as usize;
    let turn = Normal::new(0.0, spec.curvature_sigma).expect("validated sigma");
    let mut points = Vec::with_capacity(steps + 1);
    points.push(pos);
    for _ in 0..steps {
        heading += turn.sample(rng);
        let (mut dr, mut dc) = (heading.sin(), heading.cos());
        if !(BORDER..=rmax).contains(&(pos.0 + dr)) {
            dr = -dr;
        }
        if !(BORDER..=cmax).contains(&(pos.1 + dc)) {
            dc = -dc;
        }
        heading = dr.atan2(dc);
        pos = (pos.0 + dr, pos.1 + dc);
        points.push(pos);
    }
    Filament { points }
}

/// Draws the filament geometry for one scene.
pub fn generate_scene(spec: &FilamentSpec, height: usize, width: usize, geometry_seed: u64) -> Result<Scene> {
    spec.validate()?;
    check_size(height, width)?;
    let mut rng = seed::rng(geometry_seed);
    let (lo, hi) = spec.num_filaments;
    let count = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let filaments = (0..count).map(|_| random_walk(spec, height, width, &mut rng)).collect();
    Ok(Scene {
        height,
        width,
        filaments,
    })
}

fn point_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let (dr, dc) = (b.0 - a.0, b.1 - a.1);
    let len2 = dr * dr + dc * dc;
    let u = if len2 > 0.0 {
        (((p.0 - a.0) * dr + (p.1 - a.1) * dc) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qr, qc) = (a.0 + u * dr, a.1 + u * dc);
    (((p.0 - qr).powi(2) + (p.1 - qc).powi(2)).sqrt(), u)
}

/// Per-filament anti-aliased render: coverage `clamp(r + 0.5 - d, 0, 1)`
/// times the intensity profile at the nearest arc position. Overlapping
/// segments of one filament take the maximum; filaments add.
fn render_into(spec: &FilamentSpec, filament: &Filament, out: &mut Grid<f64>) {
    let (h, w) = out.shape();
    let radius = spec.width_px / 2.0;
    let reach = radius + 0.5;
    let total = filament.arc_length().max(f64::EPSILON);
    let mut own = vec![0.0f64; h * w];
    let mut travelled = 0.0;
    for seg in filament.points.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let seg_len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        let r0 = (a.0.min(b.0) - reach).floor().max(0.0) as usize;
        let r1 = ((a.0.max(b.0) + reach).ceil() as usize).min(h - 1);
        let c0 = (a.1.min(b.1) - reach).floor().max(0.0) as usize;
        let c1 = ((a.1.max(b.1) + reach).ceil() as usize).min(w - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                let (d, u) = point_segment((r as f64, c as f64), a, b);
                let coverage = (reach - d).clamp(0.0, 1.0);
                if coverage > 0.0 {
                    let s = (travelled + u * seg_len) / total;
                    let v = coverage * spec.intensity * spec.profile(s);
                    let cell = &mut own[r * w + c];
                    *cell = cell.max(v);
                }
            }
        }
        travelled += seg_len;
    }
    for (o, v) in out.as_mut_slice().iter_mut().zip(own) {
        *o += v;
    }
}

/// Noise-free intensity image of the given filaments.
pub fn render_ideal(spec: &FilamentSpec, scene: &Scene) -> Grid<f64> {
    let mut out = Grid::filled(scene.height, scene.width, 0.0);
    for f in &scene.filaments {
        render_into(spec, f, &mut out);
    }
    out
}

fn gaussian_blur(src: &Grid<f64>, sigma: f64) -> Grid<f64> {
    if sigma <= 0.0 {
        return src.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (h, w) = src.shape();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let rows = Grid::from_fn(h, w, |r, c| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &kv)| kv * src.get(r, clamp(c as isize + k as isize - radius, w)))
            .sum::<f64>()
    });
    Grid::from_fn(h, w, |r, c| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &kv)| kv * rows.get(clamp(r as isize + k as isize - radius, h), c))
            .sum::<f64>()
    })
}

/// Applies the imaging model to an ideal render.
pub fn render_image(ideal: &Grid<f64>, spec: &NoiseSpec, noise_seed: u64) -> Result<Image> {
    spec.validate()?;
    let mut rng = seed::rng(noise_seed);
    let blurred = gaussian_blur(ideal, spec.psf_sigma_px);
    let read = (spec.read_noise_sigma > 0.0)
        .then(|| Normal::new(0.0, spec.read_noise_sigma).expect("validated sigma"));
    let noisy = blurred.map(|v| {
        let mut v = v + spec.background_level;
        if spec.photon_scale.is_finite() {
            let lambda = v * spec.photon_scale;
            v = if lambda > 0.0 {
                Poisson::new(lambda).expect("positive rate").sample(&mut rng) / spec.photon_scale
            } else {
                0.0
            };
        }
        if let Some(n) = &read {
            v += n.sample(&mut rng);
        }
        v
    });
    match normalize_image(&noisy) {
        Ok(img) => Ok(img.cast()),
        // An empty, noiseless scene is a constant frame.
        Err(Error::DegenerateImage(_)) => Ok(Image::filled(ideal.height(), ideal.width(), 0.0)),
        Err(e) => Err(e),
    }
}

/// Support of the ideal render.
pub fn scene_mask(spec: &FilamentSpec, scene: &Scene) -> Mask {
    Mask::binarize(&render_ideal(spec, scene).map(|v| u8::from(v > 0.0)))
}

/// Image/mask pair with geometry and noise drawn from independent streams
/// of `seed`.
pub fn generate_sample(
    fspec: &FilamentSpec,
    nspec: &NoiseSpec,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<(Image, Mask)> {
    generate_sample_with_seeds(
        fspec,
        nspec,
        height,
        width,
        seed::derive(seed, &[tags::GEOMETRY]),
        seed::derive(seed, &[tags::NOISE]),
    )
}

pub fn generate_sample_with_seeds(
    fspec: &FilamentSpec,
    nspec: &NoiseSpec,
    height: usize,
    width: usize,
    geometry_seed: u64,
    noise_seed: u64,
) -> Result<(Image, Mask)> {
    nspec.validate()?;
    let scene = generate_scene(fspec, height, width, geometry_seed)?;
    let ideal = render_ideal(fspec, &scene);
    let mask = Mask::binarize(&ideal.map(|v| u8::from(v > 0.0)));
    let image = render_image(&ideal, nspec, noise_seed)?;
    Ok((image, mask))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub seed: u64,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub height: usize,
    pub width: usize,
    pub base_seed: u64,
    pub filament: FilamentSpec,
    pub noise: NoiseSpec,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest";
pub const IMAGES_DIR: &str = "images";
pub const MASKS_DIR: &str = "masks";

pub fn sample_name(index: usize, count: usize) -> String {
    let digits = (count.saturating_sub(1)).to_string().len().max(4);
    format!("sample_{index:0digits$}")
}

fn split_hint(index: usize, count: usize) -> &'static str {
    let train = (0.8 * count as f64).round() as usize;
    let val = (0.1 * count as f64).round() as usize;
    if index < train {
        "train"
    } else if index < train + val {
        "val"
    } else {
        "test"
    }
}

/// Writes `count` pairs under `out_dir/images` and `out_dir/masks` plus the
/// manifest. Sample `i` uses seed `seed + i`.
pub fn generate_dataset(
    fspec: &FilamentSpec,
    nspec: &NoiseSpec,
    height: usize,
    width: usize,
    count: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest> {
    fspec.validate()?;
    nspec.validate()?;
    check_size(height, width)?;
    if count == 0 {
        return Err(Error::InvalidConfig("dataset count must be at least 1".into()));
    }
    let samples: Vec<(Image, Mask)> = (0..count)
        .into_par_iter()
        .map(|i| generate_sample(fspec, nspec, height, width, seed.wrapping_add(i as u64)))
        .collect::<Result<_>>()?;

    let mut completed: Vec<PathBuf> = Vec::new();
    let fail = |completed: &mut Vec<PathBuf>, e: Error| Error::PartialOutput {
        completed: std::mem::take(completed),
        source: Box::new(e),
    };
    for dir in [IMAGES_DIR, MASKS_DIR] {
        let p = out_dir.join(dir);
        fs::create_dir_all(&p)
            .with_path("creating", &p)
            .map_err(|e| fail(&mut completed, e))?;
    }
    let mut entries = Vec::with_capacity(count);
    for (i, (image, mask)) in samples.iter().enumerate() {
        let name = sample_name(i, count);
        let img_path = out_dir.join(IMAGES_DIR).join(format!("{name}.png"));
        io::write_gray16(&img_path, image.grid()).map_err(|e| fail(&mut completed, e))?;
        completed.push(img_path);
        let mask_path = out_dir.join(MASKS_DIR).join(format!("{name}.png"));
        io::write_mask(&mask_path, mask).map_err(|e| fail(&mut completed, e))?;
        completed.push(mask_path);
        entries.push(ManifestEntry {
            name,
            seed: seed.wrapping_add(i as u64),
            split: split_hint(i, count).to_string(),
        });
    }
    let manifest = Manifest {
        height,
        width,
        base_seed: seed,
        filament: fspec.clone(),
        noise: nspec.clone(),
        entries,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n")
        .with_path("writing", &path)
        .map_err(|e| fail(&mut completed, e))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).with_path("reading", &path)?;
    Ok(serde_json::from_str(&text)?)
}
