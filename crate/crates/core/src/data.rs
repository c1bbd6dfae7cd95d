//! Loading image/mask pairs, deterministic splits and augmentation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datagen::{IMAGES_DIR, MASKS_DIR};
use crate::domain::{normalize_image, Grid, Image, Mask};
use crate::error::{Error, IoContext, Result};
use crate::io;
use crate::seed::{self, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub image: Image,
    pub mask: Mask,
    pub name: String,
}

impl SamplePair {
    pub fn new(image: Image, mask: Mask, name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if image.shape() != mask.shape() {
            return Err(size_mismatch(&name, image.shape(), mask.shape()));
        }
        Ok(Self { image, mask, name })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.image.shape()
    }
}

fn size_mismatch(name: &str, image: (usize, usize), mask: (usize, usize)) -> Error {
    Error::SizeMismatch {
        name: name.to_string(),
        image,
        mask,
    }
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).with_path("listing", dir)? {
        let path = entry.with_path("listing", dir)?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png || !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Loads `root/images/*.png` with their `root/masks/*.png` counterparts,
/// sorted by name.
pub fn load_dataset(root: &Path) -> Result<Vec<SamplePair>> {
    let images = png_stems(&root.join(IMAGES_DIR))?;
    let masks = png_stems(&root.join(MASKS_DIR))?;
    if let Some(orphan) = images
        .iter()
        .find(|(k, _)| !masks.contains_key(*k))
        .or_else(|| masks.iter().find(|(k, _)| !images.contains_key(*k)))
    {
        return Err(Error::OrphanFile(orphan.1.clone()));
    }
    images
        .iter()
        .map(|(name, img_path)| {
            let raw = io::read_gray(img_path)?;
            let mask = io::read_mask(&masks[name])?;
            if raw.shape() != mask.shape() {
                return Err(size_mismatch(name, raw.shape(), mask.shape()));
            }
            let image = normalize_image(&raw)?;
            SamplePair::new(image, mask, name.clone())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub shuffle_seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            val_fraction: 0.1,
            test_fraction: 0.1,
            shuffle_seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train_fraction, self.val_fraction, self.test_fraction];
        if f.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidConfig("split fractions must be finite and >= 0".into()));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig("split fractions must sum to 1".into()));
        }
        Ok(())
    }

    /// Slice sizes for `n` items: train and val are rounded, test takes the rest.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize)> {
        self.validate()?;
        let train = (self.train_fraction * n as f64).round() as usize;
        let val = ((self.val_fraction * n as f64).round() as usize).min(n.saturating_sub(train));
        let test = n - train.min(n) - val;
        let train = train.min(n);
        for (size, frac, label) in [
            (train, self.train_fraction, "train"),
            (val, self.val_fraction, "validation"),
            (test, self.test_fraction, "test"),
        ] {
            if size == 0 && frac > 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{label} split is empty for {n} samples"
                )));
            }
        }
        Ok((train, val, test))
    }
}

pub type Splits<T> = (Vec<T>, Vec<T>, Vec<T>);

/// Deterministic shuffle followed by contiguous train/val/test slices.
pub fn split<T>(items: Vec<T>, spec: &SplitSpec) -> Result<Splits<T>> {
    let n = items.len();
    if n < 3 {
        return Err(Error::InvalidConfig(format!("need at least 3 samples to split, got {n}")));
    }
    let (train, val, _) = spec.sizes(n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::derive(spec.shuffle_seed, &[seed::tags::SHUFFLE])));
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut take = |range: std::ops::Range<usize>| -> Vec<T> {
        order[range].iter().map(|&i| slots[i].take().expect("each index once")).collect()
    };
    let a = take(0..train);
    let b = take(train..train + val);
    let c = take(train + val..n);
    Ok((a, b, c))
}

/// Explicit geometric transform; drawn by [`AugmentParams::sample`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    pub angle_deg: f64,
}

pub const MAX_ROTATION_DEG: f64 = 15.0;

impl AugmentParams {
    pub const IDENTITY: Self = Self {
        hflip: false,
        vflip: false,
        angle_deg: 0.0,
    };

    pub fn sample(rng: &mut Rng) -> Self {
        Self {
            hflip: rng.gen_bool(0.5),
            vflip: rng.gen_bool(0.5),
            angle_deg: rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
        }
    }
}

/// Flips, then rotates about the image centre. The image is resampled
/// bilinearly and clamped to `[0, 1]`; the mask uses nearest neighbour.
/// Pixels mapped from outside the frame become 0.
pub fn apply_augment(sample: &SamplePair, params: AugmentParams) -> SamplePair {
    let (h, w) = sample.shape();
    let flip = |r: usize, c: usize| {
        (
            if params.vflip { h - 1 - r } else { r },
            if params.hflip { w - 1 - c } else { c },
        )
    };
    let img = sample.image.grid();
    let msk = sample.mask.grid();
    let flipped_img = Grid::from_fn(h, w, |r, c| {
        let (sr, sc) = flip(r, c);
        img.get(sr, sc)
    });
    let flipped_msk = Grid::from_fn(h, w, |r, c| {
        let (sr, sc) = flip(r, c);
        msk.get(sr, sc)
    });
    let (image, mask) = if params.angle_deg == 0.0 {
        (flipped_img, flipped_msk)
    } else {
        rotate(&flipped_img, &flipped_msk, params.angle_deg)
    };
    SamplePair {
        image: Image::new(image).expect("resampled values are finite"),
        mask: Mask::new(mask).expect("nearest neighbour preserves binarity"),
        name: sample.name.clone(),
    }
}

fn rotate(img: &Grid<f32>, msk: &Grid<u8>, angle_deg: f64) -> (Grid<f32>, Grid<u8>) {
    let (h, w) = img.shape();
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let (cr, cc) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    // Inverse map: output pixel -> source coordinate.
    let source = |r: usize, c: usize| {
        let (dr, dc) = (r as f64 - cr, c as f64 - cc);
        (cr + cos * dr - sin * dc, cc + sin * dr + cos * dc)
    };
    let pixel = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            f64::from(img.get(r as usize, c as usize))
        }
    };
    let image = Grid::from_fn(h, w, |r, c| {
        let (sr, sc) = source(r, c);
        let (r0, c0) = (sr.floor(), sc.floor());
        let (fr, fc) = (sr - r0, sc - c0);
        let (r0, c0) = (r0 as isize, c0 as isize);
        let v = pixel(r0, c0) * (1.0 - fr) * (1.0 - fc)
            + pixel(r0, c0 + 1) * (1.0 - fr) * fc
            + pixel(r0 + 1, c0) * fr * (1.0 - fc)
            + pixel(r0 + 1, c0 + 1) * fr * fc;
        v.clamp(0.0, 1.0) as f32
    });
    let mask = Grid::from_fn(h, w, |r, c| {
        let (sr, sc) = source(r, c);
        let (r, c) = (sr.round(), sc.round());
        if r < 0.0 || c < 0.0 || r >= h as f64 || c >= w as f64 {
            0
        } else {
            msk.get(r as usize, c as usize)
        }
    });
    (image, mask)
}

/// Random flips and rotation drawn from `rng`.
pub fn augment(sample: &SamplePair, rng: &mut Rng) -> SamplePair {
    apply_augment(sample, AugmentParams::sample(rng))
}
