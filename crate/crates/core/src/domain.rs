//! Shared tensor types and the elementwise operations every stage relies on:
//! min–max normalization, sigmoid squashing and thresholding.

use crate::error::{Error, Result};
use crate::real::Real;

/// Dense row-major 2-D array.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidDimensions {
                height,
                width,
                reason: "empty grid".into(),
            });
        }
        if data.len() != height * width {
            return Err(Error::InvalidDimensions {
                height,
                width,
                reason: format!("buffer holds {} values", data.len()),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        assert!(height > 0 && width > 0, "empty grid");
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(height > 0 && width > 0, "empty grid");
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    pub(crate) fn ensure_same_shape<U: Copy>(&self, other: &Grid<U>) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                actual: other.shape(),
            });
        }
        Ok(())
    }
}

fn ensure_finite<T: Real>(data: &[T], what: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

macro_rules! real_newtype {
    ($(#[$meta:meta])* $name:ident, $what:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name<T = f32>(Grid<T>);

        impl<T: Real> $name<T> {
            pub fn new(grid: Grid<T>) -> Result<Self> {
                ensure_finite(grid.as_slice(), $what)?;
                Ok(Self(grid))
            }

            pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
                Self::new(Grid::new(height, width, data)?)
            }

            pub fn filled(height: usize, width: usize, value: T) -> Self {
                Self(Grid::filled(height, width, value))
            }

            pub fn grid(&self) -> &Grid<T> {
                &self.0
            }

            pub fn into_grid(self) -> Grid<T> {
                self.0
            }

            pub fn shape(&self) -> (usize, usize) {
                self.0.shape()
            }

            pub fn as_slice(&self) -> &[T] {
                self.0.as_slice()
            }

            /// Converts the element type (e.g. to `f64` for gradient checks).
            pub fn cast<U: Real>(&self) -> $name<U> {
                $name(self.0.map(|v| U::from_f64_lossy(v.to_f64_lossy())))
            }
        }
    };
}

real_newtype!(
    /// Grayscale frame with intensities in `[0, 1]`.
    Image,
    "image"
);
real_newtype!(
    /// Real-valued mask state transported along the flow.
    FlowState,
    "flow state"
);
real_newtype!(
    /// Per-pixel displacement per unit flow time.
    VectorField,
    "vector field"
);
real_newtype!(
    /// Per-pixel foreground probability.
    ProbMap,
    "probability map"
);

impl<T: Real> Image<T> {
    /// Wraps pixels that are already in `[0, 1]`.
    pub fn from_unit(grid: Grid<T>) -> Result<Self> {
        if grid
            .as_slice()
            .iter()
            .any(|&v| !(v >= T::zero() && v <= T::one()))
        {
            return Err(Error::InvalidConfig(
                "image pixels must lie in [0, 1]".into(),
            ));
        }
        Ok(Self(grid))
    }
}

/// Binary segmentation with pixels in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask(Grid<u8>);

impl Mask {
    pub fn new(grid: Grid<u8>) -> Result<Self> {
        if grid.as_slice().iter().any(|&v| v > 1) {
            return Err(Error::InvalidConfig("mask pixels must be 0 or 1".into()));
        }
        Ok(Self(grid))
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(Grid::new(height, width, data)?)
    }

    /// Any nonzero value becomes foreground.
    pub fn binarize<T: Copy + PartialEq + Default>(grid: &Grid<T>) -> Self {
        Self(grid.map(|v| u8::from(v != T::default())))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Grid::filled(height, width, 0))
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self(Grid::filled(height, width, 1))
    }

    pub fn grid(&self) -> &Grid<u8> {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn as_slice(&self) -> &[u8] {
        self.0.as_slice()
    }

    pub fn foreground_count(&self) -> usize {
        self.0.as_slice().iter().filter(|&&v| v == 1).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.foreground_count() as f64 / self.0.len() as f64
    }

    /// The mask as a real-valued flow endpoint.
    pub fn to_state<T: Real>(&self) -> FlowState<T> {
        FlowState(self.0.map(|v| if v == 1 { T::one() } else { T::zero() }))
    }
}

/// Flow time in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct TimeScalar(f64);

impl TimeScalar {
    pub const ZERO: TimeScalar = TimeScalar(0.0);
    pub const ONE: TimeScalar = TimeScalar(1.0);

    pub fn new(t: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&t) {
            Ok(Self(t))
        } else {
            Err(Error::InvalidConfig(format!("flow time {t} outside [0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Per-image min–max rescaling to `[0, 1]`.
pub fn normalize_image<T: Real>(raw: &Grid<T>) -> Result<Image<T>> {
    ensure_finite(raw.as_slice(), "raw image")?;
    let (min, max) = raw
        .as_slice()
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if max <= min {
        return Err(Error::DegenerateImage(min.to_f64_lossy()));
    }
    let range = max - min;
    // The clamp guards against rounding just past the endpoints.
    Ok(Image(raw.map(|v| {
        ((v - min) / range).max(T::zero()).min(T::one())
    })))
}

/// Logistic function, evaluated in `f64` and rounded once to `T`.
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    T::from_f64_lossy(sigmoid_f64(x.to_f64_lossy()))
}

pub(crate) fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid<T: Real>(x: &FlowState<T>) -> ProbMap<T> {
    ProbMap(x.0.map(sigmoid_scalar))
}

pub fn threshold<T: Real>(p: &ProbMap<T>, tau: f64) -> Result<Mask> {
    validate_tau(tau)?;
    let tau = T::from_f64_lossy(tau);
    Ok(Mask(p.0.map(|v| u8::from(v >= tau))))
}

pub(crate) fn validate_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("threshold {tau} outside (0, 1)")))
    }
}
