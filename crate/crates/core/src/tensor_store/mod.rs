//! Core data types shared by every stage of the pipeline, the `AXFT` binary
//! tensor container and the JSON dataset manifest.

mod format;
mod manifest;

pub use format::{
    decode_tensor, encode_tensor, read_header, read_tensor, write_tensor, Tensor, TensorHeader,
};
pub use manifest::{
    load_manifest, load_manifest_with, ClassTaxonomy, DatasetManifest, ImageRecord, ImageSize,
    LoadOptions,
};

use std::fmt::Debug;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type of a [`FeatureMap`]. Stored maps are `f32`; numerical work runs on `f64`.
pub trait Scalar: Copy + Default + PartialEq + PartialOrd + Debug + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
    fn finite(self) -> bool;
}

impl Scalar for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn finite(self) -> bool {
        self.is_finite()
    }
}

impl Scalar for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn finite(self) -> bool {
        self.is_finite()
    }
}

/// Dense `height × width × channels` grid, row-major in `(y, x, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T: Scalar = f32> {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<T>,
}

/// Working-precision map used inside the translator, trainer and pooling.
pub type Grid = FeatureMap<f64>;

impl<T: Scalar> FeatureMap<T> {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<T>) -> Result<Self> {
        let expected = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Error::Shape(format!("{height}x{width}x{channels} overflows")))?;
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} map needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.finite()) {
            return Err(Error::Validation(format!(
                "non-finite value at flat index {i}"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    /// Builds a map without the finiteness scan; shape must already be consistent.
    pub(crate) fn from_parts(height: usize, width: usize, channels: usize, values: Vec<T>) -> Self {
        debug_assert_eq!(values.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            values,
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::from_parts(
            height,
            width,
            channels,
            vec![T::default(); height * width * channels],
        )
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    values.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.values[self.index(y, x, c)]
    }

    /// Channel vector at one cell.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let start = (y * self.width + x) * self.channels;
        &self.values[start..start + self.channels]
    }

    #[inline]
    pub(crate) fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [T] {
        let start = (y * self.width + x) * self.channels;
        &mut self.values[start..start + self.channels]
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap::from_parts(
            self.height,
            self.width,
            self.channels,
            self.values
                .iter()
                .map(|v| U::from_f64(v.to_f64()))
                .collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.finite())
    }

    /// Per-channel arithmetic mean over all cells, accumulated in `f64`.
    pub fn channel_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0f64; self.channels];
        for px in self.values.chunks_exact(self.channels.max(1)) {
            for (s, v) in sums.iter_mut().zip(px) {
                *s += v.to_f64();
            }
        }
        let n = (self.height * self.width) as f64;
        sums.iter().map(|s| s / n).collect()
    }
}

impl FeatureMap<f64> {
    pub(crate) fn add_assign(&mut self, other: &Grid) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scaled(&self, alpha: f64) -> Grid {
        Grid::from_parts(
            self.height,
            self.width,
            self.channels,
            self.values.iter().map(|v| v * alpha).collect(),
        )
    }
}

impl FeatureMap<f32> {
    /// Writes the map as a rank-3 `AXFT` tensor.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_feature_map(self, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_feature_map(path)
    }
}

pub fn save_feature_map(map: &FeatureMap<f32>, path: impl AsRef<Path>) -> Result<()> {
    if let Some(i) = map.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "refusing to write non-finite value at flat index {i}"
        )));
    }
    let tensor = Tensor::new(
        vec![map.height, map.width, map.channels],
        map.values.clone(),
    )?;
    write_tensor(path, &tensor)
}

pub fn load_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap<f32>> {
    let path = path.as_ref();
    let tensor = read_tensor(path)?;
    if tensor.dims.len() != 3 {
        return Err(Error::Format(format!(
            "{}: feature map must be rank 3, found rank {}",
            path.display(),
            tensor.dims.len()
        )));
    }
    let (h, w, c) = (tensor.dims[0], tensor.dims[1], tensor.dims[2]);
    FeatureMap::new(h, w, c, tensor.values)
}

/// Ordered feature levels; level 0 here is the shallowest (highest resolution).
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T: Scalar = f32> {
    levels: Vec<FeatureMap<T>>,
}

const ASPECT_TOL: f64 = 1e-6;

impl<T: Scalar> FeaturePyramid<T> {
    pub fn new(levels: Vec<FeatureMap<T>>) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| Error::Shape("pyramid needs at least one level".into()))?;
        let aspect = first.width as f64 / first.height as f64;
        for (i, pair) in levels.windows(2).enumerate() {
            let (a, b) = (&pair[0], &pair[1]);
            if b.height > a.height || b.width > a.width {
                return Err(Error::Shape(format!(
                    "level {} ({}x{}) is larger than level {} ({}x{})",
                    i + 1,
                    b.height,
                    b.width,
                    i,
                    a.height,
                    a.width
                )));
            }
        }
        for (i, level) in levels.iter().enumerate() {
            if level.height == 0 || level.width == 0 {
                return Err(Error::Shape(format!("level {i} has an empty grid")));
            }
            let ar = level.width as f64 / level.height as f64;
            if ((ar - aspect) / aspect).abs() > ASPECT_TOL {
                return Err(Error::Shape(format!(
                    "level {i} aspect ratio {ar} differs from {aspect}"
                )));
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[FeatureMap<T>] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn level(&self, i: usize) -> &FeatureMap<T> {
        &self.levels[i]
    }

    pub fn cast<U: Scalar>(&self) -> FeaturePyramid<U> {
        FeaturePyramid {
            levels: self.levels.iter().map(FeatureMap::cast).collect(),
        }
    }

    /// Channel depth of every level, shallowest first.
    pub fn channel_depths(&self) -> Vec<usize> {
        self.levels.iter().map(FeatureMap::channels).collect()
    }
}

/// Predicted or annotated box in image pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub coarse_class: String,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fine_class: Option<String>,
}

impl Detection {
    pub fn new(
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        coarse_class: impl Into<String>,
        confidence: f64,
    ) -> Self {
        Self {
            x0,
            y0,
            x1,
            y1,
            coarse_class: coarse_class.into(),
            confidence,
            fine_class: None,
        }
    }

    pub fn with_fine(mut self, fine: impl Into<String>) -> Self {
        self.fine_class = Some(fine.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x0, self.y0, self.x1, self.y1];
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("box has non-finite coordinates".into()));
        }
        if !(self.x0 < self.x1 && self.y0 < self.y1) {
            return Err(Error::Validation(format!(
                "degenerate box ({}, {}, {}, {})",
                self.x0, self.y0, self.x1, self.y1
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::Validation(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}
