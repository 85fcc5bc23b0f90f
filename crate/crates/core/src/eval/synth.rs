//! Synthetic datasets with a known answer.
//!
//! [`synth_generate`] renders one object per image. Detector pyramids are
//! "collapsed": every fine class of a coarse class shares the coarse one-hot
//! centroid and differs only by a faint `sigma_c` code, buried under a
//! per-object nuisance vector. The oracle map is "descriptive": fine classes sit
//! `margin` apart along orthonormal directions. Shallower levels expose more
//! fine-code dimensions than deeper ones.
//!
//! [`linear_oracle_generate`] emits single-level data whose oracle is a fixed
//! 1×1 linear map of the features, so a linear translator can fit it exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{indexed_substream, substream};
use crate::tensor_store::{
    load_manifest, ClassTaxonomy, DatasetManifest, Detection, FeatureMap, ImageRecord, ImageSize,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_coarse: usize,
    pub fine_per_coarse: usize,
    pub samples_per_fine: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    /// Square grid side per detector level, shallowest first.
    pub level_grids: Vec<usize>,
    pub oracle_grid: usize,
    pub oracle_channels: usize,
    pub nuisance_channels: usize,
    /// Object side range in units of the coarsest detector cell.
    pub min_box_cells: usize,
    pub max_box_cells: usize,
    pub sigma_c: f64,
    pub margin: f64,
    pub nuisance: f64,
    pub cell_noise: f64,
    /// Uniform jitter (pixels) applied to each detection coordinate.
    pub det_jitter: f64,
    /// Deeper levels reveal fewer fine-code dimensions.
    pub level_split: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_coarse: 3,
            fine_per_coarse: 3,
            samples_per_fine: 5,
            image_size: 64,
            level_grids: vec![16, 8, 4],
            oracle_grid: 8,
            oracle_channels: 8,
            nuisance_channels: 4,
            min_box_cells: 2,
            max_box_cells: 3,
            sigma_c: 0.05,
            margin: 1.0,
            nuisance: 1.0,
            cell_noise: 0.005,
            det_jitter: 2.0,
            level_split: true,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_coarse == 0 || self.fine_per_coarse == 0 || self.samples_per_fine == 0 {
            return bad("class and sample counts must be positive".into());
        }
        if self.fine_per_coarse > self.oracle_channels {
            return bad(format!(
                "{} fine classes per coarse class need at least as many oracle channels, got {}",
                self.fine_per_coarse, self.oracle_channels
            ));
        }
        if self.level_grids.is_empty() {
            return bad("at least one detector level is required".into());
        }
        if self.level_grids.windows(2).any(|w| w[1] > w[0]) {
            return bad("level grids must not grow with depth".into());
        }
        for &g in self.level_grids.iter().chain([&self.oracle_grid]) {
            if g == 0 || self.image_size % g != 0 {
                return bad(format!(
                    "grid {g} does not divide image size {}",
                    self.image_size
                ));
            }
        }
        if self.min_box_cells == 0 || self.max_box_cells < self.min_box_cells {
            return bad("box cell range is empty".into());
        }
        let coarsest = *self.level_grids.last().expect("non-empty");
        if self.max_box_cells > coarsest {
            return bad(format!(
                "boxes of {} cells exceed the {coarsest}-cell grid",
                self.max_box_cells
            ));
        }
        for (name, v) in [
            ("sigma_c", self.sigma_c),
            ("margin", self.margin),
            ("nuisance", self.nuisance),
            ("cell_noise", self.cell_noise),
            ("det_jitter", self.det_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        Ok(())
    }

    pub fn detector_channels(&self) -> usize {
        self.num_coarse + self.oracle_channels + self.nuisance_channels
    }

    /// Fine-code dimensions visible at detector level `level`.
    pub fn visible_dims(&self, level: usize) -> usize {
        if !self.level_split {
            return self.oracle_channels;
        }
        let n = self.level_grids.len();
        (self.oracle_channels * (n - level)).div_ceil(n)
    }

    pub fn coarse_name(c: usize) -> String {
        format!("coarse{c}")
    }

    pub fn fine_name(c: usize, f: usize) -> String {
        format!("coarse{c}_fine{f}")
    }
}

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// `count` orthonormal vectors by Gram–Schmidt on Gaussian draws.
fn orthonormal(rng: &mut impl Rng, dim: usize, count: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v = gaussian(rng, dim);
        for b in &out {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            out.push(v);
        }
    }
    out
}

/// Class codes shared by every image of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCodes {
    pub coarse: Vec<Vec<f64>>,
    /// `fine[c][f]`, orthonormal within each coarse class.
    pub fine: Vec<Vec<Vec<f64>>>,
}

impl ClassCodes {
    pub fn draw(config: &SynthConfig) -> Self {
        let mut rng = substream(config.seed, "codes");
        let coarse = (0..config.num_coarse)
            .map(|_| {
                let mut v = gaussian(&mut rng, config.oracle_channels);
                normalize(&mut v);
                v
            })
            .collect();
        let fine = (0..config.num_coarse)
            .map(|_| orthonormal(&mut rng, config.oracle_channels, config.fine_per_coarse))
            .collect();
        Self { coarse, fine }
    }

    pub fn oracle_vector(&self, c: usize, f: usize, margin: f64) -> Vec<f64> {
        self.coarse[c]
            .iter()
            .zip(&self.fine[c][f])
            .map(|(u, v)| u + margin * v)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct PixelBox {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

fn coverage(b: PixelBox, cell: f64, y: usize, x: usize) -> f64 {
    let ox = (b.x1.min((x + 1) as f64 * cell) - b.x0.max(x as f64 * cell)).max(0.0);
    let oy = (b.y1.min((y + 1) as f64 * cell) - b.y0.max(y as f64 * cell)).max(0.0);
    ox * oy / (cell * cell)
}

fn render(
    b: PixelBox,
    image: usize,
    grid: usize,
    object: &[f64],
    noise: f64,
    rng: &mut impl Rng,
) -> Result<FeatureMap<f32>> {
    let cell = image as f64 / grid as f64;
    let mut values = Vec::with_capacity(grid * grid * object.len());
    for y in 0..grid {
        for x in 0..grid {
            let cov = coverage(b, cell, y, x);
            for &o in object {
                let n = if noise > 0.0 {
                    noise * Distribution::<f64>::sample(&StandardNormal, rng)
                } else {
                    0.0
                };
                values.push((cov * o + n) as f32);
            }
        }
    }
    FeatureMap::new(grid, grid, object.len(), values)
}

fn write_manifest(
    dir: &Path,
    images: Vec<ImageRecord>,
    taxonomy: ClassTaxonomy,
) -> Result<DatasetManifest> {
    let manifest = DatasetManifest::from_parts(dir.to_path_buf(), images, taxonomy)?;
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    load_manifest(path)
}

fn create_dirs(dir: &Path, names: &[&str]) -> Result<()> {
    for n in names {
        let p = dir.join(n);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Writes a dataset under `dir` (`manifest.json`, `features/`, `oracle/`) and
/// returns the loaded manifest.
pub fn synth_generate(config: &SynthConfig, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    config.validate()?;
    let dir = dir.as_ref();
    create_dirs(dir, &["features", "oracle"])?;
    let codes = ClassCodes::draw(config);
    let coarsest = *config.level_grids.last().expect("validated");
    let align = (config.image_size / coarsest) as f64;
    let img = config.image_size as f64;
    let mut images = Vec::new();
    let mut index = 0u64;
    for c in 0..config.num_coarse {
        for f in 0..config.fine_per_coarse {
            for _ in 0..config.samples_per_fine {
                let id = format!("img{index:04}");
                let mut rng = indexed_substream(config.seed, "image", index);
                index += 1;
                let bw = rng.random_range(config.min_box_cells..=config.max_box_cells);
                let bh = rng.random_range(config.min_box_cells..=config.max_box_cells);
                let cx = rng.random_range(0..=coarsest - bw);
                let cy = rng.random_range(0..=coarsest - bh);
                let b = PixelBox {
                    x0: cx as f64 * align,
                    y0: cy as f64 * align,
                    x1: (cx + bw) as f64 * align,
                    y1: (cy + bh) as f64 * align,
                };
                let z: Vec<f64> = gaussian(&mut rng, config.nuisance_channels)
                    .into_iter()
                    .map(|v| v * config.nuisance)
                    .collect();
                let mut features = Vec::with_capacity(config.level_grids.len());
                for (j, &g) in config.level_grids.iter().enumerate() {
                    let visible = config.visible_dims(j);
                    let mut obj = vec![0.0; config.detector_channels()];
                    obj[c] = 1.0;
                    for (k, v) in codes.fine[c][f].iter().enumerate().take(visible) {
                        obj[config.num_coarse + k] = config.sigma_c * v;
                    }
                    obj[config.num_coarse + config.oracle_channels..].copy_from_slice(&z);
                    let map = render(b, config.image_size, g, &obj, config.cell_noise, &mut rng)?;
                    let rel = PathBuf::from("features").join(format!("{id}_l{j}.axft"));
                    map.save(dir.join(&rel))?;
                    features.push(rel);
                }
                let oracle_obj = codes.oracle_vector(c, f, config.margin);
                let oracle = render(
                    b,
                    config.image_size,
                    config.oracle_grid,
                    &oracle_obj,
                    config.cell_noise,
                    &mut rng,
                )?;
                let orel = PathBuf::from("oracle").join(format!("{id}.axft"));
                oracle.save(dir.join(&orel))?;

                let coarse = SynthConfig::coarse_name(c);
                let fine = SynthConfig::fine_name(c, f);
                let gt =
                    Detection::new(b.x0, b.y0, b.x1, b.y1, coarse.clone(), 1.0).with_fine(fine);
                let mut jit = |v: f64| {
                    if config.det_jitter > 0.0 {
                        (v + rng.random_range(-config.det_jitter..=config.det_jitter))
                            .clamp(0.0, img)
                    } else {
                        v
                    }
                };
                let (mut x0, mut y0, mut x1, mut y1) = (jit(b.x0), jit(b.y0), jit(b.x1), jit(b.y1));
                if x1 - x0 < 1.0 {
                    (x0, x1) = (b.x0, b.x1);
                }
                if y1 - y0 < 1.0 {
                    (y0, y1) = (b.y0, b.y1);
                }
                let confidence = rng.random_range(0.5..1.0);
                images.push(ImageRecord {
                    id,
                    size: ImageSize {
                        width: img,
                        height: img,
                    },
                    features,
                    oracle: Some(orel),
                    detections: vec![Detection::new(x0, y0, x1, y1, coarse, confidence)],
                    ground_truth: vec![gt],
                });
            }
        }
    }
    let taxonomy: BTreeMap<String, Vec<String>> = (0..config.num_coarse)
        .map(|c| {
            (
                SynthConfig::coarse_name(c),
                (0..config.fine_per_coarse)
                    .map(|f| SynthConfig::fine_name(c, f))
                    .collect(),
            )
        })
        .collect();
    write_manifest(dir, images, ClassTaxonomy::new(taxonomy)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearOracleConfig {
    pub images: usize,
    pub grid: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub seed: u64,
}

impl Default for LinearOracleConfig {
    fn default() -> Self {
        Self {
            images: 16,
            grid: 8,
            in_channels: 4,
            out_channels: 3,
            seed: 0,
        }
    }
}

/// The fixed map `O = A·F + b` used by [`linear_oracle_generate`].
pub fn linear_oracle_map(config: &LinearOracleConfig) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = substream(config.seed, "linear-map");
    let a = (0..config.out_channels)
        .map(|_| {
            (0..config.in_channels)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect();
    let b = (0..config.out_channels)
        .map(|_| rng.random_range(-0.5..0.5))
        .collect();
    (a, b)
}

pub fn linear_oracle_generate(
    config: &LinearOracleConfig,
    dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    if config.images == 0 || config.grid == 0 || config.in_channels == 0 || config.out_channels == 0
    {
        return Err(Error::Config("linear-oracle sizes must be positive".into()));
    }
    let dir = dir.as_ref();
    create_dirs(dir, &["features", "oracle"])?;
    let (a, b) = linear_oracle_map(config);
    let g = config.grid;
    let side = g as f64;
    let mut images = Vec::with_capacity(config.images);
    for i in 0..config.images {
        let id = format!("img{i:04}");
        let mut rng = indexed_substream(config.seed, "image", i as u64);
        let feat_vals: Vec<f64> = (0..g * g * config.in_channels)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let feat = FeatureMap::new(
            g,
            g,
            config.in_channels,
            feat_vals.iter().map(|&v| v as f32).collect(),
        )?;
        // The oracle is computed from the stored f32 values so the map is exact.
        let stored: Vec<f64> = feat.values().iter().map(|&v| v as f64).collect();
        let mut oracle = Vec::with_capacity(g * g * config.out_channels);
        for px in stored.chunks(config.in_channels) {
            for (row, bias) in a.iter().zip(&b) {
                oracle.push((row.iter().zip(px).map(|(w, x)| w * x).sum::<f64>() + bias) as f32);
            }
        }
        let oracle = FeatureMap::new(g, g, config.out_channels, oracle)?;
        let frel = PathBuf::from("features").join(format!("{id}_l0.axft"));
        let orel = PathBuf::from("oracle").join(format!("{id}.axft"));
        feat.save(dir.join(&frel))?;
        oracle.save(dir.join(&orel))?;
        let gt = Detection::new(0.0, 0.0, side, side, "object", 1.0).with_fine("object_0");
        images.push(ImageRecord {
            id,
            size: ImageSize {
                width: side,
                height: side,
            },
            features: vec![frel],
            oracle: Some(orel),
            detections: vec![Detection::new(0.0, 0.0, side, side, "object", 0.9)],
            ground_truth: vec![gt],
        });
    }
    let taxonomy = ClassTaxonomy::new(BTreeMap::from([(
        "object".to_string(),
        vec!["object_0".to_string()],
    )]))?;
    write_manifest(dir, images, taxonomy)
}
