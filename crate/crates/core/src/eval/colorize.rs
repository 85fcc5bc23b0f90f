//! False-color rendering of feature maps.
//!
//! A pointwise encoder `c = σ(A·o + a)` into `[0, 1]³` is fitted jointly with a
//! pointwise decoder `ô = B·c + b` by minimizing mean squared reconstruction
//! error on oracle maps. The frozen encoder then colors any map with the same
//! channel count, so auxiliary and oracle features share one palette.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor_store::Grid;
use crate::trainer::Adam;
use crate::translator::sigmoid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColorizeConfig {
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ColorizeConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Colorizer {
    channels: usize,
    /// `3 × channels`, row-major.
    enc_w: Vec<f64>,
    enc_b: [f64; 3],
    /// `channels × 3`, row-major.
    dec_w: Vec<f64>,
    dec_b: Vec<f64>,
    pub trace: Vec<f64>,
}

impl Colorizer {
    fn num_params(c: usize) -> usize {
        3 * c + 3 + 3 * c + c
    }

    fn flat(&self) -> Vec<f64> {
        let mut v = self.enc_w.clone();
        v.extend(self.enc_b);
        v.extend(&self.dec_w);
        v.extend(&self.dec_b);
        v
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let c = self.channels;
        self.enc_w.copy_from_slice(&flat[..3 * c]);
        self.enc_b.copy_from_slice(&flat[3 * c..3 * c + 3]);
        self.dec_w.copy_from_slice(&flat[3 * c + 3..6 * c + 3]);
        self.dec_b.copy_from_slice(&flat[6 * c + 3..]);
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn encode_pixel(&self, o: &[f64]) -> [f64; 3] {
        let c = self.channels;
        let mut out = [0.0; 3];
        for (k, v) in out.iter_mut().enumerate() {
            let z: f64 = self.enc_w[k * c..(k + 1) * c]
                .iter()
                .zip(o)
                .map(|(w, x)| w * x)
                .sum::<f64>()
                + self.enc_b[k];
            *v = sigmoid(z);
        }
        out
    }

    fn decode_pixel(&self, rgb: &[f64; 3], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.dec_b[i] + (0..3).map(|k| self.dec_w[i * 3 + k] * rgb[k]).sum::<f64>();
        }
    }

    fn check(&self, map: &Grid) -> Result<()> {
        if map.channels() != self.channels {
            return Err(Error::Shape(format!(
                "colorizer fitted on {} channels cannot encode a {}-channel map",
                self.channels,
                map.channels()
            )));
        }
        Ok(())
    }

    /// Mean squared reconstruction error over all cells and channels.
    pub fn reconstruction_loss(&self, maps: &[Grid]) -> Result<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        let mut rec = vec![0.0; self.channels];
        for m in maps {
            self.check(m)?;
            for px in m.values().chunks(self.channels) {
                self.decode_pixel(&self.encode_pixel(px), &mut rec);
                sum += rec
                    .iter()
                    .zip(px)
                    .map(|(r, o)| (r - o) * (r - o))
                    .sum::<f64>();
                n += px.len();
            }
        }
        Ok(if n == 0 { 0.0 } else { sum / n as f64 })
    }

    fn loss_and_grad(&self, maps: &[Grid]) -> (f64, Vec<f64>) {
        let c = self.channels;
        let n: usize = maps.iter().map(|m| m.values().len()).sum();
        let scale = 1.0 / n.max(1) as f64;
        let mut g = vec![0.0; Self::num_params(c)];
        let (g_enc_w, rest) = g.split_at_mut(3 * c);
        let (g_enc_b, rest) = rest.split_at_mut(3);
        let (g_dec_w, g_dec_b) = rest.split_at_mut(3 * c);
        let mut loss = 0.0;
        let mut rec = vec![0.0; c];
        for m in maps {
            for px in m.values().chunks(c) {
                let rgb = self.encode_pixel(px);
                self.decode_pixel(&rgb, &mut rec);
                let mut d_rgb = [0.0; 3];
                for i in 0..c {
                    let d = rec[i] - px[i];
                    loss += d * d;
                    let gr = 2.0 * d * scale;
                    g_dec_b[i] += gr;
                    for k in 0..3 {
                        g_dec_w[i * 3 + k] += gr * rgb[k];
                        d_rgb[k] += gr * self.dec_w[i * 3 + k];
                    }
                }
                for k in 0..3 {
                    let dz = d_rgb[k] * rgb[k] * (1.0 - rgb[k]);
                    g_enc_b[k] += dz;
                    for (gw, x) in g_enc_w[k * c..(k + 1) * c].iter_mut().zip(px) {
                        *gw += dz * x;
                    }
                }
            }
        }
        (loss * scale, g)
    }

    /// Fits encoder and decoder on `maps` with full-batch Adam.
    pub fn fit(maps: &[Grid], config: &ColorizeConfig) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Config("colorizer needs at least one map to fit".into()))?;
        let c = first.channels();
        if c == 0 || maps.iter().any(|m| m.channels() != c) {
            return Err(Error::Shape(
                "colorizer fitting maps must share a positive channel count".into(),
            ));
        }
        if !(config.lr > 0.0 && config.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                config.lr
            )));
        }
        let mut rng = substream(config.seed, "colorize");
        let a = 1.0 / (c as f64).sqrt();
        let b = 1.0 / 3f64.sqrt();
        let mut model = Self {
            channels: c,
            enc_w: (0..3 * c).map(|_| rng.random_range(-a..a)).collect(),
            enc_b: [0.0; 3],
            dec_w: (0..3 * c).map(|_| rng.random_range(-b..b)).collect(),
            dec_b: vec![0.0; c],
            trace: Vec::with_capacity(config.iterations + 1),
        };
        let mut theta = model.flat();
        let mut adam = Adam::new(theta.len());
        for iteration in 0..config.iterations {
            let (loss, grad) = model.loss_and_grad(maps);
            model.trace.push(loss);
            if !loss.is_finite() {
                return Err(Error::FitDivergence {
                    iteration,
                    trace: model.trace,
                });
            }
            adam.step(&mut theta, &grad, config.lr, 0.0);
            model.set_flat(&theta);
        }
        let final_loss = model.reconstruction_loss(maps)?;
        model.trace.push(final_loss);
        if !final_loss.is_finite() {
            return Err(Error::FitDivergence {
                iteration: config.iterations,
                trace: model.trace,
            });
        }
        Ok(model)
    }

    /// Loss after the last update.
    pub fn final_loss(&self) -> f64 {
        self.trace.last().copied().unwrap_or(f64::NAN)
    }

    /// `(h, w, 3)` grid of colors in `[0, 1]`.
    pub fn encode(&self, map: &Grid) -> Result<Grid> {
        self.check(map)?;
        let values = map
            .values()
            .chunks(self.channels)
            .flat_map(|px| self.encode_pixel(px))
            .collect();
        Grid::new(map.height(), map.width(), 3, values)
    }

    pub fn to_image(&self, map: &Grid, scale: u32) -> Result<RgbImage> {
        let rgb = self.encode(map)?;
        Ok(rgb_image(&rgb, scale))
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Nearest-neighbor upscaled RGB image from a 3-channel grid in `[0, 1]`.
pub fn rgb_image(rgb: &Grid, scale: u32) -> RgbImage {
    let s = scale.max(1);
    ImageBuffer::from_fn(rgb.width() as u32 * s, rgb.height() as u32 * s, |x, y| {
        let p = rgb.pixel((y / s) as usize, (x / s) as usize);
        Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])
    })
}

/// Grayscale image of a single-channel map in `[-1, 1]`, mapped to `[0, 255]`.
pub fn similarity_image(sim: &Grid, scale: u32) -> ImageBuffer<Luma<u8>, Vec<u8>> {
    let s = scale.max(1);
    ImageBuffer::from_fn(sim.width() as u32 * s, sim.height() as u32 * s, |x, y| {
        Luma([to_u8(
            0.5 * (sim.get((y / s) as usize, (x / s) as usize, 0) + 1.0),
        )])
    })
}

/// Pointwise cosine similarity between two maps of equal shape; 1 where both
/// vectors vanish and 0 where only one does.
pub fn cosine_similarity_map(a: &Grid, b: &Grid) -> Result<Grid> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "similarity of {:?} and {:?} maps",
            a.shape(),
            b.shape()
        )));
    }
    let c = a.channels();
    let values = a
        .values()
        .chunks(c)
        .zip(b.values().chunks(c))
        .map(|(p, q)| {
            let dot: f64 = p.iter().zip(q).map(|(x, y)| x * y).sum();
            let np = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nq = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            match (np == 0.0, nq == 0.0) {
                (true, true) => 1.0,
                (true, false) | (false, true) => 0.0,
                _ => (dot / (np * nq)).clamp(-1.0, 1.0),
            }
        })
        .collect();
    Grid::new(a.height(), a.width(), 1, values)
}

pub fn save_png(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

pub fn save_gray_png(img: &ImageBuffer<Luma<u8>, Vec<u8>>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}
