use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::{silu, ConvLayer};
use crate::error::{Error, Result};
use crate::tensor_store::{read_tensor, write_tensor, Grid, Tensor};

/// Channel-differential architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "linear-1x1")]
    Linear1x1,
    #[serde(rename = "linear-3x3")]
    Linear3x3,
    #[serde(rename = "linear-5x5")]
    Linear5x5,
    /// conv3×3 → SiLU → conv3×3, hidden width equal to the oracle depth.
    #[serde(rename = "nonlinear-3x3")]
    NonLinear3x3,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Linear1x1,
        Variant::Linear3x3,
        Variant::Linear5x5,
        Variant::NonLinear3x3,
    ];

    pub fn kernel(self) -> usize {
        match self {
            Variant::Linear1x1 => 1,
            Variant::Linear3x3 | Variant::NonLinear3x3 => 3,
            Variant::Linear5x5 => 5,
        }
    }

    pub fn is_linear(self) -> bool {
        !matches!(self, Variant::NonLinear3x3)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Linear1x1 => "linear-1x1",
            Variant::Linear3x3 => "linear-3x3",
            Variant::Linear5x5 => "linear-5x5",
            Variant::NonLinear3x3 => "nonlinear-3x3",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown translator variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelDifferentialConfig {
    pub variant: Variant,
    /// Detector channel depth per pyramid level, shallowest first.
    pub input_channels: Vec<usize>,
    /// Oracle channel depth.
    pub output_channels: usize,
}

/// Channel-differential weights for a single pyramid level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelParams {
    pub layers: Vec<ConvLayer>,
}

impl LevelParams {
    pub fn input_channels(&self) -> usize {
        self.layers[0].in_channels
    }

    pub fn output_channels(&self) -> usize {
        self.layers[self.layers.len() - 1].out_channels
    }

    /// Runs the channel differential on one level.
    pub fn forward(&self, input: &Grid) -> Result<Grid> {
        let mut h = self.layers[0].forward(input)?;
        for layer in &self.layers[1..] {
            h.values_mut().iter_mut().for_each(|v| *v = silu(*v));
            h = layer.forward(&h)?;
        }
        Ok(h)
    }
}

/// All trainable translator state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslatorParams {
    pub variant: Variant,
    pub levels: Vec<LevelParams>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerHeader {
    kernel: usize,
    in_channels: usize,
    out_channels: usize,
    weight: String,
    bias: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamsHeader {
    variant: Variant,
    /// Pyramid level order: index 0 is the shallowest level.
    levels: Vec<Vec<LayerHeader>>,
}

impl TranslatorParams {
    pub fn zeros(config: &ChannelDifferentialConfig) -> Result<Self> {
        if config.input_channels.is_empty() {
            return Err(Error::Config("translator needs at least one level".into()));
        }
        if config.output_channels == 0 || config.input_channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let k = config.variant.kernel();
        let levels = config
            .input_channels
            .iter()
            .map(|&cin| {
                let mut layers = vec![ConvLayer::zeros(k, cin, config.output_channels)?];
                if !config.variant.is_linear() {
                    layers.push(ConvLayer::zeros(
                        k,
                        config.output_channels,
                        config.output_channels,
                    )?);
                }
                Ok(LevelParams { layers })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            variant: config.variant,
            levels,
        })
    }

    /// Fan-in uniform initialisation `U(-a, a)`, `a = (k²·fan_in)^{-1/2}`, zero biases.
    pub fn init(config: &ChannelDifferentialConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        for level in &mut params.levels {
            for layer in &mut level.layers {
                let a = 1.0 / ((layer.kernel * layer.kernel * layer.in_channels) as f64).sqrt();
                for w in &mut layer.weight {
                    *w = rng.random_range(-a..a);
                }
            }
        }
        Ok(params)
    }

    pub fn config(&self) -> ChannelDifferentialConfig {
        ChannelDifferentialConfig {
            variant: self.variant,
            input_channels: self
                .levels
                .iter()
                .map(LevelParams::input_channels)
                .collect(),
            output_channels: self.output_channels(),
        }
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn output_channels(&self) -> usize {
        self.levels[0].output_channels()
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(ConvLayer::num_params).sum()
    }

    fn layers(&self) -> impl Iterator<Item = &ConvLayer> {
        self.levels.iter().flat_map(|l| l.layers.iter())
    }

    /// Parameters in a fixed order: per level, per layer, weights then biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in self.layers() {
            out.extend_from_slice(&layer.weight);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for level in &mut self.levels {
            for layer in &mut level.layers {
                let n = layer.weight.len();
                layer.weight.copy_from_slice(&flat[off..off + n]);
                off += n;
                let n = layer.bias.len();
                layer.bias.copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        let mut p = self.clone();
        p.set_flat(flat)?;
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Writes `<stem>.json` plus one tensor file per kernel and bias into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut header = ParamsHeader {
            variant: self.variant,
            levels: Vec::new(),
        };
        for (li, level) in self.levels.iter().enumerate() {
            let mut layers = Vec::new();
            for (ci, layer) in level.layers.iter().enumerate() {
                let weight = format!("{stem}_level{li}_conv{ci}_weight.axft");
                let bias = format!("{stem}_level{li}_conv{ci}_bias.axft");
                let k = layer.kernel;
                write_tensor(
                    dir.join(&weight),
                    &Tensor::new(
                        vec![k, k, layer.in_channels, layer.out_channels],
                        layer.weight.iter().map(|&v| v as f32).collect(),
                    )?,
                )?;
                write_tensor(
                    dir.join(&bias),
                    &Tensor::new(
                        vec![layer.out_channels],
                        layer.bias.iter().map(|&v| v as f32).collect(),
                    )?,
                )?;
                layers.push(LayerHeader {
                    kernel: k,
                    in_channels: layer.in_channels,
                    out_channels: layer.out_channels,
                    weight,
                    bias,
                });
            }
            header.levels.push(layers);
        }
        let path = dir.join(format!("{stem}.json"));
        let text =
            serde_json::to_string_pretty(&header).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(format!("{stem}.json"));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let header: ParamsHeader = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let mut levels = Vec::new();
        for (li, layers) in header.levels.iter().enumerate() {
            let expected_layers = if header.variant.is_linear() { 1 } else { 2 };
            if layers.len() != expected_layers {
                return Err(Error::Format(format!(
                    "level {li}: {} layers for variant {}",
                    layers.len(),
                    header.variant
                )));
            }
            let mut out = Vec::new();
            for lh in layers {
                let k = lh.kernel;
                if k != header.variant.kernel() {
                    return Err(Error::Format(format!(
                        "level {li}: kernel {k} does not match variant {}",
                        header.variant
                    )));
                }
                let w = read_tensor(dir.join(&lh.weight))?;
                let b = read_tensor(dir.join(&lh.bias))?;
                if w.dims != [k, k, lh.in_channels, lh.out_channels] || b.dims != [lh.out_channels]
                {
                    return Err(Error::Shape(format!(
                        "level {li}: stored kernel {:?} / bias {:?} disagree with header",
                        w.dims, b.dims
                    )));
                }
                out.push(ConvLayer {
                    kernel: k,
                    in_channels: lh.in_channels,
                    out_channels: lh.out_channels,
                    weight: w.values.iter().map(|&v| v as f64).collect(),
                    bias: b.values.iter().map(|&v| v as f64).collect(),
                });
            }
            levels.push(LevelParams { layers: out });
        }
        if levels.is_empty() {
            return Err(Error::Format(format!("{}: no levels", path.display())));
        }
        Ok(Self {
            variant: header.variant,
            levels,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(variant: Variant) -> ChannelDifferentialConfig {
        ChannelDifferentialConfig {
            variant,
            input_channels: vec![2, 3],
            output_channels: 4,
        }
    }

    #[test]
    fn shapes_per_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for v in Variant::ALL {
            let p = TranslatorParams::init(&config(v), &mut rng).unwrap();
            let k = v.kernel();
            let extra = if v.is_linear() { 0 } else { k * k * 16 + 4 };
            assert_eq!(p.num_params(), k * k * (2 + 3) * 4 + 8 + 2 * extra);
            assert_eq!(p.config(), config(v));
            let bound = 1.0 / ((k * k * 2) as f64).sqrt();
            assert!(p.levels[0].layers[0].weight.iter().all(|w| w.abs() < bound));
            assert!(p.levels[0].layers[0].bias.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn flat_roundtrip_and_disk_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = TranslatorParams::init(&config(Variant::NonLinear3x3), &mut rng).unwrap();
        let flat = p.flatten();
        assert_eq!(p.with_flat(&flat).unwrap(), p);
        let dir = tempfile::tempdir().unwrap();
        p.save(dir.path(), "raw").unwrap();
        let q = TranslatorParams::load(dir.path(), "raw").unwrap();
        assert_eq!(q.variant, p.variant);
        for (a, b) in q.flatten().iter().zip(&flat) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn variant_names_parse() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("linear-7x7".parse::<Variant>().is_err());
    }
}
