//! Translator block: a learnable channel differential per pyramid level, a
//! parameter-free spatial differential, and the residual chain that sums the
//! translated levels into auxiliary feature maps at oracle resolution.

mod conv;
mod params;
mod resample;

pub use conv::{sigmoid, silu, silu_grad, ConvLayer};
pub use params::{ChannelDifferentialConfig, LevelParams, TranslatorParams, Variant};
pub use resample::{
    select_resampler, spatial_differential, ResampleOp, ResamplerKind, DEFAULT_DELTA,
};

use crate::error::{Error, Result};
use crate::tensor_store::{FeatureMap, FeaturePyramid, Grid, Scalar};

/// `(height, width, channels)` of the oracle features.
pub type OracleShape = (usize, usize, usize);

/// Applies one level's channel differential; spatial size is preserved.
pub fn channel_differential<T: Scalar>(input: &FeatureMap<T>, level: &LevelParams) -> Result<Grid> {
    level.forward(&input.cast())
}

/// Per-level resamplers from each pyramid level to the oracle grid.
#[derive(Debug, Clone)]
pub struct ChainPlan {
    ops: Vec<ResampleOp>,
    oracle: OracleShape,
}

impl ChainPlan {
    pub fn new(level_sizes: &[(usize, usize)], oracle: OracleShape, delta: f64) -> Result<Self> {
        let ops = level_sizes
            .iter()
            .enumerate()
            .map(|(i, &hw)| {
                ResampleOp::adaptive(hw, (oracle.0, oracle.1), delta)
                    .map_err(|e| Error::Shape(format!("level {}: {e}", i + 1)))
            })
            .collect::<Result<_>>()?;
        Ok(Self { ops, oracle })
    }

    pub fn for_pyramid<T: Scalar>(
        pyramid: &FeaturePyramid<T>,
        oracle: OracleShape,
        delta: f64,
    ) -> Result<Self> {
        let sizes: Vec<_> = pyramid
            .levels()
            .iter()
            .map(|l| (l.height(), l.width()))
            .collect();
        Self::new(&sizes, oracle, delta)
    }

    pub fn ops(&self) -> &[ResampleOp] {
        &self.ops
    }

    pub fn oracle_shape(&self) -> OracleShape {
        self.oracle
    }

    pub fn check(&self, params: &TranslatorParams, pyramid_channels: &[usize]) -> Result<()> {
        if params.num_levels() != self.ops.len() || pyramid_channels.len() != self.ops.len() {
            return Err(Error::Shape(format!(
                "translator has {} levels, pyramid has {}",
                params.num_levels(),
                pyramid_channels.len()
            )));
        }
        if params.output_channels() != self.oracle.2 {
            return Err(Error::Shape(format!(
                "translator emits {} channels, oracle has {}",
                params.output_channels(),
                self.oracle.2
            )));
        }
        for (i, (level, &c)) in params.levels.iter().zip(pyramid_channels).enumerate() {
            if level.input_channels() != c {
                return Err(Error::Shape(format!(
                    "level {}: translator expects {} channels, features have {c}",
                    i + 1,
                    level.input_channels()
                )));
            }
        }
        Ok(())
    }

    /// `D_S(D_C(F_j))` for every level `j`.
    pub fn level_terms<T: Scalar>(
        &self,
        pyramid: &FeaturePyramid<T>,
        params: &TranslatorParams,
    ) -> Result<Vec<Grid>> {
        self.check(params, &pyramid.channel_depths())?;
        pyramid
            .levels()
            .iter()
            .zip(&params.levels)
            .zip(&self.ops)
            .map(|((f, p), op)| op.apply(&channel_differential(f, p)?))
            .collect()
    }

    /// `R_i = Σ_{j ≥ i} D_S(D_C(F_j))`, returned shallowest first.
    pub fn residuals<T: Scalar>(
        &self,
        pyramid: &FeaturePyramid<T>,
        params: &TranslatorParams,
    ) -> Result<Vec<Grid>> {
        Ok(accumulate_residuals(self.level_terms(pyramid, params)?))
    }
}

/// Suffix sums of the level terms, summed deepest level first.
pub fn accumulate_residuals(terms: Vec<Grid>) -> Vec<Grid> {
    let mut out: Vec<Grid> = Vec::with_capacity(terms.len());
    for term in terms.into_iter().rev() {
        let next = match out.last() {
            Some(prev) => {
                let mut r = term;
                r.add_assign(prev);
                r
            }
            None => term,
        };
        out.push(next);
    }
    out.reverse();
    out
}

/// Auxiliary feature maps `R_1..R_n` at oracle resolution.
pub fn residual_chain<T: Scalar>(
    pyramid: &FeaturePyramid<T>,
    params: &TranslatorParams,
    oracle: OracleShape,
    delta: f64,
) -> Result<Vec<Grid>> {
    ChainPlan::for_pyramid(pyramid, oracle, delta)?.residuals(pyramid, params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Contribution of each `R_i`, shallowest first.
    pub per_level: Vec<f64>,
}

/// Per-cell ℓ1 plus (non-squared) ℓ2 norm of `R_i − O`, averaged over cells and
/// summed over levels.
pub fn distillation_loss(residuals: &[Grid], oracle: &Grid) -> Result<LossBreakdown> {
    let cells = (oracle.height() * oracle.width()) as f64;
    let mut per_level = Vec::with_capacity(residuals.len());
    for (i, r) in residuals.iter().enumerate() {
        if r.shape() != oracle.shape() {
            return Err(Error::Shape(format!(
                "R_{} is {:?}, oracle is {:?}",
                i + 1,
                r.shape(),
                oracle.shape()
            )));
        }
        let c = oracle.channels().max(1);
        let mut sum = 0.0;
        for (rp, op) in r
            .values()
            .chunks_exact(c)
            .zip(oracle.values().chunks_exact(c))
        {
            let mut l1 = 0.0;
            let mut sq = 0.0;
            for (a, b) in rp.iter().zip(op) {
                let d = a - b;
                l1 += d.abs();
                sq += d * d;
            }
            sum += l1 + sq.sqrt();
        }
        per_level.push(sum / cells);
    }
    Ok(LossBreakdown {
        total: per_level.iter().sum(),
        per_level,
    })
}
