//! Analytic backpropagation of the distillation loss through the residual chain.
//!
//! The spatial differential is a fixed linear operator, so its backward pass is
//! its adjoint. Gradients of the residual sums reduce to prefix sums over levels.

use crate::error::{Error, Result};
use crate::tensor_store::{FeaturePyramid, Grid};
use crate::translator::{
    accumulate_residuals, distillation_loss, silu, silu_grad, ChainPlan, LevelParams,
    LossBreakdown, TranslatorParams,
};

struct LevelCache {
    input: Grid,
    /// Pre-activation of the first convolution (nonlinear variant only).
    hidden: Option<Grid>,
    output: Grid,
}

fn forward_level(level: &LevelParams, input: &Grid) -> Result<LevelCache> {
    let first = level.layers[0].forward(input)?;
    match level.layers.get(1) {
        None => Ok(LevelCache {
            input: input.clone(),
            hidden: None,
            output: first,
        }),
        Some(second) => {
            let mut act = first.clone();
            act.values_mut().iter_mut().for_each(|v| *v = silu(*v));
            let output = second.forward(&act)?;
            Ok(LevelCache {
                input: input.clone(),
                hidden: Some(first),
                output,
            })
        }
    }
}

fn backward_level(
    level: &LevelParams,
    cache: &LevelCache,
    grad_out: &Grid,
    grad: &mut LevelParams,
) {
    match &cache.hidden {
        None => {
            level.layers[0].backward(&cache.input, grad_out, &mut grad.layers[0], false);
        }
        Some(hidden) => {
            let mut act = hidden.clone();
            act.values_mut().iter_mut().for_each(|v| *v = silu(*v));
            let mut g_act = level.layers[1]
                .backward(&act, grad_out, &mut grad.layers[1], true)
                .expect("input gradient requested");
            for (g, &h) in g_act.values_mut().iter_mut().zip(hidden.values()) {
                *g *= silu_grad(h);
            }
            level.layers[0].backward(&cache.input, &g_act, &mut grad.layers[0], false);
        }
    }
}

/// `∂L/∂R` for one residual map. `|x|` has subgradient 0 at 0 and the Euclidean
/// norm has gradient 0 at a zero difference vector.
fn residual_grad(r: &Grid, oracle: &Grid) -> Grid {
    let (h, w, c) = oracle.shape();
    let scale = 1.0 / (h * w) as f64;
    let mut g = Grid::zeros(h, w, c);
    let c = c.max(1);
    for ((gp, rp), op) in g
        .values_mut()
        .chunks_exact_mut(c)
        .zip(r.values().chunks_exact(c))
        .zip(oracle.values().chunks_exact(c))
    {
        let norm = rp
            .iter()
            .zip(op)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        for ((gv, a), b) in gp.iter_mut().zip(rp).zip(op) {
            let d = a - b;
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            let l2 = if norm > 0.0 { d / norm } else { 0.0 };
            *gv = (sign + l2) * scale;
        }
    }
    g
}

/// Loss and its gradient with respect to every translator parameter.
pub fn loss_gradient_with_plan(
    plan: &ChainPlan,
    params: &TranslatorParams,
    pyramid: &FeaturePyramid<f64>,
    oracle: &Grid,
) -> Result<(LossBreakdown, TranslatorParams)> {
    plan.check(params, &pyramid.channel_depths())?;
    let (oh, ow, oc) = plan.oracle_shape();
    if oracle.shape() != (oh, ow, oc) {
        return Err(Error::Shape(format!(
            "oracle is {:?}, plan expects {:?}",
            oracle.shape(),
            (oh, ow, oc)
        )));
    }
    let caches = pyramid
        .levels()
        .iter()
        .zip(&params.levels)
        .map(|(f, p)| forward_level(p, f))
        .collect::<Result<Vec<_>>>()?;
    let terms = caches
        .iter()
        .zip(plan.ops())
        .map(|(c, op)| op.apply(&c.output))
        .collect::<Result<Vec<_>>>()?;
    let residuals = accumulate_residuals(terms);
    let loss = distillation_loss(&residuals, oracle)?;

    // R_i depends on T_j for every j >= i, so dL/dT_j = sum_{i <= j} dL/dR_i.
    let mut grad = params.clone();
    for level in &mut grad.levels {
        for layer in &mut level.layers {
            layer.weight.iter_mut().for_each(|v| *v = 0.0);
            layer.bias.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut prefix: Option<Grid> = None;
    for (j, r) in residuals.iter().enumerate() {
        let g = residual_grad(r, oracle);
        let acc = match prefix.take() {
            Some(mut p) => {
                p.add_assign(&g);
                p
            }
            None => g,
        };
        let g_out = plan.ops()[j].adjoint(&acc);
        backward_level(&params.levels[j], &caches[j], &g_out, &mut grad.levels[j]);
        prefix = Some(acc);
    }
    Ok((loss, grad))
}

/// Convenience wrapper that builds the resampling plan from the inputs.
pub fn loss_gradient(
    params: &TranslatorParams,
    pyramid: &FeaturePyramid<f64>,
    oracle: &Grid,
    delta: f64,
) -> Result<(LossBreakdown, TranslatorParams)> {
    let plan = ChainPlan::for_pyramid(pyramid, oracle.shape(), delta)?;
    loss_gradient_with_plan(&plan, params, pyramid, oracle)
}
