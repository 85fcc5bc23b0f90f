//! Stride-1, zero same-padded 2-D convolution over `(y, x, channel)` grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_store::Grid;

/// One convolution: `weight` is laid out `[ky][kx][in][out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(kernel: usize, in_channels: usize, out_channels: usize) -> Result<Self> {
        if kernel % 2 == 0 || kernel == 0 {
            return Err(Error::Config(format!("kernel size {kernel} must be odd")));
        }
        Ok(Self {
            kernel,
            in_channels,
            out_channels,
            weight: vec![0.0; kernel * kernel * in_channels * out_channels],
            bias: vec![0.0; out_channels],
        })
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    #[inline]
    pub fn weight_index(&self, ky: usize, kx: usize, i: usize, o: usize) -> usize {
        ((ky * self.kernel + kx) * self.in_channels + i) * self.out_channels + o
    }

    pub fn check_input(&self, input: &Grid) -> Result<()> {
        if input.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "convolution expects {} input channels, got {}",
                self.in_channels,
                input.channels()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Grid) -> Result<Grid> {
        self.check_input(input)?;
        let (h, w, _) = input.shape();
        let (k, cin, cout) = (self.kernel, self.in_channels, self.out_channels);
        let r = k / 2;
        let mut out = Grid::zeros(h, w, cout);
        for y in 0..h {
            for x in 0..w {
                let mut acc = self.bias.clone();
                for ky in 0..k {
                    let Some(sy) = (y + ky).checked_sub(r).filter(|&v| v < h) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(sx) = (x + kx).checked_sub(r).filter(|&v| v < w) else {
                            continue;
                        };
                        let px = input.pixel(sy, sx);
                        let base = (ky * k + kx) * cin * cout;
                        for (i, &v) in px.iter().enumerate() {
                            let row = &self.weight[base + i * cout..base + (i + 1) * cout];
                            for (a, wv) in acc.iter_mut().zip(row) {
                                *a += v * wv;
                            }
                        }
                    }
                }
                out.pixel_mut(y, x).copy_from_slice(&acc);
            }
        }
        Ok(out)
    }

    /// Accumulates `∂L/∂weight` and `∂L/∂bias` into `grad` and, when requested,
    /// returns `∂L/∂input`.
    pub fn backward(
        &self,
        input: &Grid,
        grad_out: &Grid,
        grad: &mut ConvLayer,
        want_input_grad: bool,
    ) -> Option<Grid> {
        let (h, w, _) = input.shape();
        let (k, cin, cout) = (self.kernel, self.in_channels, self.out_channels);
        let r = k / 2;
        let mut grad_in = want_input_grad.then(|| Grid::zeros(h, w, cin));
        for y in 0..h {
            for x in 0..w {
                let g = grad_out.pixel(y, x);
                for (b, gv) in grad.bias.iter_mut().zip(g) {
                    *b += gv;
                }
                for ky in 0..k {
                    let Some(sy) = (y + ky).checked_sub(r).filter(|&v| v < h) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(sx) = (x + kx).checked_sub(r).filter(|&v| v < w) else {
                            continue;
                        };
                        let px = input.pixel(sy, sx);
                        let base = (ky * k + kx) * cin * cout;
                        for (i, &v) in px.iter().enumerate() {
                            let off = base + i * cout;
                            let grow = &mut grad.weight[off..off + cout];
                            for (gw, gv) in grow.iter_mut().zip(g) {
                                *gw += v * gv;
                            }
                        }
                        if let Some(gi) = grad_in.as_mut() {
                            let dst = gi.pixel_mut(sy, sx);
                            for (i, d) in dst.iter_mut().enumerate() {
                                let off = base + i * cout;
                                let row = &self.weight[off..off + cout];
                                *d += row.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                }
            }
        }
        grad_in
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid-weighted linear unit, `x · σ(x)`.
#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}
