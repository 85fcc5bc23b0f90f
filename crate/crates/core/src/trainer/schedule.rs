use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Linear warmup followed by cosine annealing to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmupCosine {
    pub warmup_iters: usize,
    pub total_iters: usize,
}

impl WarmupCosine {
    pub fn new(warmup_iters: usize, total_iters: usize) -> Result<Self> {
        if total_iters <= warmup_iters {
            return Err(Error::Config(format!(
                "{total_iters} total iterations do not exceed {warmup_iters} warmup iterations"
            )));
        }
        Ok(Self {
            warmup_iters,
            total_iters,
        })
    }

    /// Fraction of the maximum at `iter`, in `[0, 1]`.
    pub fn factor(&self, iter: usize) -> Result<f64> {
        if iter >= self.total_iters {
            return Err(Error::Domain(format!(
                "iteration {iter} outside schedule of {} iterations",
                self.total_iters
            )));
        }
        if iter < self.warmup_iters {
            return Ok(iter as f64 / self.warmup_iters as f64);
        }
        let progress =
            (iter - self.warmup_iters) as f64 / (self.total_iters - self.warmup_iters) as f64;
        Ok(0.5 * (1.0 + (PI * progress).cos()))
    }
}

/// `(lr, wd)` at `iter`; both follow the same warmup-cosine shape with their own maxima.
pub fn schedule(
    iter: usize,
    total_iters: usize,
    warmup_iters: usize,
    lr_max: f64,
    wd_max: f64,
) -> Result<(f64, f64)> {
    let f = WarmupCosine::new(warmup_iters, total_iters)?.factor(iter)?;
    Ok((lr_max * f, wd_max * f))
}
