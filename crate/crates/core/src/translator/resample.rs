//! Parameter-free spatial resampling used as the spatial differential.
//!
//! All three kernels are separable linear operators. Coordinates follow the
//! half-pixel-center convention and samples outside the grid clamp to the edge.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_store::Grid;

pub const DEFAULT_DELTA: f64 = 0.1;
const CATMULL_ROM_A: f64 = -0.5;
const ASPECT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResamplerKind {
    Area,
    Bilinear,
    Bicubic,
}

/// Adaptive kernel choice from the resizing factor `rho = target / source`.
pub fn select_resampler(rho: f64, delta: f64) -> Result<ResamplerKind> {
    if !(rho.is_finite() && rho > 0.0) {
        return Err(Error::Domain(format!(
            "resize factor must be positive, got {rho}"
        )));
    }
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::Domain(format!(
            "delta must lie in [0, 1), got {delta}"
        )));
    }
    Ok(if rho < 1.0 - delta {
        ResamplerKind::Area
    } else if rho < 1.0 + delta {
        ResamplerKind::Bilinear
    } else {
        ResamplerKind::Bicubic
    })
}

/// Sparse interpolation weights along one axis: `taps[dst] = [(src, weight), ..]`.
#[derive(Debug, Clone, PartialEq)]
struct AxisWeights {
    taps: Vec<Vec<(usize, f64)>>,
}

impl AxisWeights {
    fn new(src: usize, dst: usize, kind: ResamplerKind) -> Self {
        let taps = (0..dst)
            .map(|j| match kind {
                ResamplerKind::Area => area_taps(src, dst, j),
                ResamplerKind::Bilinear => bilinear_taps(src, dst, j),
                ResamplerKind::Bicubic => bicubic_taps(src, dst, j),
            })
            .collect();
        Self { taps }
    }

    fn is_identity(&self) -> bool {
        self.taps
            .iter()
            .enumerate()
            .all(|(j, t)| t.len() == 1 && t[0] == (j, 1.0))
    }
}

fn area_taps(src: usize, dst: usize, j: usize) -> Vec<(usize, f64)> {
    let lo = (j * src) as f64 / dst as f64;
    let hi = ((j + 1) * src) as f64 / dst as f64;
    let width = hi - lo;
    let first = lo.floor() as usize;
    let last = (hi.ceil() as usize).min(src);
    (first..last)
        .filter_map(|i| {
            let overlap = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
            (overlap > 0.0).then_some((i, overlap / width))
        })
        .collect()
}

fn source_coord(src: usize, dst: usize, j: usize) -> f64 {
    (j as f64 + 0.5) * src as f64 / dst as f64 - 0.5
}

fn clamp_index(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

fn push_tap(taps: &mut Vec<(usize, f64)>, idx: usize, w: f64) {
    if w == 0.0 {
        return;
    }
    match taps.iter_mut().find(|(i, _)| *i == idx) {
        Some(t) => t.1 += w,
        None => taps.push((idx, w)),
    }
}

fn bilinear_taps(src: usize, dst: usize, j: usize) -> Vec<(usize, f64)> {
    let u = source_coord(src, dst, j);
    let i0 = u.floor();
    let t = u - i0;
    let i0 = i0 as i64;
    let mut taps = Vec::with_capacity(2);
    push_tap(&mut taps, clamp_index(i0, src), 1.0 - t);
    push_tap(&mut taps, clamp_index(i0 + 1, src), t);
    taps
}

fn cubic_weight(x: f64) -> f64 {
    let a = CATMULL_ROM_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

fn bicubic_taps(src: usize, dst: usize, j: usize) -> Vec<(usize, f64)> {
    let u = source_coord(src, dst, j);
    let i0 = u.floor();
    let t = u - i0;
    let i0 = i0 as i64;
    let mut taps = Vec::with_capacity(4);
    for (off, dist) in [(-1i64, 1.0 + t), (0, t), (1, 1.0 - t), (2, 2.0 - t)] {
        push_tap(&mut taps, clamp_index(i0 + off, src), cubic_weight(dist));
    }
    taps
}

/// Precomputed separable resampling from one grid size to another.
#[derive(Debug, Clone, PartialEq)]
pub struct ResampleOp {
    kind: ResamplerKind,
    src: (usize, usize),
    dst: (usize, usize),
    rows: AxisWeights,
    cols: AxisWeights,
    identity: bool,
}

impl ResampleOp {
    pub fn with_kind(
        src: (usize, usize),
        dst: (usize, usize),
        kind: ResamplerKind,
    ) -> Result<Self> {
        if src.0 == 0 || src.1 == 0 || dst.0 == 0 || dst.1 == 0 {
            return Err(Error::Shape(format!("cannot resample {src:?} to {dst:?}")));
        }
        let rows = AxisWeights::new(src.0, dst.0, kind);
        let cols = AxisWeights::new(src.1, dst.1, kind);
        let identity = rows.is_identity() && cols.is_identity();
        Ok(Self {
            kind,
            src,
            dst,
            rows,
            cols,
            identity,
        })
    }

    /// Picks the kernel from the height ratio; the width ratio must agree within 1e-6.
    pub fn adaptive(src: (usize, usize), dst: (usize, usize), delta: f64) -> Result<Self> {
        if src.0 == 0 || src.1 == 0 {
            return Err(Error::Shape(format!("cannot resample empty grid {src:?}")));
        }
        let rho = dst.0 as f64 / src.0 as f64;
        let rho_w = dst.1 as f64 / src.1 as f64;
        if ((rho - rho_w) / rho).abs() > ASPECT_TOL {
            return Err(Error::Shape(format!(
                "aspect ratio mismatch: {}x{} -> {}x{} (height factor {rho}, width factor {rho_w})",
                src.0, src.1, dst.0, dst.1
            )));
        }
        Self::with_kind(src, dst, select_resampler(rho, delta)?)
    }

    pub fn kind(&self) -> ResamplerKind {
        self.kind
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    pub fn apply(&self, input: &Grid) -> Result<Grid> {
        if (input.height(), input.width()) != self.src {
            return Err(Error::Shape(format!(
                "resampler built for {:?}, input is {}x{}",
                self.src,
                input.height(),
                input.width()
            )));
        }
        if self.identity {
            return Ok(input.clone());
        }
        let c = input.channels();
        let (sh, sw) = self.src;
        let (dh, dw) = self.dst;
        let mut mid = Grid::zeros(dh, sw, c);
        for (dy, taps) in self.rows.taps.iter().enumerate() {
            for sx in 0..sw {
                let out = mid.pixel_mut(dy, sx);
                for &(sy, wy) in taps {
                    debug_assert!(sy < sh);
                    for (o, v) in out.iter_mut().zip(input.pixel(sy, sx)) {
                        *o += wy * v;
                    }
                }
            }
        }
        let mut out = Grid::zeros(dh, dw, c);
        for dy in 0..dh {
            for (dx, taps) in self.cols.taps.iter().enumerate() {
                let dst = out.pixel_mut(dy, dx);
                for &(sx, wx) in taps {
                    for (o, v) in dst.iter_mut().zip(mid.pixel(dy, sx)) {
                        *o += wx * v;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Applies the transpose of the operator (backpropagation through resampling).
    pub fn adjoint(&self, grad_out: &Grid) -> Grid {
        if self.identity {
            return grad_out.clone();
        }
        let c = grad_out.channels();
        let (sh, sw) = self.src;
        let (dh, _) = self.dst;
        let mut mid = Grid::zeros(dh, sw, c);
        for dy in 0..dh {
            for (dx, taps) in self.cols.taps.iter().enumerate() {
                let g = grad_out.pixel(dy, dx).to_vec();
                for &(sx, wx) in taps {
                    for (m, gv) in mid.pixel_mut(dy, sx).iter_mut().zip(&g) {
                        *m += wx * gv;
                    }
                }
            }
        }
        let mut grad_in = Grid::zeros(sh, sw, c);
        for (dy, taps) in self.rows.taps.iter().enumerate() {
            for sx in 0..sw {
                let g = mid.pixel(dy, sx).to_vec();
                for &(sy, wy) in taps {
                    for (d, gv) in grad_in.pixel_mut(sy, sx).iter_mut().zip(&g) {
                        *d += wy * gv;
                    }
                }
            }
        }
        grad_in
    }
}

/// Resizes `input` to `target_height × target_width` with the adaptively chosen kernel.
pub fn spatial_differential(
    input: &Grid,
    target_height: usize,
    target_width: usize,
    delta: f64,
) -> Result<Grid> {
    ResampleOp::adaptive(
        (input.height(), input.width()),
        (target_height, target_width),
        delta,
    )?
    .apply(input)
}
