//! Detection-driven feature pooling: one averaged embedding per detected box.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_store::{
    read_tensor, write_tensor, Detection, FeatureMap, ImageSize, Scalar, Tensor,
};

/// Half-open integer cell rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl CellRect {
    pub fn cells(&self) -> usize {
        self.x1.saturating_sub(self.x0) * self.y1.saturating_sub(self.y0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub coarse_class: String,
    pub confidence: f64,
    pub source: Detection,
}

fn axis_cells(lo: f64, hi: f64, image: f64, grid: usize) -> (usize, usize) {
    let scale = |v: f64| (v * grid as f64 / image).clamp(0.0, grid as f64);
    let mut a = scale(lo).floor() as usize;
    let mut b = scale(hi).ceil() as usize;
    a = a.min(grid);
    b = b.min(grid);
    if b <= a {
        if a >= grid {
            a = grid - 1;
        }
        b = a + 1;
    }
    (a, b)
}

/// Box corners scaled into the grid: floor the top-left, ceil the bottom-right,
/// clamp, and keep at least one cell.
pub fn map_box_to_grid(
    det: &Detection,
    image: ImageSize,
    grid_height: usize,
    grid_width: usize,
) -> Result<CellRect> {
    if grid_height == 0 || grid_width == 0 {
        return Err(Error::Shape("cannot map a box onto an empty grid".into()));
    }
    if !(image.width > 0.0 && image.height > 0.0) {
        return Err(Error::Validation("image size must be positive".into()));
    }
    let (x0, x1) = axis_cells(det.x0, det.x1, image.width, grid_width);
    let (y0, y1) = axis_cells(det.y0, det.y1, image.height, grid_height);
    Ok(CellRect { x0, y0, x1, y1 })
}

/// Per-channel mean over the rectangle, accumulated in `f64` in row-major order.
pub fn pool_box<T: Scalar>(aux: &FeatureMap<T>, cells: CellRect) -> Result<Vec<f64>> {
    if cells.x1 <= cells.x0 || cells.y1 <= cells.y0 {
        return Err(Error::Contract(format!(
            "empty pooling rectangle {cells:?}"
        )));
    }
    if cells.x1 > aux.width() || cells.y1 > aux.height() {
        return Err(Error::Contract(format!(
            "rectangle {cells:?} exceeds {}x{} grid",
            aux.height(),
            aux.width()
        )));
    }
    let mut sums = vec![0.0f64; aux.channels()];
    for y in cells.y0..cells.y1 {
        for x in cells.x0..cells.x1 {
            for (s, v) in sums.iter_mut().zip(aux.pixel(y, x)) {
                *s += v.to_f64();
            }
        }
    }
    let n = cells.cells() as f64;
    Ok(sums.into_iter().map(|s| s / n).collect())
}

/// One embedding per detection, in input order.
pub fn pool_detections<T: Scalar>(
    aux: &FeatureMap<T>,
    detections: &[Detection],
    image: ImageSize,
) -> Result<Vec<Embedding>> {
    detections
        .iter()
        .map(|det| {
            let cells = map_box_to_grid(det, image, aux.height(), aux.width())?;
            Ok(Embedding {
                vector: pool_box(aux, cells)?,
                coarse_class: det.coarse_class.clone(),
                confidence: det.confidence,
                source: det.clone(),
            })
        })
        .collect()
}

/// Writes `<stem>.axft` (`K × channels`) and `<stem>.csv` with box metadata.
pub fn save_embeddings(
    dir: impl AsRef<Path>,
    stem: &str,
    embeddings: &[Embedding],
    channels: usize,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if let Some(e) = embeddings.iter().find(|e| e.vector.len() != channels) {
        return Err(Error::Shape(format!(
            "embedding of length {} in a {channels}-channel dump",
            e.vector.len()
        )));
    }
    let values = embeddings
        .iter()
        .flat_map(|e| e.vector.iter().map(|&v| v as f32))
        .collect();
    write_tensor(
        dir.join(format!("{stem}.axft")),
        &Tensor::new(vec![embeddings.len(), channels], values)?,
    )?;
    let mut csv = String::from("index,x0,y0,x1,y1,coarse_class,confidence,fine_class\n");
    for (i, e) in embeddings.iter().enumerate() {
        let d = &e.source;
        let _ = writeln!(
            csv,
            "{i},{},{},{},{},{},{},{}",
            d.x0,
            d.y0,
            d.x1,
            d.y1,
            e.coarse_class,
            e.confidence,
            d.fine_class.as_deref().unwrap_or("")
        );
    }
    let p = dir.join(format!("{stem}.csv"));
    fs::write(&p, csv).map_err(|e| Error::io(&p, e))
}

pub fn load_embeddings(dir: impl AsRef<Path>, stem: &str) -> Result<Vec<Embedding>> {
    let dir = dir.as_ref();
    let tensor = read_tensor(dir.join(format!("{stem}.axft")))?;
    if tensor.dims.len() != 2 {
        return Err(Error::Format(format!(
            "embedding dump must be rank 2, got {:?}",
            tensor.dims
        )));
    }
    let (k, c) = (tensor.dims[0], tensor.dims[1]);
    let p = dir.join(format!("{stem}.csv"));
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let rows: Vec<&str> = text.lines().skip(1).filter(|l| !l.is_empty()).collect();
    if rows.len() != k {
        return Err(Error::Format(format!(
            "{} sidecar rows for {k} embeddings",
            rows.len()
        )));
    }
    let bad = |line: &str| Error::Format(format!("malformed sidecar row {line:?}"));
    rows.iter()
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad(line));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
            let mut det = Detection::new(
                num(f[1])?,
                num(f[2])?,
                num(f[3])?,
                num(f[4])?,
                f[5],
                num(f[6])?,
            );
            if !f[7].is_empty() {
                det.fine_class = Some(f[7].to_string());
            }
            Ok(Embedding {
                vector: tensor.values[i * c..(i + 1) * c]
                    .iter()
                    .map(|&v| v as f64)
                    .collect(),
                coarse_class: det.coarse_class.clone(),
                confidence: det.confidence,
                source: det,
            })
        })
        .collect()
}
