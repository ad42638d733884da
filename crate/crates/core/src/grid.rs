//! 2D grids: slices, masks and logit maps.

use serde::{Deserialize, Serialize};

/// Row-major 2D grid. `rows` is the slow axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid2<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// A 2D scalar image (one slice of a volume).
pub type Slice2 = Grid2<f32>;
/// A 2D binary mask.
pub type Mask2 = Grid2<bool>;

impl<T: Clone> Grid2<T> {
    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Grid2 {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }
}

impl<T> Grid2<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "grid data length");
        Grid2 { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> &T {
        &self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Grid2<U> {
        Grid2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl Mask2 {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Bilinear resize with half-pixel centres and edge clamping.
///
/// Returns an exact copy when the size is unchanged.
pub fn resize_bilinear(src: &Grid2<f64>, rows: usize, cols: usize) -> Grid2<f64> {
    assert!(rows > 0 && cols > 0, "resize target must be non-empty");
    if src.dims() == (rows, cols) {
        return src.clone();
    }
    let ys = axis_taps(src.rows, rows);
    let xs = axis_taps(src.cols, cols);
    let mut out = Vec::with_capacity(rows * cols);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let a = *src.get(y0, x0);
            let b = *src.get(y0, x1);
            let c = *src.get(y1, x0);
            let d = *src.get(y1, x1);
            let top = a + (b - a) * fx;
            let bottom = c + (d - c) * fx;
            out.push(top + (bottom - top) * fy);
        }
    }
    Grid2::from_vec(rows, cols, out)
}

/// For each output index: (lower source index, upper source index, fraction).
fn axis_taps(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src_len - 1);
            let hi = (lo + 1).min(src_len - 1);
            let frac = if lo == hi { 0.0 } else { pos - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

/// Resize a scalar slice to `size x size`, computing in f64.
pub fn resize_slice(slice: &Slice2, size: usize) -> Grid2<f64> {
    resize_bilinear(&slice.map(|&v| v as f64), size, size)
}
