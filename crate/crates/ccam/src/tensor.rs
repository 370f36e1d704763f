//! Minimal dense-array kernel: exactly the operations the pipeline needs.
//!
//! Tensors are immutable value objects — row-major `f64` storage with a
//! rank-1..4 shape. There is no broadcasting, no views, no GPU; the rest of
//! the crate composes everything from matrix products, means, softmax and
//! align-corners bilinear resampling.

use crate::error::{Error, Result};

/// Dense n-dimensional array (rank 1–4), row-major, 64-bit in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from a shape and row-major data.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::shape(format!(
                "rank must be 1..=4, got shape {shape:?}"
            )));
        }
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::shape(format!(
                "shape {shape:?} wants {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; len])
    }

    /// Constant-filled tensor of the given shape.
    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        let len: usize = shape.iter().product();
        Tensor::new(shape, vec![value; len])
    }

    /// Square identity matrix.
    pub fn identity(n: usize) -> Result<Self> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::new(&[n, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Consume the tensor, returning its row-major data.
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// True when every value is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element of a rank-2 tensor.
    pub fn at2(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[row * self.shape[1] + col]
    }

    /// Element of a rank-3 tensor.
    pub fn at3(&self, c: usize, h: usize, w: usize) -> f64 {
        debug_assert_eq!(self.rank(), 3);
        self.data[(c * self.shape[1] + h) * self.shape[2] + w]
    }

    /// Reinterpret the data under a new shape with the same element count.
    pub(crate) fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    /// Transpose of a rank-2 tensor, tiled to keep both sides cache-friendly.
    pub(crate) fn transposed2(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::shape(format!(
                "transpose expects a matrix, got shape {:?}",
                self.shape
            )));
        }
        const TILE: usize = 16;
        let (rows, cols) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; rows * cols];
        for r0 in (0..rows).step_by(TILE) {
            for c0 in (0..cols).step_by(TILE) {
                for r in r0..(r0 + TILE).min(rows) {
                    for c in c0..(c0 + TILE).min(cols) {
                        out[c * rows + r] = self.data[r * cols + c];
                    }
                }
            }
        }
        Tensor::new(&[cols, rows], out)
    }

    /// Elementwise sum of two same-shape tensors.
    pub(crate) fn add(&self, other: &Tensor) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "add expects equal shapes, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Tensor::new(&self.shape, data)
    }

    /// Elementwise scale by a constant.
    #[cfg(test)]
    pub(crate) fn scaled(&self, factor: f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Standard matrix product of `a` (m×k) and `b` (k×n).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape(format!(
            "matmul expects matrices, got shapes {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner extents disagree: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    // i-k-j order: the inner loop walks contiguous rows of `b` and `out`.
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// Numerically stable softmax of a vector.
pub fn softmax(v: &Tensor) -> Result<Tensor> {
    if v.rank() != 1 {
        return Err(Error::shape(format!(
            "softmax expects a vector, got shape {:?}",
            v.shape
        )));
    }
    Ok(Tensor {
        shape: v.shape.clone(),
        data: softmax_slice(&v.data),
    })
}

/// Softmax over a raw slice, max-subtracted for stability.
pub(crate) fn softmax_slice(values: &[f64]) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Per-channel mean over the spatial extent of a C×H×W tensor (GAP).
pub fn spatial_mean(f: &Tensor) -> Result<Tensor> {
    if f.rank() != 3 {
        return Err(Error::shape(format!(
            "spatial_mean expects C x H x W, got shape {:?}",
            f.shape
        )));
    }
    let (c, h, w) = (f.shape[0], f.shape[1], f.shape[2]);
    let area = (h * w) as f64;
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = &f.data[ch * h * w..(ch + 1) * h * w];
        out.push(plane.iter().sum::<f64>() / area);
    }
    Tensor::new(&[c], out)
}

/// Align-corners bilinear resampling of an H×W map.
///
/// Corner samples map exactly onto corner samples, so resizing to the source
/// size reproduces the input and a 1×1 source broadcasts its single value.
pub fn bilinear_resize(m: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if m.rank() != 2 {
        return Err(Error::shape(format!(
            "bilinear_resize expects H x W, got shape {:?}",
            m.shape
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape(format!(
            "bilinear_resize target {out_h}x{out_w} has a zero extent"
        )));
    }
    let (h, w) = (m.shape[0], m.shape[1]);
    let scale_y = if out_h > 1 {
        (h - 1) as f64 / (out_h - 1) as f64
    } else {
        0.0
    };
    let scale_x = if out_w > 1 {
        (w - 1) as f64 / (out_w - 1) as f64
    } else {
        0.0
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let sy = oy as f64 * scale_y;
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = ox as f64 * scale_x;
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let v00 = m.data[y0 * w + x0];
            let v01 = m.data[y0 * w + x1];
            let v10 = m.data[y1 * w + x0];
            let v11 = m.data[y1 * w + x1];
            let top = v00 + (v01 - v00) * fx;
            let bottom = v10 + (v11 - v10) * fx;
            out.push(top + (bottom - top) * fy);
        }
    }
    Tensor::new(&[out_h, out_w], out)
}
