//! From localization map to bounding box.
//!
//! The map is resized to the output-image size, min-max rescaled to [0,1]
//! (combinational maps carry negative values), thresholded at a fraction
//! tau, and the tight box around the largest 8-connected component of the
//! mask is returned.

use crate::error::{Error, Result};
use crate::tensor::{bilinear_resize, Tensor};

/// Axis-aligned pixel rectangle; `x0`/`y0` inclusive, `x1`/`y1` exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxPx {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoxPx {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::invalid(format!(
                "degenerate box ({x0},{y0},{x1},{y1})"
            )));
        }
        Ok(BoxPx { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Min-max rescale to [0,1]; a constant map becomes all zeros.
pub fn normalize_map(map: &Tensor) -> Result<Tensor> {
    if map.rank() != 2 {
        return Err(Error::shape(format!(
            "normalize_map expects H x W, got {:?}",
            map.shape()
        )));
    }
    let lo = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let data = if range == 0.0 {
        vec![0.0; map.len()]
    } else {
        map.data().iter().map(|v| (v - lo) / range).collect()
    };
    Tensor::new(map.shape(), data)
}

/// Largest 8-connected component of `mask`, ties broken by the component
/// whose first cell comes earliest in row-major order. Returns the tight
/// box, or None for an empty mask.
fn largest_component_box(mask: &[bool], h: usize, w: usize) -> Option<BoxPx> {
    let mut visited = vec![false; h * w];
    let mut best: Option<(usize, BoxPx)> = None;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[start] || visited[start] {
            continue;
        }
        // Flood fill from the first unvisited cell; components are thus
        // discovered in row-major-first order.
        let mut area = 0usize;
        let (mut min_x, mut min_y, mut max_x, mut max_y) =
            (usize::MAX, usize::MAX, 0usize, 0usize);
        visited[start] = true;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            let (y, x) = (idx / w, idx % w);
            area += 1;
            min_x = min_x.min(x);
            min_y = min_y.min(y);
            max_x = max_x.max(x);
            max_y = max_y.max(y);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let nidx = ny as usize * w + nx as usize;
                    if mask[nidx] && !visited[nidx] {
                        visited[nidx] = true;
                        stack.push(nidx);
                    }
                }
            }
        }
        let bbox = BoxPx {
            x0: min_x,
            y0: min_y,
            x1: max_x + 1,
            y1: max_y + 1,
        };
        // Strictly-greater keeps the earlier component on ties.
        if best.is_none_or(|(best_area, _)| area > best_area) {
            best = Some((area, bbox));
        }
    }
    best.map(|(_, b)| b)
}

/// Resize, normalize, threshold at `tau`, box the largest component.
///
/// An all-constant map normalizes to zeros and yields the full-image box.
pub fn bbox_from_map(map: &Tensor, tau: f64, out_h: usize, out_w: usize) -> Result<BoxPx> {
    if !(0.0 < tau && tau < 1.0) {
        return Err(Error::invalid(format!("tau must be in (0,1), got {tau}")));
    }
    let resized = bilinear_resize(map, out_h, out_w)?;
    let normalized = normalize_map(&resized)?;
    let mask: Vec<bool> = normalized.data().iter().map(|&v| v >= tau).collect();
    match largest_component_box(&mask, out_h, out_w) {
        Some(b) => Ok(b),
        None => Ok(BoxPx {
            x0: 0,
            y0: 0,
            x1: out_w,
            y1: out_h,
        }),
    }
}
