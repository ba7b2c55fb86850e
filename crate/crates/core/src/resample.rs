//! Align-corners bilinear sampling geometry shared by the tensor engine and
//! the augmentation pipeline.
//!
//! Coordinates are pixel centres: pixel `i` of an axis of length `n` sits at
//! `i`, so the full extent spans `[0, n - 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An axis-aligned rectangle in pixel-centre coordinates, inclusive of both
/// edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub top: f64,
    pub left: f64,
    pub bottom: f64,
    pub right: f64,
}

impl Region {
    pub fn new(top: f64, left: f64, bottom: f64, right: f64) -> Self {
        Self {
            top,
            left,
            bottom,
            right,
        }
    }

    /// The whole of an `h x w` grid.
    pub fn full(h: usize, w: usize) -> Self {
        Self::new(0.0, 0.0, h.saturating_sub(1) as f64, w.saturating_sub(1) as f64)
    }

    pub fn height(&self) -> f64 {
        self.bottom - self.top
    }

    pub fn width(&self) -> f64 {
        self.right - self.left
    }

    pub fn area(&self) -> f64 {
        self.height() * self.width()
    }

    pub fn contains(&self, other: &Region) -> bool {
        other.top >= self.top
            && other.left >= self.left
            && other.bottom <= self.bottom
            && other.right <= self.right
    }

    pub(crate) fn check_within(&self, h: usize, w: usize) -> Result<()> {
        let ok = self.top.is_finite()
            && self.left.is_finite()
            && self.top >= 0.0
            && self.left >= 0.0
            && self.top <= self.bottom
            && self.left <= self.right
            && self.bottom <= (h.max(1) - 1) as f64
            && self.right <= (w.max(1) - 1) as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(alloc::format!(
                "region {self:?} does not lie within a {h}x{w} grid"
            )))
        }
    }

    /// Maps an output pixel of an `out_h x out_w` resampling of this region
    /// to its source coordinate `(y, x)`.
    pub fn source_coord(&self, oy: usize, ox: usize, out_h: usize, out_w: usize) -> (f64, f64) {
        (
            axis_coord(self.top, self.bottom, oy, out_h),
            axis_coord(self.left, self.right, ox, out_w),
        )
    }
}

#[inline]
fn axis_coord(start: f64, end: f64, i: usize, n: usize) -> f64 {
    if n <= 1 {
        start
    } else {
        start + (end - start) * i as f64 / (n - 1) as f64
    }
}

/// Two-tap interpolation stencil along one axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

impl Tap {
    pub fn at(coord: f64, len: usize) -> Self {
        let last = len.saturating_sub(1);
        let c = coord.clamp(0.0, last as f64);
        let lo = (libm::floor(c) as usize).min(last);
        let hi = (lo + 1).min(last);
        let frac = if hi == lo { 0.0 } else { c - lo as f64 };
        Self { lo, hi, frac }
    }
}

/// Stencils for resampling `[start, end]` of an axis of length `len` onto
/// `out` evenly spaced points.
pub fn axis_taps(len: usize, start: f64, end: f64, out: usize) -> alloc::vec::Vec<Tap> {
    (0..out).map(|i| Tap::at(axis_coord(start, end, i, out), len)).collect()
}

/// Bilinear sample of a single `h x w` plane at `(y, x)`.
pub fn sample_plane(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let ty = Tap::at(y, h);
    let tx = Tap::at(x, w);
    let top = plane[ty.lo * w + tx.lo] * (1.0 - tx.frac) + plane[ty.lo * w + tx.hi] * tx.frac;
    let bottom = plane[ty.hi * w + tx.lo] * (1.0 - tx.frac) + plane[ty.hi * w + tx.hi] * tx.frac;
    top * (1.0 - ty.frac) + bottom * ty.frac
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_hit_corners_exactly() {
        let taps = axis_taps(5, 0.0, 4.0, 9);
        assert_eq!(taps[0], Tap { lo: 0, hi: 1, frac: 0.0 });
        assert_eq!(taps[8], Tap { lo: 4, hi: 4, frac: 0.0 });
        assert_eq!(taps[1].frac, 0.5);
    }

    #[test]
    fn single_output_samples_start() {
        let taps = axis_taps(5, 1.5, 3.0, 1);
        assert_eq!(taps[0], Tap { lo: 1, hi: 2, frac: 0.5 });
    }

    #[test]
    fn region_containment() {
        let outer = Region::full(8, 8);
        assert!(outer.contains(&Region::new(1.0, 2.0, 7.0, 7.0)));
        assert!(!outer.contains(&Region::new(1.0, 2.0, 7.5, 7.0)));
        assert!(Region::new(0.0, 0.0, 8.0, 1.0).check_within(8, 8).is_err());
    }
}
