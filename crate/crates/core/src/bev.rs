//! Bird's-eye-view feature grids and their spatial metadata.
//!
//! A `BevGrid` is a C×H×W feature block plus the ground-plane window it
//! covers. Rows (H) run along y, columns (W) along x, so cell `(ix, iy)`
//! covers the square starting at `(x_min + ix*cell, y_min + iy*cell)`.
//! Every pipeline stage passes these around: per-agent encodings, the
//! agent-fused grid, the modal-fused grid, and the intermediate states of
//! the feature denoiser.

use crate::nn::Tensor4;
use crate::sensing::CloudFrame;
use alloc::string::String;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BevError {
    InvalidSpec(String),
    /// Tensor shape does not match the grid metadata.
    ShapeMismatch,
    /// Two grids that must share extent/cell size/channels do not.
    SpecMismatch,
}

impl core::fmt::Display for BevError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            BevError::InvalidSpec(m) => write!(f, "invalid grid spec: {m}"),
            BevError::ShapeMismatch => write!(f, "tensor shape does not match grid spec"),
            BevError::SpecMismatch => write!(f, "grid specs differ"),
        }
    }
}

impl core::error::Error for BevError {}

/// Ground-plane window, resolution and channel count of a BEV grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    /// Covered x interval, meters, in the reference frame of the grid.
    pub x_range: [f64; 2],
    /// Covered y interval, meters.
    pub y_range: [f64; 2],
    /// Square cell edge, meters.
    pub cell_size: f64,
    pub channels: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { x_range: [0.0, 140.0], y_range: [-40.0, 40.0], cell_size: 1.0, channels: 8 }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), BevError> {
        let bad = |m: &str| Err(BevError::InvalidSpec(m.into()));
        if !(self.x_range[0] < self.x_range[1] && self.y_range[0] < self.y_range[1]) {
            return bad("ranges must be ordered");
        }
        if !(self.cell_size > 0.0) {
            return bad("cell size must be positive");
        }
        if self.channels == 0 {
            return bad("channel count must be positive");
        }
        if self.width() == 0 || self.height() == 0 {
            return bad("window narrower than one cell");
        }
        Ok(())
    }

    /// Number of columns (x direction).
    pub fn width(&self) -> usize {
        ((self.x_range[1] - self.x_range[0]) / self.cell_size) as usize
    }

    /// Number of rows (y direction).
    pub fn height(&self) -> usize {
        ((self.y_range[1] - self.y_range[0]) / self.cell_size) as usize
    }

    /// Cell containing the ground point, if inside the window.
    pub fn cell_index(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fx = (x - self.x_range[0]) / self.cell_size;
        let fy = (y - self.y_range[0]) / self.cell_size;
        if fx < 0.0 || fy < 0.0 {
            return None;
        }
        let (ix, iy) = (fx as usize, fy as usize);
        if ix >= self.width() || iy >= self.height() {
            return None;
        }
        Some((ix, iy))
    }

    /// Ground-plane center of a cell.
    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.x_range[0] + (ix as f64 + 0.5) * self.cell_size,
            self.y_range[0] + (iy as f64 + 0.5) * self.cell_size,
        )
    }

    /// Fractional cell coordinates of a ground point (may fall outside the
    /// window); used by the bilinear warp.
    pub fn fractional_index(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.x_range[0]) / self.cell_size - 0.5,
            (y - self.y_range[0]) / self.cell_size - 0.5,
        )
    }
}

/// A BEV feature grid: `[1, C, H, W]` tensor plus the window it covers and
/// the frame its coordinates are expressed in.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub spec: GridSpec,
    pub frame: CloudFrame,
    pub data: Tensor4,
}

impl BevGrid {
    pub fn zeros(spec: GridSpec, frame: CloudFrame) -> Result<Self, BevError> {
        spec.validate()?;
        let data = Tensor4::zeros([1, spec.channels, spec.height(), spec.width()]);
        Ok(BevGrid { spec, frame, data })
    }

    pub fn from_tensor(spec: GridSpec, frame: CloudFrame, data: Tensor4) -> Result<Self, BevError> {
        spec.validate()?;
        if data.shape() != [1, spec.channels, spec.height(), spec.width()] {
            return Err(BevError::ShapeMismatch);
        }
        Ok(BevGrid { spec, frame, data })
    }

    pub fn same_spec(&self, other: &BevGrid) -> Result<(), BevError> {
        if self.spec != other.spec {
            return Err(BevError::SpecMismatch);
        }
        Ok(())
    }

    /// Scalar count C*H*W.
    pub fn scalar_count(&self) -> usize {
        self.data.data().len()
    }

    /// Count of scalars with magnitude above the tolerance.
    pub fn non_zero_count(&self, zero_tol: f64) -> usize {
        self.data.data().iter().filter(|v| v.abs() > zero_tol).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_window_is_140_by_80_cells() {
        let spec = GridSpec::default();
        assert_eq!(spec.width(), 140);
        assert_eq!(spec.height(), 80);
        spec.validate().unwrap();
    }

    #[test]
    fn cell_indexing_round_trips_through_centers() {
        let spec = GridSpec { cell_size: 2.5, ..GridSpec::default() };
        for ix in [0, 3, spec.width() - 1] {
            for iy in [0, 7, spec.height() - 1] {
                let (x, y) = spec.cell_center(ix, iy);
                assert_eq!(spec.cell_index(x, y), Some((ix, iy)));
            }
        }
        assert_eq!(spec.cell_index(-0.1, 0.0), None);
        assert_eq!(spec.cell_index(139.9, 40.1), None);
        // Fractional index of a cell center is exactly the integer pair.
        let (fx, fy) = spec.fractional_index(spec.cell_center(4, 9).0, spec.cell_center(4, 9).1);
        assert!((fx - 4.0).abs() < 1e-12 && (fy - 9.0).abs() < 1e-12);
    }

    #[test]
    fn tensor_shape_is_enforced() {
        let spec = GridSpec::default();
        let g = BevGrid::zeros(spec, CloudFrame::Ego).unwrap();
        assert_eq!(g.data.shape(), [1, 8, 80, 140]);
        assert_eq!(g.non_zero_count(0.0), 0);
        let bad = Tensor4::zeros([1, 8, 80, 139]);
        assert_eq!(BevGrid::from_tensor(spec, CloudFrame::Ego, bad), Err(BevError::ShapeMismatch));
        let bad_spec = GridSpec { cell_size: -1.0, ..spec };
        assert!(matches!(BevGrid::zeros(bad_spec, CloudFrame::Ego), Err(BevError::InvalidSpec(_))));
    }
}
