use serde::{Deserialize, Serialize};

use super::{Dem, DepthGrid};
use crate::error::{ensure, Result};
use crate::grid::Grid2;
use crate::numerics::Tensor;

/// Model-space range for depth maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthRange {
    /// `[0, 1]`, used in pixel mode.
    Unit,
    /// `[-1, 1]`, used in latent mode.
    Symmetric,
}

impl DepthRange {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            DepthRange::Unit => (0.0, 1.0),
            DepthRange::Symmetric => (-1.0, 1.0),
        }
    }

    /// Depth in cm to model units, clamped to the range.
    pub fn forward(self, depth_cm: f64, max_depth: f64) -> f64 {
        let (lo, hi) = self.bounds();
        (lo + (hi - lo) * depth_cm / max_depth).clamp(lo, hi)
    }

    /// Model units to depth in cm. Never negative.
    pub fn inverse(self, v: f64, max_depth: f64) -> f64 {
        let (lo, hi) = self.bounds();
        ((v - lo) / (hi - lo) * max_depth).max(0.0)
    }
}

/// Maps a depth grid to a `[1, H, W]` tensor.
pub fn normalize_depth(grid: &DepthGrid, max_depth: f64, range: DepthRange) -> Result<Tensor> {
    ensure!(max_depth > 0.0 && max_depth.is_finite(), contract, "max_depth must be > 0, got {}", max_depth);
    let data = grid
        .depths
        .data()
        .iter()
        .map(|&d| range.forward(d, max_depth) as f32)
        .collect();
    Tensor::new(vec![1, grid.height(), grid.width()], data)
}

/// Inverse of [`normalize_depth`] for a `[1, H, W]` or `[H, W]` tensor.
pub fn denormalize_depth(
    t: &Tensor,
    max_depth: f64,
    range: DepthRange,
    cell_size: f64,
    timestamp_index: usize,
) -> Result<DepthGrid> {
    ensure!(max_depth > 0.0 && max_depth.is_finite(), contract, "max_depth must be > 0, got {}", max_depth);
    let (h, w) = match t.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        s => return Err(crate::Error::dim(format!("expected a single-channel map, got shape {s:?}"))),
    };
    t.check_finite("depth map")?;
    let data = t.data().iter().map(|&v| range.inverse(v as f64, max_depth)).collect();
    DepthGrid::new(Grid2::new(w, h, data)?, cell_size, timestamp_index)
}

/// Affine min/max scaling of elevations to `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemScaling {
    pub min: f64,
    pub max: f64,
}

impl DemScaling {
    pub fn from_dem(dem: &Dem) -> Self {
        DemScaling {
            min: dem.elevations.min(),
            max: dem.elevations.max(),
        }
    }

    pub fn apply(&self, z: f64) -> f64 {
        let span = self.max - self.min;
        if span > 0.0 {
            2.0 * (z - self.min) / span - 1.0
        } else {
            0.0
        }
    }

    /// `[1, H, W]` tensor of scaled elevations.
    pub fn normalize(&self, elevations: &Grid2) -> Result<Tensor> {
        let data = elevations.data().iter().map(|&z| self.apply(z) as f32).collect();
        Tensor::new(vec![1, elevations.height(), elevations.width()], data)
    }
}
