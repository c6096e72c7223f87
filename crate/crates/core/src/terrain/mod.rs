//! Synthetic catchments: fractal terrain, a relaxation flood solver, and
//! paired fine/coarse patch datasets.

mod dataset;
mod dem;
mod flood;
mod normalize;

pub use dataset::{
    build_dataset, event_rain, patch_origins, DatasetConfig, DatasetManifest, PatchEntry, SampleEntry, Split,
    MANIFEST_FILE, MANIFEST_VERSION,
};
pub use dem::{generate_dem, generate_dem_with, Dem, TerrainParams};
pub use flood::{simulate_flood, Boundary, FloodSolver};
pub use normalize::{denormalize_depth, normalize_depth, DemScaling, DepthRange};

use crate::error::{ensure, Result};
use crate::grid::Grid2;

/// Water depths in cm.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthGrid {
    pub depths: Grid2,
    /// Metres per cell edge.
    pub cell_size: f64,
    pub timestamp_index: usize,
}

impl DepthGrid {
    pub fn new(depths: Grid2, cell_size: f64, timestamp_index: usize) -> Result<Self> {
        ensure!(cell_size > 0.0, contract, "cell size must be positive");
        ensure!(
            depths.data().iter().all(|&v| v.is_finite() && v >= 0.0),
            numeric,
            "depths must be finite and non-negative"
        );
        Ok(DepthGrid {
            depths,
            cell_size,
            timestamp_index,
        })
    }

    pub fn width(&self) -> usize {
        self.depths.width()
    }

    pub fn height(&self) -> usize {
        self.depths.height()
    }
}

/// Spatially uniform rainfall, one depth per mapping step.
#[derive(Clone, Debug, PartialEq)]
pub struct RainEvent {
    per_step_cm: Vec<f64>,
}

impl RainEvent {
    pub fn new(per_step_cm: Vec<f64>) -> Result<Self> {
        ensure!(
            per_step_cm.iter().all(|&v| v.is_finite() && v >= 0.0),
            contract,
            "rainfall must be finite and >= 0"
        );
        Ok(RainEvent { per_step_cm })
    }

    pub fn per_step_cm(&self) -> &[f64] {
        &self.per_step_cm
    }

    pub fn step_count(&self) -> usize {
        self.per_step_cm.len()
    }

    pub fn total_cm(&self) -> f64 {
        self.per_step_cm.iter().sum()
    }
}
