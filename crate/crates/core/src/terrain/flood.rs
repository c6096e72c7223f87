use serde::{Deserialize, Serialize};

use super::{Dem, DepthGrid, RainEvent};
use crate::error::{ensure, Error, Result};
use crate::grid::Grid2;

/// What happens at the domain edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Walls: no water leaves the domain.
    Closed,
    /// Water flowing over an edge is lost. The virtual outside cell has its
    /// water surface at the edge cell's ground level.
    Open,
}

/// Fraction of the available depth that may leave towards one neighbour.
const SHARE: f64 = 0.25;
/// Transfer per metre of surface difference, in cm: half the difference,
/// damped by one half, converted from m to cm.
const CM_PER_M_DIFF: f64 = 0.5 * 0.5 * 100.0;

/// Relaxation solver over a fixed DEM. Depths are in cm.
#[derive(Clone, Debug)]
pub struct FloodSolver {
    dem: Dem,
    boundary: Boundary,
    depth: Vec<f64>,
}

impl FloodSolver {
    pub fn new(dem: Dem, boundary: Boundary) -> Self {
        let n = dem.elevations.len();
        FloodSolver {
            dem,
            boundary,
            depth: vec![0.0; n],
        }
    }

    pub fn dem(&self) -> &Dem {
        &self.dem
    }

    pub fn depths(&self) -> &[f64] {
        &self.depth
    }

    /// Uniform rainfall over every cell.
    pub fn rain(&mut self, cm: f64) -> Result<()> {
        ensure!(cm >= 0.0 && cm.is_finite(), contract, "rainfall must be finite and >= 0, got {}", cm);
        self.depth.iter_mut().for_each(|d| *d += cm);
        Ok(())
    }

    /// Adds water to a single cell.
    pub fn inject(&mut self, x: usize, y: usize, cm: f64) -> Result<()> {
        let (w, h) = (self.dem.width(), self.dem.height());
        ensure!(x < w && y < h, dim, "cell ({}, {}) outside {}x{} domain", x, y, w, h);
        ensure!(cm >= 0.0 && cm.is_finite(), contract, "injected depth must be finite and >= 0");
        self.depth[y * w + x] += cm;
        Ok(())
    }

    /// Total stored water in cm·cells (depth summed over the grid).
    pub fn total_depth(&self) -> f64 {
        self.depth.iter().sum()
    }

    /// Total stored water in m³.
    pub fn volume(&self) -> f64 {
        self.total_depth() / 100.0 * self.dem.cell_size * self.dem.cell_size
    }

    /// In-place sweeps in raster order. Each cell sends water to every
    /// 4-neighbour with a lower water surface.
    pub fn relax(&mut self, iters: usize) -> Result<()> {
        let w = self.dem.width();
        let h = self.dem.height();
        let z = self.dem.elevations.data();
        let open = self.boundary == Boundary::Open;
        let d = &mut self.depth;
        for _ in 0..iters {
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let avail = d[i];
                    if avail <= 0.0 {
                        continue;
                    }
                    let surf = z[i] + avail / 100.0;
                    let mut flows = [(usize::MAX, 0.0); 4];
                    let mut total = 0.0;
                    let nbrs = [
                        (x > 0).then(|| i - 1),
                        (x + 1 < w).then(|| i + 1),
                        (y > 0).then(|| i - w),
                        (y + 1 < h).then(|| i + w),
                    ];
                    for (slot, nb) in nbrs.into_iter().enumerate() {
                        let diff = match nb {
                            Some(j) => surf - (z[j] + d[j] / 100.0),
                            None if open => avail / 100.0,
                            None => continue,
                        };
                        if diff > 0.0 {
                            let q = (avail * SHARE).min(diff * CM_PER_M_DIFF);
                            flows[slot] = (nb.unwrap_or(usize::MAX), q);
                            total += q;
                        }
                    }
                    if total == 0.0 {
                        continue;
                    }
                    let mut left = avail - total;
                    if left < 0.0 {
                        // Only reachable through rounding when every share hits avail/4.
                        if left < -1e-12 * avail {
                            return Err(Error::numeric(format!("negative depth {left} at ({x}, {y})")));
                        }
                        left = 0.0;
                    }
                    d[i] = left;
                    for (j, q) in flows {
                        if j != usize::MAX {
                            d[j] += q;
                        }
                    }
                }
            }
        }
        if let Some(bad) = d.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::numeric(format!("invalid depth {} at cell {}", d[bad], bad)));
        }
        Ok(())
    }

    pub fn snapshot(&self, timestamp_index: usize) -> DepthGrid {
        let g = Grid2::new(self.dem.width(), self.dem.height(), self.depth.clone()).expect("solver grid shape");
        DepthGrid {
            depths: g,
            cell_size: self.dem.cell_size,
            timestamp_index,
        }
    }
}

/// Runs one rain event and returns the depth field after every rain step.
pub fn simulate_flood(dem: &Dem, rain: &RainEvent, relax_iters: usize, boundary: Boundary) -> Result<Vec<DepthGrid>> {
    ensure!(relax_iters >= 1, contract, "relax_iters must be >= 1");
    let mut solver = FloodSolver::new(dem.clone(), boundary);
    let mut out = Vec::with_capacity(rain.step_count());
    for (k, &cm) in rain.per_step_cm().iter().enumerate() {
        solver.rain(cm)?;
        solver.relax(relax_iters)?;
        out.push(solver.snapshot(k));
    }
    Ok(out)
}
