use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{generate_dem_with, simulate_flood, Boundary, Dem, DepthGrid, RainEvent, TerrainParams};
use crate::error::{ensure, Error, Result};
use crate::io;
use crate::par;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Everything that determines a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub terrain: TerrainParams,
    pub patch: usize,
    pub upscale: usize,
    pub n_events: usize,
    pub steps_per_event: usize,
    pub relax_iters: usize,
    pub boundary: Boundary,
    /// Peak rainfall per mapping step is drawn from this range (cm).
    pub rain_peak_cm: (f64, f64),
    /// Fraction of mapping steps with rain; the rest is recession.
    pub rain_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            terrain: TerrainParams::default(),
            patch: 64,
            upscale: 4,
            n_events: 5,
            steps_per_event: 20,
            relax_iters: 40,
            boundary: Boundary::Open,
            rain_peak_cm: (1.5, 4.0),
            rain_fraction: 0.6,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let size = self.terrain.size;
        ensure!(
            matches!(self.upscale, 2 | 4 | 8),
            contract,
            "upscale must be 2, 4 or 8, got {}",
            self.upscale
        );
        ensure!(
            self.patch >= self.upscale && self.patch % self.upscale == 0,
            contract,
            "patch {} must be divisible by upscale {}",
            self.patch,
            self.upscale
        );
        ensure!(self.patch % 2 == 0, contract, "patch must be even");
        ensure!(self.patch <= size, contract, "patch {} exceeds domain {}", self.patch, size);
        ensure!(size % self.upscale == 0, contract, "domain {} not divisible by upscale", size);
        ensure!(self.n_events >= 1, contract, "need at least one event");
        ensure!(self.steps_per_event >= 1, contract, "need at least one mapping step");
        ensure!(self.relax_iters >= 1, contract, "relax_iters must be >= 1");
        let (lo, hi) = self.rain_peak_cm;
        ensure!(0.0 <= lo && lo <= hi && hi.is_finite(), contract, "invalid rain_peak_cm range");
        ensure!(
            self.rain_fraction > 0.0 && self.rain_fraction <= 1.0,
            contract,
            "rain_fraction must lie in (0, 1]"
        );
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One patch window; the DEM raster is shared by all samples at this window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchEntry {
    pub index: usize,
    pub x: usize,
    pub y: usize,
    pub dem: String,
}

/// A fine/coarse pair at one mapping step and window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub event: usize,
    pub step: usize,
    pub patch: usize,
    pub split: Split,
    pub fine: String,
    pub coarse: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub fine_cell_size: f64,
    pub coarse_cell_size: f64,
    /// Maximum fine-grid depth over every patch (cm); the normalization constant.
    pub max_depth_cm: f64,
    pub dem_min: f64,
    pub dem_max: f64,
    /// Pooled MSE between upsampled coarse and fine patches (cm²).
    pub cg_fg_mse: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub warnings: Vec<String>,
    pub patches: Vec<PatchEntry>,
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let m: DatasetManifest = io::read_json(&dir.join(MANIFEST_FILE))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::Incompatible(format!(
                "{}: manifest version {} (supported: {})",
                dir.display(),
                m.format_version,
                MANIFEST_VERSION
            )));
        }
        Ok(m)
    }

    pub fn samples_in(&self, split: Split) -> impl Iterator<Item = &SampleEntry> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn patch(&self, index: usize) -> Result<&PatchEntry> {
        self.patches
            .get(index)
            .ok_or_else(|| Error::config(format!("manifest has no patch {index}")))
    }
}

/// Top-left corners of overlapping windows with stride `patch / 2`.
pub fn patch_origins(size: usize, patch: usize) -> Vec<usize> {
    if patch > size || patch == 0 {
        return Vec::new();
    }
    let stride = (patch / 2).max(1);
    (0..=(size - patch) / stride).map(|i| i * stride).collect()
}

/// Rain for event `event`: a wet phase with per-step depths in
/// `[peak/2, peak]`, followed by dry recession steps.
pub fn event_rain(cfg: &DatasetConfig, event: usize) -> Result<RainEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(event as u64 + 1);
    let (lo, hi) = cfg.rain_peak_cm;
    let peak = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let steps = cfg.steps_per_event;
    let wet = ((steps as f64 * cfg.rain_fraction).round() as usize).clamp(1, steps);
    let per_step = (0..steps)
        .map(|k| if k < wet { peak * rng.random_range(0.5..=1.0) } else { 0.0 })
        .collect();
    RainEvent::new(per_step)
}

struct EventMaps {
    fine: Vec<DepthGrid>,
    coarse_up: Vec<DepthGrid>,
}

fn simulate_event(cfg: &DatasetConfig, dem: &Dem, coarse_dem: &Dem, event: usize) -> Result<EventMaps> {
    let rain = event_rain(cfg, event)?;
    let fine = simulate_flood(dem, &rain, cfg.relax_iters, cfg.boundary)?;
    let coarse = simulate_flood(coarse_dem, &rain, cfg.relax_iters, cfg.boundary)?;
    let coarse_up = coarse
        .into_iter()
        .map(|g| {
            let up = g.depths.upsample_bilinear(cfg.upscale)?;
            DepthGrid::new(up, g.cell_size, g.timestamp_index)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EventMaps { fine, coarse_up })
}

fn crop_depth(g: &DepthGrid, x: usize, y: usize, patch: usize) -> Result<DepthGrid> {
    DepthGrid::new(g.depths.crop(x, y, patch, patch)?, g.cell_size, g.timestamp_index)
}

/// Generates a catchment, simulates every event at fine and coarse
/// resolution, and writes patch rasters plus `manifest.json` into `out_dir`.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let dem = generate_dem_with(cfg.seed, &cfg.terrain)?;
    let coarse_dem = dem.coarsen(cfg.upscale)?;

    let events = par::map_range(cfg.n_events, |e| simulate_event(cfg, &dem, &coarse_dem, e))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    for sub in ["fine", "coarse", "dem"] {
        io::create_dir_all(&out_dir.join(sub))?;
    }
    io::write_dem(&out_dir.join("dem_full.fmap"), &dem)?;
    io::write_dem(&out_dir.join("dem_coarse.fmap"), &coarse_dem)?;

    let origins = patch_origins(cfg.terrain.size, cfg.patch);
    let mut patches = Vec::new();
    for &y in &origins {
        for &x in &origins {
            let index = patches.len();
            let name = format!("dem/p{index:03}.fmap");
            let crop = Dem::new(dem.elevations.crop(x, y, cfg.patch, cfg.patch)?, dem.cell_size)?;
            io::write_dem(&out_dir.join(&name), &crop)?;
            patches.push(PatchEntry { index, x, y, dem: name });
        }
    }

    let mut samples = Vec::new();
    let mut max_depth = 0.0f64;
    let mut sq_err = 0.0f64;
    let mut n_px = 0usize;
    for (e, maps) in events.iter().enumerate() {
        let split = if e + 1 == cfg.n_events { Split::Test } else { Split::Train };
        for (s, (fine, coarse)) in maps.fine.iter().zip(&maps.coarse_up).enumerate() {
            for p in &patches {
                let f = crop_depth(fine, p.x, p.y, cfg.patch)?;
                let c = crop_depth(coarse, p.x, p.y, cfg.patch)?;
                max_depth = max_depth.max(f.depths.max());
                sq_err += f
                    .depths
                    .data()
                    .iter()
                    .zip(c.depths.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
                n_px += f.depths.len();
                let stem = format!("e{e:02}_s{s:03}_p{:03}.fmap", p.index);
                let entry = SampleEntry {
                    event: e,
                    step: s,
                    patch: p.index,
                    split,
                    fine: format!("fine/{stem}"),
                    coarse: format!("coarse/{stem}"),
                };
                io::write_depth(&out_dir.join(&entry.fine), &f)?;
                io::write_depth(&out_dir.join(&entry.coarse), &c)?;
                samples.push(entry);
            }
        }
    }

    let cg_fg_mse = sq_err / n_px.max(1) as f64;
    ensure!(
        cg_fg_mse > 0.0,
        numeric,
        "coarse and fine maps are identical (CG-FG MSE = 0); the dataset is degenerate"
    );
    ensure!(max_depth > 0.0, numeric, "no water in any fine patch");

    let mut warnings = Vec::new();
    if cfg.n_events == 1 {
        let w = "only one event: every sample is in the test split and there is no training data".to_string();
        warn!("{w}");
        warnings.push(w);
    }
    let n_test = samples.iter().filter(|s| s.split == Split::Test).count();
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        config: cfg.clone(),
        fine_cell_size: dem.cell_size,
        coarse_cell_size: coarse_dem.cell_size,
        max_depth_cm: max_depth,
        dem_min: dem.elevations.min(),
        dem_max: dem.elevations.max(),
        cg_fg_mse,
        n_train: samples.len() - n_test,
        n_test,
        warnings,
        patches,
        samples,
    };
    io::write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sliding_window_counts() {
        assert_eq!(patch_origins(64, 64), vec![0]);
        assert_eq!(patch_origins(128, 64), vec![0, 32, 64]);
        assert_eq!(patch_origins(256, 64).len(), 7);
        assert!(patch_origins(32, 64).is_empty());
    }

    #[test]
    fn validation() {
        let ok = DatasetConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            DatasetConfig { upscale: 3, ..ok.clone() },
            DatasetConfig { patch: 66, ..ok.clone() },
            DatasetConfig { n_events: 0, ..ok.clone() },
            DatasetConfig { relax_iters: 0, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Contract(_))));
        }
    }

    #[test]
    fn rain_has_wet_then_dry_phase() {
        let cfg = DatasetConfig::default();
        let r = event_rain(&cfg, 0).unwrap();
        assert_eq!(r.step_count(), 20);
        assert!(r.per_step_cm()[..12].iter().all(|&v| v > 0.0));
        assert!(r.per_step_cm()[12..].iter().all(|&v| v == 0.0));
        assert_ne!(event_rain(&cfg, 1).unwrap(), r);
        assert_eq!(event_rain(&cfg, 0).unwrap(), r);
    }
}
