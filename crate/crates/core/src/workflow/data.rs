use std::path::{Path, PathBuf};

use crate::error::{ensure, Result};
use crate::io;
use crate::numerics::Tensor;
use crate::terrain::{normalize_depth, DatasetManifest, DemScaling, DepthGrid, DepthRange, SampleEntry, Split};

/// Fine/coarse pairs of one split, with per-patch DEM tensors.
#[derive(Clone, Debug)]
pub struct PairSet {
    pub dir: PathBuf,
    pub entries: Vec<SampleEntry>,
    pub fine: Vec<DepthGrid>,
    pub coarse: Vec<DepthGrid>,
    /// Scaled DEM per patch window, `[1, H, W]` in `[-1, 1]`.
    pub dem: Vec<Tensor>,
    pub max_depth_cm: f64,
    pub dem_scaling: DemScaling,
    pub cell_size: f64,
}

impl PairSet {
    /// Reads every sample of `split`. Normalization constants come from the
    /// manifest of `dir` unless `norm` overrides them.
    pub fn load(dir: &Path, split: Split, norm: Option<(f64, DemScaling)>) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        let (max_depth_cm, dem_scaling) = norm.unwrap_or((
            manifest.max_depth_cm,
            DemScaling {
                min: manifest.dem_min,
                max: manifest.dem_max,
            },
        ));
        ensure!(max_depth_cm > 0.0, config, "normalization max depth must be > 0");
        let dem = manifest
            .patches
            .iter()
            .map(|p| {
                let d = io::read_dem(&dir.join(&p.dem))?;
                dem_scaling.normalize(&d.elevations)
            })
            .collect::<Result<Vec<_>>>()?;
        let entries: Vec<SampleEntry> = manifest.samples_in(split).cloned().collect();
        let mut fine = Vec::with_capacity(entries.len());
        let mut coarse = Vec::with_capacity(entries.len());
        for e in &entries {
            manifest.patch(e.patch)?;
            let mut f = io::read_depth(&dir.join(&e.fine))?;
            let mut c = io::read_depth(&dir.join(&e.coarse))?;
            f.timestamp_index = e.step;
            c.timestamp_index = e.step;
            fine.push(f);
            coarse.push(c);
        }
        Ok(PairSet {
            dir: dir.to_path_buf(),
            entries,
            fine,
            coarse,
            dem,
            max_depth_cm,
            dem_scaling,
            cell_size: manifest.fine_cell_size,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Patch edge length in fine cells.
    pub fn patch_size(&self) -> usize {
        self.fine.first().map(|g| g.width()).unwrap_or(0)
    }

    /// Keeps only the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> PairSet {
        PairSet {
            dir: self.dir.clone(),
            entries: indices.iter().map(|&i| self.entries[i].clone()).collect(),
            fine: indices.iter().map(|&i| self.fine[i].clone()).collect(),
            coarse: indices.iter().map(|&i| self.coarse[i].clone()).collect(),
            dem: self.dem.clone(),
            max_depth_cm: self.max_depth_cm,
            dem_scaling: self.dem_scaling,
            cell_size: self.cell_size,
        }
    }

    pub fn fine_tensor(&self, i: usize, range: DepthRange) -> Result<Tensor> {
        normalize_depth(&self.fine[i], self.max_depth_cm, range)
    }

    pub fn coarse_tensor(&self, i: usize, range: DepthRange) -> Result<Tensor> {
        normalize_depth(&self.coarse[i], self.max_depth_cm, range)
    }

    /// DEM tensor for sample `i`, or zeros when the DEM is ablated.
    pub fn dem_tensor(&self, i: usize, zero_dem: bool) -> Tensor {
        let t = &self.dem[self.entries[i].patch];
        if zero_dem {
            Tensor::zeros(t.shape().to_vec())
        } else {
            t.clone()
        }
    }

    /// `[B, 1, H, W]` fine targets and `[B, 2, H, W]` pixel-mode
    /// conditioning (coarse map, DEM) for the given samples.
    pub fn pixel_batch(&self, idx: &[usize], zero_dem: bool) -> Result<(Tensor, Tensor)> {
        let range = DepthRange::Unit;
        let mut fine = Vec::with_capacity(idx.len());
        let mut cond = Vec::with_capacity(idx.len());
        for &i in idx {
            fine.push(self.fine_tensor(i, range)?);
            let c = self.coarse_tensor(i, range)?;
            let d = self.dem_tensor(i, zero_dem);
            let (h, w) = (c.shape()[1], c.shape()[2]);
            let mut data = c.into_data();
            data.extend_from_slice(d.data());
            cond.push(Tensor::new(vec![2, h, w], data)?);
        }
        Ok((Tensor::stack(&fine)?, Tensor::stack(&cond)?))
    }
}
