use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, FloodModel, Mode, Normalization, PairSet, Trainer};
use crate::diffusion::{NoiseSchedule, SamplerConfig};
use crate::error::{ensure, Result};
use crate::latent::train_autoencoder;
use crate::metrics::{evaluate_grids, pct_change_mse, pooled_mse, EvalReport};
use crate::terrain::{DepthGrid, DepthRange};
use crate::unet::Unet;

/// Freshly initialized model for `cfg`, normalized to `train`. In latent
/// mode the autoencoder is trained here on fine maps and DEM windows.
pub fn build_model(cfg: &ExperimentConfig, train: &PairSet) -> Result<FloodModel> {
    cfg.validate()?;
    let seed = cfg.train.seed;
    let unet = Unet::build(cfg.unet.clone(), seed)?;
    let schedule = NoiseSchedule::new(cfg.schedule)?;
    let autoencoder = match cfg.mode {
        Mode::Pixel => None,
        Mode::Latent => {
            let mut maps = Vec::with_capacity(train.len() + train.dem.len());
            for i in 0..train.len() {
                maps.push(train.fine_tensor(i, DepthRange::Symmetric)?);
            }
            maps.extend(train.dem.iter().cloned());
            let (ae, losses) = train_autoencoder(&maps, &cfg.autoencoder, seed)?;
            info!(
                "autoencoder trained: final loss {:.5}",
                losses.last().copied().unwrap_or(f64::NAN)
            );
            Some(ae)
        }
    };
    FloodModel::new(cfg.mode, unet, schedule, Normalization::of(train), autoencoder, cfg.zero_dem)
}

/// Trains a new model for `cfg.train.steps` steps. `on_step` sees each loss.
pub fn train_model(
    cfg: &ExperimentConfig,
    train: &PairSet,
    mut on_step: impl FnMut(&Trainer, f64) -> Result<()>,
) -> Result<Trainer> {
    let model = build_model(cfg, train)?;
    let pairs = model.training_pairs(train)?;
    let mut trainer = Trainer::new(model, cfg.train.adam, cfg.train.batch_size, cfg.train.seed)?;
    trainer.run(&pairs, cfg.train.steps, &mut on_step)?;
    Ok(trainer)
}

/// Continues training on another dataset with fresh optimizer moments and
/// the new dataset's normalization.
pub fn finetune(
    trainer: &mut Trainer,
    target: &PairSet,
    steps: u64,
    on_step: impl FnMut(&Trainer, f64) -> Result<()>,
) -> Result<()> {
    let ps = target.patch_size();
    let m = trainer.model.unet.config().spatial_multiple() * trainer.model.autoencoder.as_ref().map_or(1, |a| a.config().spatial_factor);
    ensure!(
        ps > 0 && ps % m == 0,
        config,
        "dataset patches of {} cells are incompatible with the checkpoint (need a multiple of {})",
        ps,
        m
    );
    trainer.reset_optimizer();
    trainer.model.normalization = Normalization::of(target);
    let pairs = trainer.model.training_pairs(target)?;
    trainer.run(&pairs, steps, on_step)
}

/// Super-resolved maps of a subset plus timing.
#[derive(Clone, Debug)]
pub struct SampledSet {
    pub indices: Vec<usize>,
    pub sr: Vec<DepthGrid>,
    pub seconds: f64,
}

pub fn sample_set(model: &FloodModel, set: &PairSet, indices: &[usize], cfg: &SamplerConfig, batch: usize) -> Result<SampledSet> {
    let t0 = Instant::now();
    let sr = model.super_resolve(set, indices, cfg, batch)?;
    Ok(SampledSet {
        indices: indices.to_vec(),
        sr,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Evaluation report of `sampled` against the set's fine and coarse maps.
pub fn report_for(set: &PairSet, sampled: &SampledSet, threshold_cm: f64) -> Result<EvalReport> {
    let fg: Vec<DepthGrid> = sampled.indices.iter().map(|&i| set.fine[i].clone()).collect();
    let cg: Vec<DepthGrid> = sampled.indices.iter().map(|&i| set.coarse[i].clone()).collect();
    evaluate_grids(&sampled.sr, &fg, &cg, threshold_cm)
}

/// Evenly spread subset of `n` indices out of `len`, deterministic.
pub fn spread_indices(len: usize, n: usize) -> Vec<usize> {
    if n == 0 || n >= len {
        return (0..len).collect();
    }
    (0..n).map(|k| k * len / n).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub m: usize,
    pub infer_steps: usize,
    pub sr_fg_mse: f64,
    /// Relative MSE change against full sampling, percent.
    pub pct_vs_full: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub tolerance_pct: f64,
    pub full_mse: f64,
    pub full_seconds: f64,
    pub points: Vec<SweepPoint>,
    /// Smallest grid value of `m` within tolerance of full sampling.
    pub best_m: usize,
    /// Pairs `(m_small, m_large)` where the larger start has more than twice
    /// the error of the smaller one.
    pub monotonicity_flags: Vec<(usize, usize)>,
}

/// `1, 2, 5, 10, 20, 50, ...` below `timesteps`, then `timesteps`.
pub fn log_grid(timesteps: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut decade = 1usize;
    'outer: loop {
        for k in [1, 2, 5] {
            let m = k * decade;
            if m >= timesteps {
                break 'outer;
            }
            out.push(m);
        }
        decade *= 10;
    }
    out.push(timesteps);
    out
}

/// Evaluates truncated starts over `grid` against full sampling. The grid
/// entry equal to `T` is the full sampler itself.
pub fn sweep_m(
    model: &FloodModel,
    set: &PairSet,
    indices: &[usize],
    grid: &[usize],
    tolerance_pct: f64,
    seed: u64,
    batch: usize,
) -> Result<SweepReport> {
    ensure!(tolerance_pct >= 0.0, contract, "tolerance must be >= 0");
    ensure!(!grid.is_empty(), contract, "empty m grid");
    let big_t = model.schedule.timesteps();
    let fg: Vec<DepthGrid> = indices.iter().map(|&i| set.fine[i].clone()).collect();
    let full = sample_set(model, set, indices, &SamplerConfig::full(big_t, seed), batch)?;
    let full_mse = pooled_mse(&full.sr, &fg)?;
    let mut grid = grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let mut points = Vec::with_capacity(grid.len());
    for &m in &grid {
        ensure!(1 <= m && m <= big_t, contract, "m = {} outside 1..={}", m, big_t);
        let (mse, secs) = if m == big_t {
            (full_mse, full.seconds)
        } else {
            let s = sample_set(model, set, indices, &SamplerConfig::truncated(m, m, seed), batch)?;
            (pooled_mse(&s.sr, &fg)?, s.seconds)
        };
        let pct = if full_mse > 0.0 { pct_change_mse(full_mse, mse)? } else if mse == 0.0 { 0.0 } else { f64::INFINITY };
        info!("sweep m={m}: mse {mse:.4} ({pct:+.2}% vs full) in {secs:.2}s");
        points.push(SweepPoint {
            m,
            infer_steps: m,
            sr_fg_mse: mse,
            pct_vs_full: pct,
            seconds: secs,
        });
    }
    let best_m = points
        .iter()
        .find(|p| p.pct_vs_full <= tolerance_pct)
        .map(|p| p.m)
        .unwrap_or(big_t);
    let mut monotonicity_flags = Vec::new();
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            if b.sr_fg_mse > 2.0 * a.sr_fg_mse {
                monotonicity_flags.push((a.m, b.m));
            }
        }
    }
    Ok(SweepReport {
        tolerance_pct,
        full_mse,
        full_seconds: full.seconds,
        points,
        best_m,
        monotonicity_flags,
    })
}
