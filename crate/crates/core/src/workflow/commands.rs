//! Disk-level commands behind the CLI. Each takes plain arguments, writes
//! its artifacts under an output directory and returns a summary.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::run::{self, SweepReport};
use super::{ExperimentConfig, PairSet, Trainer};
use crate::diffusion::SamplerConfig;
use crate::error::{ensure, Error, Result};
use crate::io::{self, load_checkpoint, save_checkpoint};
use crate::metrics::{evaluate_run, EvalReport};
use crate::terrain::{build_dataset, DatasetConfig, DatasetManifest, DepthGrid, Split};

pub const CHECKPOINT_FILE: &str = "checkpoint.fsrc";
pub const TRAIN_LOG_FILE: &str = "train_log.tsv";
pub const CONFIG_SNAPSHOT_FILE: &str = "config.json";
pub const RUN_INFO_FILE: &str = "run.json";
const LOCK_FILE: &str = ".floodsr.lock";

/// Version string recorded next to every output.
pub fn version_string() -> String {
    format!("floodsr {} ({})", env!("CARGO_PKG_VERSION"), if crate::par::is_parallel() { "parallel" } else { "sequential" })
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        io::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::config(format!(
                "{} is in use by another command (remove {} if that process is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Serialize)]
struct RunInfo<'a> {
    version: String,
    command: &'a str,
    args: Vec<String>,
    seeds: serde_json::Value,
}

fn write_run_info(dir: &Path, command: &str, seeds: serde_json::Value) -> Result<()> {
    let info = RunInfo {
        version: version_string(),
        command,
        args: std::env::args().collect(),
        seeds,
    };
    io::write_json(&dir.join(RUN_INFO_FILE), &info)
}

/// `gen-data`: builds a dataset and records how it was made.
pub fn gen_data(cfg: &DatasetConfig, out: &Path) -> Result<DatasetManifest> {
    let _lock = DirLock::acquire(out)?;
    let m = build_dataset(cfg, out)?;
    write_run_info(out, "gen-data", serde_json::json!({ "dataset": cfg.seed }))?;
    Ok(m)
}

struct TrainLog {
    file: std::fs::File,
    every: u64,
    ema: Option<f64>,
}

impl TrainLog {
    fn open(path: &Path, every: u64) -> Result<Self> {
        let fresh = !path.exists();
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if fresh {
            writeln!(file, "step\tloss\tloss_ema").map_err(|e| Error::io(path, e))?;
        }
        Ok(TrainLog {
            file,
            every: every.max(1),
            ema: None,
        })
    }

    fn record(&mut self, step: u64, loss: f64) -> Result<()> {
        let ema = match self.ema {
            Some(e) => 0.98 * e + 0.02 * loss,
            None => loss,
        };
        self.ema = Some(ema);
        if step % self.every == 0 {
            writeln!(self.file, "{step}\t{loss:.6}\t{ema:.6}").map_err(|e| Error::io("train log", e))?;
            info!("step {step} loss {loss:.5} (ema {ema:.5})");
        }
        Ok(())
    }
}

fn checkpoint_hook<'a>(
    out: &'a Path,
    every: u64,
    log: &'a mut TrainLog,
) -> impl FnMut(&Trainer, f64) -> Result<()> + 'a {
    move |t, loss| {
        if !loss.is_finite() {
            return Err(Error::numeric(format!("loss became {loss} at step {}", t.step)));
        }
        log.record(t.step, loss)?;
        if every > 0 && t.step % every == 0 {
            save_checkpoint(&out.join(CHECKPOINT_FILE), &t.to_checkpoint()?)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub checkpoint: PathBuf,
    pub seconds: f64,
}

fn ensure_resumable(t: &Trainer, cfg: &ExperimentConfig) -> Result<()> {
    let m = &t.model;
    ensure!(m.mode == cfg.mode, config, "checkpoint mode {:?} differs from config {:?}", m.mode, cfg.mode);
    ensure!(m.unet.config() == &cfg.unet, config, "checkpoint U-Net differs from config");
    ensure!(m.schedule.params() == cfg.schedule, config, "checkpoint schedule differs from config");
    ensure!(m.zero_dem == cfg.zero_dem, config, "checkpoint zero_dem differs from config");
    ensure!(
        t.batch_size == cfg.train.batch_size && t.seed == cfg.train.seed,
        config,
        "checkpoint batch size / seed differ from config"
    );
    Ok(())
}

/// `train`: trains (or resumes) until `cfg.train.steps` total steps.
pub fn train(cfg: &ExperimentConfig, out: &Path, resume: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    let _lock = DirLock::acquire(out)?;
    let t0 = Instant::now();
    io::write_json(&out.join(CONFIG_SNAPSHOT_FILE), cfg)?;
    write_run_info(out, "train", serde_json::json!({ "train": cfg.train.seed, "sampler": cfg.sampler.seed }))?;
    let ck_path = out.join(CHECKPOINT_FILE);
    let (mut trainer, set) = if resume {
        let t = Trainer::from_checkpoint(&load_checkpoint(&ck_path)?)?;
        ensure_resumable(&t, cfg)?;
        let set = PairSet::load(&cfg.dataset, Split::Train, Some(t.model.normalization.as_pair()))?;
        (t, set)
    } else {
        let set = PairSet::load(&cfg.dataset, Split::Train, None)?;
        let model = run::build_model(cfg, &set)?;
        (Trainer::new(model, cfg.train.adam, cfg.train.batch_size, cfg.train.seed)?, set)
    };
    ensure!(!set.is_empty(), config, "dataset {} has no training samples", cfg.dataset.display());
    let pairs = trainer.model.training_pairs(&set)?;
    let remaining = cfg.train.steps.saturating_sub(trainer.step);
    let mut log = TrainLog::open(&out.join(TRAIN_LOG_FILE), cfg.train.log_every)?;
    trainer.run(&pairs, remaining, checkpoint_hook(out, cfg.train.checkpoint_every, &mut log))?;
    save_checkpoint(&ck_path, &trainer.to_checkpoint()?)?;
    Ok(TrainSummary {
        steps: trainer.step,
        checkpoint: ck_path,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// `finetune`: loads a checkpoint, resets the optimizer and trains on a new
/// dataset for `steps` steps.
pub fn finetune(from: &Path, dataset: &Path, steps: u64, out: &Path, log_every: u64) -> Result<TrainSummary> {
    let _lock = DirLock::acquire(out)?;
    let t0 = Instant::now();
    let mut trainer = Trainer::from_checkpoint(&load_checkpoint(from)?)?;
    let set = PairSet::load(dataset, Split::Train, None)?;
    ensure!(!set.is_empty(), config, "dataset {} has no training samples", dataset.display());
    write_run_info(out, "finetune", serde_json::json!({ "train": trainer.seed }))?;
    let mut log = TrainLog::open(&out.join(TRAIN_LOG_FILE), log_every)?;
    run::finetune(&mut trainer, &set, steps, checkpoint_hook(out, 0, &mut log))?;
    let ck_path = out.join(CHECKPOINT_FILE);
    save_checkpoint(&ck_path, &trainer.to_checkpoint()?)?;
    Ok(TrainSummary {
        steps,
        checkpoint: ck_path,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleSummary {
    pub written: Vec<PathBuf>,
    pub seconds: f64,
}

fn load_model(checkpoint: &Path) -> Result<Trainer> {
    Trainer::from_checkpoint(&load_checkpoint(checkpoint)?)
}

/// `sample` on a single coarse map and DEM window.
pub fn sample_one(checkpoint: &Path, cg: &Path, dem: &Path, cfg: &SamplerConfig, out: &Path) -> Result<SampleSummary> {
    let trainer = load_model(checkpoint)?;
    let model = &trainer.model;
    let cg_map = io::read_depth(cg)?;
    let dem_map = io::read_dem(dem)?;
    ensure!(
        cg_map.depths.same_shape(&dem_map.elevations),
        dim,
        "coarse map and DEM differ in shape"
    );
    let (max_depth, scaling) = model.normalization.as_pair();
    let set = PairSet {
        dir: PathBuf::new(),
        entries: vec![crate::terrain::SampleEntry {
            event: 0,
            step: 0,
            patch: 0,
            split: Split::Test,
            fine: String::new(),
            coarse: cg.display().to_string(),
        }],
        fine: vec![cg_map.clone()],
        coarse: vec![cg_map],
        dem: vec![scaling.normalize(&dem_map.elevations)?],
        max_depth_cm: max_depth,
        dem_scaling: scaling,
        cell_size: dem_map.cell_size,
    };
    let s = run::sample_set(model, &set, &[0], cfg, 1)?;
    io::write_depth(out, &s.sr[0])?;
    Ok(SampleSummary {
        written: vec![out.to_path_buf()],
        seconds: s.seconds,
    })
}

/// `sample` over a dataset split; rasters are named like the coarse inputs.
pub fn sample_dataset(
    checkpoint: &Path,
    dataset: &Path,
    split: Split,
    limit: usize,
    cfg: &SamplerConfig,
    batch: usize,
    out: &Path,
) -> Result<SampleSummary> {
    let _lock = DirLock::acquire(out)?;
    let trainer = load_model(checkpoint)?;
    let model = &trainer.model;
    let set = PairSet::load(dataset, split, Some(model.normalization.as_pair()))?;
    ensure!(!set.is_empty(), config, "no {:?} samples in {}", split, dataset.display());
    let idx = run::spread_indices(set.len(), limit);
    let s = run::sample_set(model, &set, &idx, cfg, batch)?;
    write_run_info(out, "sample", serde_json::json!({ "sampler": cfg.seed }))?;
    let mut written = Vec::with_capacity(idx.len());
    for (&i, g) in idx.iter().zip(&s.sr) {
        let name = Path::new(&set.entries[i].coarse)
            .file_name()
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(format!("{i:05}.fmap")));
        let p = out.join(name);
        io::write_depth(&p, g)?;
        written.push(p);
    }
    Ok(SampleSummary {
        written,
        seconds: s.seconds,
    })
}

/// `sweep-m` over the test split.
pub fn sweep(
    checkpoint: &Path,
    dataset: &Path,
    tolerance_pct: f64,
    n_images: usize,
    seed: u64,
    batch: usize,
    grid: Option<Vec<usize>>,
) -> Result<SweepReport> {
    let trainer = load_model(checkpoint)?;
    let model = &trainer.model;
    let set = PairSet::load(dataset, Split::Test, Some(model.normalization.as_pair()))?;
    ensure!(!set.is_empty(), config, "no test samples in {}", dataset.display());
    let idx = run::spread_indices(set.len(), n_images);
    let grid = grid.unwrap_or_else(|| run::log_grid(model.schedule.timesteps()));
    let report = run::sweep_m(model, &set, &idx, &grid, tolerance_pct, seed, batch)?;
    if !report.monotonicity_flags.is_empty() {
        warn!("MSE grows by more than 2x with m for {:?}", report.monotonicity_flags);
    }
    Ok(report)
}

/// `eval`: compares SR rasters against FG and CG rasters of the same name.
pub fn eval(
    sr: &Path,
    fg: &Path,
    cg: &Path,
    threshold_cm: f64,
    sample_n: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<EvalReport> {
    let report = evaluate_run(sr, fg, cg, threshold_cm, sample_n, seed)?;
    if let Some(dir) = out {
        io::create_dir_all(dir)?;
        io::write_atomic(&dir.join("report.tsv"), report.to_tsv().as_bytes())?;
        io::write_json(&dir.join("report.json"), &report)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub with_dem: EvalReport,
    pub without_dem: EvalReport,
}

impl AblationReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("variant\tcg_fg_mse\tsr_fg_mse\tmse_pct_change\n");
        for (name, r) in [("with_dem", &self.with_dem), ("without_dem", &self.without_dem)] {
            s.push_str(&format!(
                "{name}\t{:.4}\t{:.4}\t{:.2}\n",
                r.cg_fg_mse, r.sr_fg_mse, r.mse_pct_change
            ));
        }
        s
    }
}

/// Trains with and without the DEM channel under identical seeds and
/// budget, then evaluates both on the test split.
pub fn ablate(cfg: &ExperimentConfig, out: &Path) -> Result<AblationReport> {
    cfg.validate()?;
    let _lock = DirLock::acquire(out)?;
    io::write_json(&out.join(CONFIG_SNAPSHOT_FILE), cfg)?;
    write_run_info(out, "ablate", serde_json::json!({ "train": cfg.train.seed, "sampler": cfg.sampler.seed }))?;
    let train_set = PairSet::load(&cfg.dataset, Split::Train, None)?;
    let test_set = PairSet::load(&cfg.dataset, Split::Test, None)?;
    let idx = run::spread_indices(test_set.len(), cfg.eval.sample_n);
    let threshold = cfg.eval.threshold_for(test_set.max_depth_cm);
    let mut reports = Vec::with_capacity(2);
    for zero_dem in [false, true] {
        let c = ExperimentConfig {
            zero_dem,
            ..cfg.clone()
        };
        let trainer = run::train_model(&c, &train_set, |_, _| Ok(()))?;
        let name = if zero_dem { "without_dem" } else { "with_dem" };
        save_checkpoint(&out.join(format!("{name}.fsrc")), &trainer.to_checkpoint()?)?;
        let s = run::sample_set(&trainer.model, &test_set, &idx, &cfg.sampler, cfg.eval.batch)?;
        reports.push(run::report_for(&test_set, &s, threshold)?);
    }
    let without_dem = reports.pop().expect("two reports");
    let with_dem = reports.pop().expect("two reports");
    let report = AblationReport { with_dem, without_dem };
    io::write_json(&out.join("ablation.json"), &report)?;
    io::write_atomic(&out.join("ablation.tsv"), report.to_tsv().as_bytes())?;
    Ok(report)
}

/// Super-resolved maps written next to their names, used by `sample`
/// callers that already hold grids.
pub fn write_grids(out: &Path, names: &[String], grids: &[DepthGrid]) -> Result<()> {
    io::create_dir_all(out)?;
    for (n, g) in names.iter().zip(grids) {
        io::write_depth(&out.join(n), g)?;
    }
    Ok(())
}
