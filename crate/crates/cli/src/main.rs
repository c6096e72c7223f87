use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

use floodsr::diffusion::{SamplerConfig, StartPoint};
use floodsr::io::{read_depth, read_json};
use floodsr::metrics::{write_diff_pgm, EvalReport};
use floodsr::terrain::{DatasetConfig, DatasetManifest, Split};
use floodsr::workflow::commands;
use floodsr::workflow::{EvalConfig, ExperimentConfig, Mode};
use floodsr::{Error, Result};

#[derive(Parser)]
#[command(name = "floodsr", version, about = "Diffusion super-resolution of coarse flood-depth maps")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum StartArg {
    Noise,
    Truncated,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Pixel,
    Latent,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print a complete default configuration as JSON.
    PrintConfig {
        #[arg(long, value_enum, default_value = "pixel")]
        mode: ModeArg,
        /// Print the dataset configuration instead.
        #[arg(long)]
        dataset: bool,
    },
    /// Generate a synthetic catchment dataset.
    GenData {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        upscale: Option<usize>,
        #[arg(long)]
        patch: Option<usize>,
        #[arg(long)]
        events: Option<usize>,
        /// Full dataset configuration; flags override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from an experiment configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue training a checkpoint on another dataset.
    Finetune {
        #[arg(long)]
        from_checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        log_every: u64,
    },
    /// Super-resolve one coarse map, or a dataset split with --dataset.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required_unless_present = "dataset", requires = "dem")]
        cg: Option<PathBuf>,
        #[arg(long)]
        dem: Option<PathBuf>,
        #[arg(long, conflicts_with_all = ["cg", "dem"])]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Maximum number of patches from the dataset (0 = all).
        #[arg(long, default_value_t = 0)]
        limit: usize,
        #[arg(long, value_enum, default_value = "noise")]
        start: StartArg,
        #[arg(long, default_value_t = 0)]
        m: usize,
        /// Reverse steps; defaults to T for noise starts and m otherwise.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        /// Output raster (single map) or directory (dataset).
        #[arg(long)]
        out: PathBuf,
    },
    /// Find the smallest truncated start within tolerance of full sampling.
    SweepM {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        tolerance_pct: f64,
        #[arg(long, default_value_t = 100)]
        n_images: usize,
        /// Explicit m values, comma separated.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<usize>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        /// Write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare super-resolved rasters with fine and coarse ones.
    Eval {
        #[arg(long)]
        sr: PathBuf,
        #[arg(long)]
        fg: PathBuf,
        #[arg(long)]
        cg: PathBuf,
        /// Flood threshold in cm. Defaults to 30 cm rescaled to --max-depth.
        #[arg(long)]
        threshold: Option<f64>,
        /// Dataset maximum depth (cm) for the default threshold.
        #[arg(long)]
        max_depth: Option<f64>,
        #[arg(long, default_value_t = 0)]
        sample_n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for report.tsv and report.json.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write FG-CG and FG-SR difference heatmaps (16-bit PGM).
        #[arg(long)]
        heatmaps: bool,
        /// Depth difference (cm) mapped to full black/white.
        #[arg(long, default_value_t = 50.0)]
        heatmap_scale: f64,
    },
    /// Train and evaluate with and without the DEM channel.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean and variance of MSE % change across several eval reports.
    Summarize {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let threads = floodsr::par::init_from_env();
    log::debug!("{} with {threads} worker(s)", commands::version_string());
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

/// Reads a JSON config; schema violations are configuration errors.
fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn load_experiment(path: &Path) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = read_config(path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::PrintConfig { mode, dataset } => {
            if dataset {
                print_json(&DatasetConfig::default())
            } else {
                match mode {
                    ModeArg::Pixel => print_json(&ExperimentConfig::default()),
                    ModeArg::Latent => print_json(&ExperimentConfig::latent_default()),
                }
            }
        }
        Cmd::GenData {
            seed,
            size,
            upscale,
            patch,
            events,
            config,
            out,
        } => {
            let mut cfg = match config {
                Some(p) => read_config::<DatasetConfig>(&p)?,
                None => DatasetConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = size {
                cfg.terrain.size = s;
            }
            if let Some(u) = upscale {
                cfg.upscale = u;
            }
            if let Some(p) = patch {
                cfg.patch = p;
            }
            if let Some(e) = events {
                cfg.n_events = e;
            }
            let m = commands::gen_data(&cfg, &out)?;
            print_manifest(&m);
            Ok(())
        }
        Cmd::Train { config, resume, out } => {
            let cfg = load_experiment(&config)?;
            let s = commands::train(&cfg, &out, resume)?;
            println!("trained to step {} in {:.1}s; checkpoint {}", s.steps, s.seconds, s.checkpoint.display());
            Ok(())
        }
        Cmd::Finetune {
            from_checkpoint,
            dataset,
            steps,
            out,
            log_every,
        } => {
            let s = commands::finetune(&from_checkpoint, &dataset, steps, &out, log_every)?;
            println!("finetuned {} steps in {:.1}s; checkpoint {}", s.steps, s.seconds, s.checkpoint.display());
            Ok(())
        }
        Cmd::Sample {
            checkpoint,
            cg,
            dem,
            dataset,
            split,
            limit,
            start,
            m,
            steps,
            seed,
            batch,
            out,
        } => {
            let sampler = sampler_config(&checkpoint, start, m, steps, seed)?;
            let s = match (dataset, cg, dem) {
                (Some(ds), _, _) => commands::sample_dataset(&checkpoint, &ds, split.into(), limit, &sampler, batch, &out)?,
                (None, Some(cg), Some(dem)) => commands::sample_one(&checkpoint, &cg, &dem, &sampler, &out)?,
                _ => return Err(Error::config("sample needs --dataset or both --cg and --dem")),
            };
            println!("wrote {} raster(s) in {:.3}s", s.written.len(), s.seconds);
            Ok(())
        }
        Cmd::SweepM {
            checkpoint,
            dataset,
            tolerance_pct,
            n_images,
            grid,
            seed,
            batch,
            out,
        } => {
            let r = commands::sweep(&checkpoint, &dataset, tolerance_pct, n_images, seed, batch, grid)?;
            println!("m\tmse_cm2\tpct_vs_full\tseconds");
            for p in &r.points {
                println!("{}\t{:.4}\t{:+.2}\t{:.2}", p.m, p.sr_fg_mse, p.pct_vs_full, p.seconds);
            }
            println!("best_m\t{}", r.best_m);
            if let Some(p) = out {
                floodsr::io::write_json(&p, &r)?;
            }
            Ok(())
        }
        Cmd::Eval {
            sr,
            fg,
            cg,
            threshold,
            max_depth,
            sample_n,
            seed,
            out,
            heatmaps,
            heatmap_scale,
        } => {
            let threshold = match (threshold, max_depth) {
                (Some(t), _) => t,
                (None, Some(d)) => EvalConfig::default().threshold_for(d),
                (None, None) => return Err(Error::config("eval needs --threshold or --max-depth")),
            };
            let r = commands::eval(&sr, &fg, &cg, threshold, sample_n, seed, out.as_deref())?;
            print!("{}", r.to_tsv());
            if heatmaps {
                let dir = out.ok_or_else(|| Error::config("--heatmaps needs --out"))?;
                write_heatmaps(&r, &sr, &fg, &cg, &dir.join("heatmaps"), heatmap_scale)?;
            }
            Ok(())
        }
        Cmd::Ablate { config, out } => {
            let cfg = load_experiment(&config)?;
            if cfg.mode != Mode::Pixel {
                warn!("ablation in latent mode zeroes the DEM latent channels");
            }
            let r = commands::ablate(&cfg, &out)?;
            print!("{}", r.to_tsv());
            Ok(())
        }
        Cmd::Summarize { reports } => {
            let mut pct = Vec::with_capacity(reports.len());
            println!("report\tmse_pct_change\tcsi_pp_change");
            for p in &reports {
                let r: EvalReport = read_json(p)?;
                let csi = r.csi_pp_change.map(|v| format!("{v:.2}")).unwrap_or_else(|| "NA".into());
                println!("{}\t{:.2}\t{csi}", p.display(), r.mse_pct_change);
                pct.push(r.mse_pct_change);
            }
            let (mean, var) = floodsr::metrics::mean_and_variance(&pct)?;
            println!("mean\t{mean:.2}\nvariance\t{var:.2}");
            Ok(())
        }
    }
}

fn sampler_config(checkpoint: &Path, start: StartArg, m: usize, steps: Option<usize>, seed: u64) -> Result<SamplerConfig> {
    let ck = floodsr::io::load_checkpoint(checkpoint)?;
    let meta: floodsr::workflow::CheckpointMeta = serde_json::from_value(ck.metadata.clone())?;
    let t = meta.schedule.timesteps;
    let cfg = match start {
        StartArg::Noise => SamplerConfig {
            start: StartPoint::RandomNoise,
            infer_steps: steps.unwrap_or(t),
            seed,
        },
        StartArg::Truncated => SamplerConfig {
            start: StartPoint::Truncated { m },
            infer_steps: steps.unwrap_or(m),
            seed,
        },
    };
    cfg.validate(t)?;
    Ok(cfg)
}

fn print_manifest(m: &DatasetManifest) {
    println!(
        "patches {}  train {}  test {}  max_depth_cm {:.2}  cg_fg_mse {:.4}",
        m.patches.len(),
        m.n_train,
        m.n_test,
        m.max_depth_cm,
        m.cg_fg_mse
    );
    for w in &m.warnings {
        println!("warning: {w}");
    }
}

fn write_heatmaps(r: &EvalReport, sr: &Path, fg: &Path, cg: &Path, dir: &Path, scale: f64) -> Result<()> {
    floodsr::io::create_dir_all(dir)?;
    for name in &r.images {
        let stem = name.trim_end_matches(".fmap");
        let f = read_depth(&fg.join(name))?;
        write_diff_pgm(&dir.join(format!("{stem}_fg_cg.pgm")), &f, &read_depth(&cg.join(name))?, scale)?;
        write_diff_pgm(&dir.join(format!("{stem}_fg_sr.pgm")), &f, &read_depth(&sr.join(name))?, scale)?;
    }
    info!("heatmaps written to {}", dir.display());
    Ok(())
}
