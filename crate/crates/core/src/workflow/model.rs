use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::PairSet;
use crate::diffusion::{draw_training_inputs, sample, NoiseSchedule, SamplerConfig, ScheduleParams};
use crate::error::{ensure, Error, Result};
use crate::io::Checkpoint;
use crate::latent::{latent_pipeline, Autoencoder, AutoencoderConfig};
use crate::numerics::{adam_step, AdamConfig, AdamState, ParamStore, Tensor};
use crate::par;
use crate::terrain::{denormalize_depth, DemScaling, DepthGrid, DepthRange};
use crate::unet::{Unet, UnetConfig};

/// Pixel-space or latent-space diffusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Pixel,
    Latent,
}

impl Mode {
    pub fn depth_range(self) -> DepthRange {
        match self {
            Mode::Pixel => DepthRange::Unit,
            Mode::Latent => DepthRange::Symmetric,
        }
    }
}

/// Constants mapping physical units to model space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub max_depth_cm: f64,
    pub dem_min: f64,
    pub dem_max: f64,
}

impl Normalization {
    pub fn of(set: &PairSet) -> Self {
        Normalization {
            max_depth_cm: set.max_depth_cm,
            dem_min: set.dem_scaling.min,
            dem_max: set.dem_scaling.max,
        }
    }

    pub fn as_pair(&self) -> (f64, DemScaling) {
        (
            self.max_depth_cm,
            DemScaling {
                min: self.dem_min,
                max: self.dem_max,
            },
        )
    }
}

/// A noise predictor with everything needed to turn coarse maps into
/// super-resolved depth grids.
#[derive(Clone, Debug)]
pub struct FloodModel {
    pub mode: Mode,
    pub unet: Unet,
    pub schedule: NoiseSchedule,
    pub normalization: Normalization,
    pub autoencoder: Option<Autoencoder>,
    /// The DEM channel is zeroed in training and inference.
    pub zero_dem: bool,
}

/// Model-space training examples.
#[derive(Clone, Debug)]
pub struct TrainingPairs {
    pub target: Vec<Tensor>,
    pub cond: Vec<Tensor>,
}

impl TrainingPairs {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let t: Vec<Tensor> = idx.iter().map(|&i| self.target[i].clone()).collect();
        let c: Vec<Tensor> = idx.iter().map(|&i| self.cond[i].clone()).collect();
        Ok((Tensor::stack(&t)?, Tensor::stack(&c)?))
    }
}

fn unbatch(t: &Tensor) -> Result<Vec<Tensor>> {
    let (n, c, h, w) = t.dims4()?;
    (0..n)
        .map(|i| t.batch_slice(i, 1)?.reshape(vec![c, h, w]))
        .collect()
}

/// Sampling seed for batch `b`; batches are independent streams.
fn batch_seed(seed: u64, b: usize) -> u64 {
    seed ^ (b as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl FloodModel {
    pub fn new(
        mode: Mode,
        unet: Unet,
        schedule: NoiseSchedule,
        normalization: Normalization,
        autoencoder: Option<Autoencoder>,
        zero_dem: bool,
    ) -> Result<Self> {
        let cfg = unet.config();
        match mode {
            Mode::Pixel => ensure!(
                cfg.in_channels == 3 && cfg.out_channels == 1,
                config,
                "pixel mode needs 3 input and 1 output channels, got {} and {}",
                cfg.in_channels,
                cfg.out_channels
            ),
            Mode::Latent => {
                let ae = autoencoder
                    .as_ref()
                    .ok_or_else(|| Error::config("latent mode requires an autoencoder"))?;
                let lc = ae.config().latent_channels;
                ensure!(
                    cfg.in_channels == 3 * lc && cfg.out_channels == lc,
                    config,
                    "latent mode with {} latent channels needs {} input and {} output channels",
                    lc,
                    3 * lc,
                    lc
                );
            }
        }
        Ok(FloodModel {
            mode,
            unet,
            schedule,
            normalization,
            autoencoder,
            zero_dem,
        })
    }

    /// Fails unless `set` was loaded with the model's normalization.
    pub fn check_set(&self, set: &PairSet) -> Result<()> {
        ensure!(
            set.max_depth_cm == self.normalization.max_depth_cm
                && set.dem_scaling.min == self.normalization.dem_min
                && set.dem_scaling.max == self.normalization.dem_max,
            config,
            "dataset normalization differs from the model's; load it with the model's constants"
        );
        Ok(())
    }

    /// Coarse map and DEM of each sample as `[1, H, W]` model-space tensors.
    fn pixel_inputs(&self, set: &PairSet, i: usize) -> Result<(Tensor, Tensor)> {
        let range = self.mode.depth_range();
        Ok((set.coarse_tensor(i, range)?, set.dem_tensor(i, self.zero_dem)))
    }

    pub fn training_pairs(&self, set: &PairSet) -> Result<TrainingPairs> {
        self.check_set(set)?;
        let range = self.mode.depth_range();
        let n = set.len();
        match self.mode {
            Mode::Pixel => {
                let mut target = Vec::with_capacity(n);
                let mut cond = Vec::with_capacity(n);
                for i in 0..n {
                    target.push(set.fine_tensor(i, range)?);
                    let (c, d) = self.pixel_inputs(set, i)?;
                    let (h, w) = (c.shape()[1], c.shape()[2]);
                    let mut data = c.into_data();
                    data.extend_from_slice(d.data());
                    cond.push(Tensor::new(vec![2, h, w], data)?);
                }
                Ok(TrainingPairs { target, cond })
            }
            Mode::Latent => {
                let ae = self.autoencoder.as_ref().expect("checked in new");
                let chunks: Vec<Vec<usize>> = (0..n).collect::<Vec<_>>().chunks(16).map(<[usize]>::to_vec).collect();
                let parts = par::map_slice(&chunks, |idx| -> Result<(Vec<Tensor>, Vec<Tensor>)> {
                    let f: Vec<Tensor> = idx.iter().map(|&i| set.fine_tensor(i, range)).collect::<Result<_>>()?;
                    let mut cs = Vec::new();
                    let mut ds = Vec::new();
                    for &i in idx {
                        let (c, d) = self.pixel_inputs(set, i)?;
                        cs.push(c);
                        ds.push(d);
                    }
                    let zf = ae.encode_scaled(&Tensor::stack(&f)?)?;
                    let zc = ae.encode_scaled(&Tensor::stack(&cs)?)?;
                    let zd = ae.encode_scaled(&Tensor::stack(&ds)?)?;
                    let cond = Tensor::concat_channels(&[&zc, &zd])?;
                    Ok((unbatch(&zf)?, unbatch(&cond)?))
                });
                let mut out = TrainingPairs {
                    target: Vec::with_capacity(n),
                    cond: Vec::with_capacity(n),
                };
                for p in parts {
                    let (t, c) = p?;
                    out.target.extend(t);
                    out.cond.extend(c);
                }
                Ok(out)
            }
        }
    }

    /// Super-resolves the samples at `indices`, `batch` images at a time.
    /// Batch `b` samples with its own seed derived from `cfg.seed`.
    pub fn super_resolve(
        &self,
        set: &PairSet,
        indices: &[usize],
        cfg: &SamplerConfig,
        batch: usize,
    ) -> Result<Vec<DepthGrid>> {
        self.check_set(set)?;
        cfg.validate(self.schedule.timesteps())?;
        ensure!(batch >= 1, contract, "batch must be >= 1");
        let range = self.mode.depth_range();
        let chunks: Vec<&[usize]> = indices.chunks(batch).collect();
        let results = par::map_range(chunks.len(), |b| -> Result<Vec<DepthGrid>> {
            let idx = chunks[b];
            let mut cs = Vec::with_capacity(idx.len());
            let mut ds = Vec::with_capacity(idx.len());
            for &i in idx {
                let (c, d) = self.pixel_inputs(set, i)?;
                cs.push(c);
                ds.push(d);
            }
            let cg = Tensor::stack(&cs)?;
            let dem = Tensor::stack(&ds)?;
            let bcfg = SamplerConfig {
                seed: batch_seed(cfg.seed, b),
                ..*cfg
            };
            let out = match self.mode {
                Mode::Pixel => {
                    let cond = Tensor::concat_channels(&[&cg, &dem])?;
                    sample(&self.unet, &cond, &cg, &self.schedule, &bcfg)?
                }
                Mode::Latent => latent_pipeline(self.autoencoder.as_ref(), &self.unet, &self.schedule, &cg, &dem, &bcfg)?,
            };
            unbatch(&out)?
                .iter()
                .zip(idx)
                .map(|(t, &i)| {
                    denormalize_depth(
                        t,
                        self.normalization.max_depth_cm,
                        range,
                        set.cell_size,
                        set.entries[i].step,
                    )
                })
                .collect()
        });
        let mut out = Vec::with_capacity(indices.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }
}

/// Metadata stored in every model checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: String,
    pub crate_version: String,
    pub mode: Mode,
    pub unet: UnetConfig,
    pub schedule: ScheduleParams,
    pub normalization: Normalization,
    pub zero_dem: bool,
    pub autoencoder: Option<AutoencoderConfig>,
    pub latent_scale: Option<f64>,
    pub seed: u64,
    pub step: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub adam_step_count: u64,
    /// Position of the training RNG stream, as a decimal string.
    pub rng_word_pos: String,
}

pub const CHECKPOINT_KIND: &str = "floodsr-model";
const TRAIN_STREAM: u64 = 7;

/// Training state: model, optimizer, step counter and RNG stream.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: FloodModel,
    pub adam: AdamState,
    pub step: u64,
    pub seed: u64,
    pub batch_size: usize,
    rng: ChaCha8Rng,
}

fn train_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TRAIN_STREAM);
    rng
}

impl Trainer {
    pub fn new(model: FloodModel, adam: AdamConfig, batch_size: usize, seed: u64) -> Result<Self> {
        ensure!(batch_size >= 1, config, "batch_size must be >= 1");
        let state = AdamState::new(adam, model.unet.params());
        Ok(Trainer {
            model,
            adam: state,
            step: 0,
            seed,
            batch_size,
            rng: train_rng(seed),
        })
    }

    /// Fresh optimizer moments and step counter, keeping the weights.
    pub fn reset_optimizer(&mut self) {
        self.adam.reset();
    }

    /// One Adam step on a random batch. Returns the batch loss.
    pub fn train_step(&mut self, data: &TrainingPairs) -> Result<f64> {
        ensure!(!data.is_empty(), config, "no training samples");
        let idx: Vec<usize> = (0..self.batch_size)
            .map(|_| self.rng.random_range(0..data.len()))
            .collect();
        let (x0, cond) = data.batch(&idx)?;
        let draw = draw_training_inputs(&x0, &self.model.schedule, &mut self.rng)?;
        let lg = self.model.unet.loss_and_grads(&draw.x_t, &cond, &draw.t, &draw.eps, false)?;
        if !lg.loss.is_finite() {
            return Err(Error::numeric(format!("loss is {} at step {}", lg.loss, self.step + 1)));
        }
        adam_step(self.model.unet.params_mut(), &lg.param_grads, &mut self.adam)?;
        self.step += 1;
        Ok(lg.loss)
    }

    /// Runs `steps` steps, calling `on_step(step, loss)` after each.
    pub fn run(
        &mut self,
        data: &TrainingPairs,
        steps: u64,
        mut on_step: impl FnMut(&Trainer, f64) -> Result<()>,
    ) -> Result<()> {
        for _ in 0..steps {
            let loss = self.train_step(data)?;
            on_step(self, loss)?;
        }
        Ok(())
    }

    pub fn meta(&self) -> CheckpointMeta {
        let m = &self.model;
        CheckpointMeta {
            kind: CHECKPOINT_KIND.into(),
            crate_version: env!("CARGO_PKG_VERSION").into(),
            mode: m.mode,
            unet: m.unet.config().clone(),
            schedule: m.schedule.params(),
            normalization: m.normalization,
            zero_dem: m.zero_dem,
            autoencoder: m.autoencoder.as_ref().map(|a| a.config().clone()),
            latent_scale: m.autoencoder.as_ref().map(|a| a.latent_scale),
            seed: self.seed,
            step: self.step,
            batch_size: self.batch_size,
            adam: self.adam.config,
            adam_step_count: self.adam.step_count,
            rng_word_pos: self.rng.get_word_pos().to_string(),
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(serde_json::to_value(self.meta())?);
        let ps = self.model.unet.params();
        for (name, t) in ps.iter() {
            ck.push(format!("unet/{name}"), t.clone());
        }
        for (name, t) in ps.names().iter().zip(&self.adam.first_moment) {
            ck.push(format!("adam_m/{name}"), t.clone());
        }
        for (name, t) in ps.names().iter().zip(&self.adam.second_moment) {
            ck.push(format!("adam_v/{name}"), t.clone());
        }
        if let Some(ae) = &self.model.autoencoder {
            for (name, t) in ae.params().iter() {
                ck.push(format!("ae/{name}"), t.clone());
            }
        }
        Ok(ck)
    }

    /// Rebuilds a trainer. Nothing is modified unless every tensor matches.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(ck.metadata.clone())
            .map_err(|e| Error::Incompatible(format!("checkpoint metadata: {e}")))?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(Error::Incompatible(format!("not a model checkpoint (kind {:?})", meta.kind)));
        }
        let mut unet = Unet::build(meta.unet.clone(), 0)?;
        fill(unet.params_mut(), ck, "unet/")?;
        let autoencoder = match &meta.autoencoder {
            Some(cfg) => {
                let mut ae = Autoencoder::build(cfg.clone(), 0)?;
                fill(ae.params_mut(), ck, "ae/")?;
                ae.latent_scale = meta.latent_scale.unwrap_or(1.0);
                Some(ae)
            }
            None => None,
        };
        let schedule = NoiseSchedule::new(meta.schedule)?;
        let model = FloodModel::new(meta.mode, unet, schedule, meta.normalization, autoencoder, meta.zero_dem)?;
        let mut adam = AdamState::new(meta.adam, model.unet.params());
        adam.step_count = meta.adam_step_count;
        let mut m = model.unet.params().clone();
        fill(&mut m, ck, "adam_m/")?;
        let mut v = model.unet.params().clone();
        fill(&mut v, ck, "adam_v/")?;
        adam.first_moment = m.tensors().to_vec();
        adam.second_moment = v.tensors().to_vec();
        let pos: u128 = meta
            .rng_word_pos
            .parse()
            .map_err(|_| Error::Incompatible(format!("bad rng position {:?}", meta.rng_word_pos)))?;
        let mut rng = train_rng(meta.seed);
        rng.set_word_pos(pos);
        Ok(Trainer {
            model,
            adam,
            step: meta.step,
            seed: meta.seed,
            batch_size: meta.batch_size,
            rng,
        })
    }
}

/// Copies `prefix`-named tensors from `ck` into `ps`, checking names and shapes.
fn fill(ps: &mut ParamStore, ck: &Checkpoint, prefix: &str) -> Result<()> {
    let found: Vec<(&str, &Tensor)> = ck.with_prefix(prefix).collect();
    ensure!(
        found.len() == ps.len(),
        config,
        "checkpoint has {} '{}' tensors, model expects {}",
        found.len(),
        prefix,
        ps.len()
    );
    let mut staged = Vec::with_capacity(found.len());
    for ((name, t), (want_name, want)) in found.iter().zip(ps.iter()) {
        ensure!(*name == want_name, config, "checkpoint tensor {}{} where {} expected", prefix, name, want_name);
        ensure!(
            t.shape() == want.shape(),
            config,
            "{}{} has shape {:?}, model expects {:?}",
            prefix,
            name,
            t.shape(),
            want.shape()
        );
        staged.push((*t).clone());
    }
    for (dst, src) in ps.tensors_mut().iter_mut().zip(staged) {
        *dst = src;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::StartPoint;

    #[test]
    fn batch_seeds_differ() {
        assert_ne!(batch_seed(1, 0), batch_seed(1, 1));
        assert_ne!(batch_seed(1, 0), 1);
    }

    #[test]
    fn latent_mode_needs_autoencoder() {
        let cfg = UnetConfig {
            in_channels: 12,
            out_channels: 4,
            base_width: 8,
            depth: 2,
            attn_levels: vec![],
            time_embed_dim: 8,
            norm_groups: 4,
        };
        let unet = Unet::build(cfg, 0).unwrap();
        let sched = NoiseSchedule::new(ScheduleParams::rescaled(100)).unwrap();
        let norm = Normalization {
            max_depth_cm: 1.0,
            dem_min: 0.0,
            dem_max: 1.0,
        };
        let r = FloodModel::new(Mode::Latent, unet, sched, norm, None, false);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn start_point_round_trips_through_json() {
        let c = SamplerConfig::truncated(20, 5, 3);
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<SamplerConfig>(&s).unwrap(), c);
        assert!(matches!(c.start, StartPoint::Truncated { m: 20 }));
    }
}
