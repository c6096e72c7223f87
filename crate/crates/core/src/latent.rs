//! Convolutional autoencoder and the latent-space sampling pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{sample, NoisePredictor, NoiseSchedule, SamplerConfig, StartPoint};
use crate::error::{ensure, Error, Result};
use crate::numerics::{adam_step, AdamConfig, AdamState, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderConfig {
    /// Spatial reduction per axis; a power of two.
    pub spatial_factor: usize,
    pub latent_channels: usize,
    pub base_width: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            spatial_factor: 4,
            latent_channels: 4,
            base_width: 16,
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.spatial_factor >= 2 && self.spatial_factor.is_power_of_two(),
            config,
            "spatial_factor must be a power of two >= 2, got {}",
            self.spatial_factor
        );
        ensure!(self.latent_channels >= 1, config, "latent_channels must be >= 1");
        ensure!(self.base_width >= 1, config, "base_width must be >= 1");
        ensure!(self.batch_size >= 1, config, "batch_size must be >= 1");
        Ok(())
    }

    fn levels(&self) -> usize {
        self.spatial_factor.trailing_zeros() as usize
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level.min(1)
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    /// Nearest-neighbour 2x upsampling before the convolution.
    up: bool,
}

/// Deterministic autoencoder mapping `[N, 1, H, W]` to
/// `[N, latent_channels, H/f, W/f]`.
#[derive(Clone, Debug)]
pub struct Autoencoder {
    config: AutoencoderConfig,
    params: ParamStore<f32>,
    encoder: Vec<Conv>,
    decoder: Vec<Conv>,
    /// Multiplier applied to raw latents before diffusion.
    pub latent_scale: f64,
}

impl Autoencoder {
    pub fn build(config: AutoencoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut conv = |ps: &mut ParamStore<f32>, name: String, cin: usize, cout: usize, stride: usize, up: bool| {
            let std = (1.0 / (cin * 9) as f64).sqrt() as f32;
            let w = Tensor::<f32>::randn(vec![cout, cin, 3, 3], &mut rng).map(|v| v * std);
            Conv {
                w: ps.add(format!("{name}.weight"), w),
                b: ps.add(format!("{name}.bias"), Tensor::zeros(vec![cout])),
                stride,
                up,
            }
        };
        let levels = config.levels();
        let lc = config.latent_channels;
        let w = |l: usize| config.width(l);
        let p = &mut params;
        let mut encoder = vec![conv(p, "enc.in".into(), 1, w(0), 1, false)];
        for l in 0..levels {
            encoder.push(conv(p, format!("enc.level{l}"), w(l), w(l), 1, false));
            encoder.push(conv(p, format!("enc.down{l}"), w(l), w(l + 1), 2, false));
        }
        encoder.push(conv(p, "enc.mid".into(), w(levels), w(levels), 1, false));
        encoder.push(conv(p, "enc.out".into(), w(levels), lc, 1, false));
        let mut decoder = vec![
            conv(p, "dec.in".into(), lc, w(levels), 1, false),
            conv(p, "dec.mid".into(), w(levels), w(levels), 1, false),
        ];
        for l in (0..levels).rev() {
            decoder.push(conv(p, format!("dec.up{l}"), w(l + 1), w(l), 1, true));
            decoder.push(conv(p, format!("dec.level{l}"), w(l), w(l), 1, false));
        }
        decoder.push(conv(p, "dec.out".into(), w(0), 1, 1, false));
        Ok(Autoencoder {
            config,
            params,
            encoder,
            decoder,
            latent_scale: 1.0,
        })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    fn conv(tape: &mut Tape<f32>, pv: &[Var], c: &Conv, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, pv[c.w], c.stride, 1)?;
        tape.add_bias(y, pv[c.b])
    }

    fn encode_var(&self, tape: &mut Tape<f32>, pv: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.encoder.len() - 1;
        for (i, c) in self.encoder.iter().enumerate() {
            h = Self::conv(tape, pv, c, h)?;
            if i != last {
                h = tape.silu(h)?;
            }
        }
        Ok(h)
    }

    fn decode_var(&self, tape: &mut Tape<f32>, pv: &[Var], z: Var) -> Result<Var> {
        let mut h = z;
        let last = self.decoder.len() - 1;
        for (i, c) in self.decoder.iter().enumerate() {
            if c.up {
                h = tape.upsample2x(h)?;
            }
            h = Self::conv(tape, pv, c, h)?;
            if i != last {
                h = tape.silu(h)?;
            }
        }
        Ok(h)
    }

    fn check_map(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let f = self.config.spatial_factor;
        ensure!(c == 1, dim, "autoencoder input must have 1 channel, got {}", c);
        ensure!(h % f == 0 && w % f == 0, contract, "{}x{} map not divisible by factor {}", h, w, f);
        Ok(())
    }

    /// Raw (unscaled) latents.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_map(x)?;
        let mut tape = Tape::new();
        let pv = self.params.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let z = self.encode_var(&mut tape, &pv, xv)?;
        Ok(tape.value(z).clone())
    }

    /// Maps raw latents back to `[N, 1, H, W]`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = z.dims4()?;
        ensure!(
            c == self.config.latent_channels,
            dim,
            "latent has {} channels, autoencoder uses {}",
            c,
            self.config.latent_channels
        );
        let mut tape = Tape::new();
        let pv = self.params.register(&mut tape, false);
        let zv = tape.constant(z.clone());
        let y = self.decode_var(&mut tape, &pv, zv)?;
        Ok(tape.value(y).clone())
    }

    /// Latents multiplied by [`Self::latent_scale`].
    pub fn encode_scaled(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.latent_scale as f32;
        Ok(self.encode(x)?.map(|v| v * s))
    }

    pub fn decode_scaled(&self, z: &Tensor) -> Result<Tensor> {
        let s = self.latent_scale as f32;
        self.decode(&z.map(|v| v / s))
    }

    pub fn round_trip(&self, x: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(x)?)
    }

    /// Reconstruction MSE and parameter gradients for one batch.
    pub fn loss_and_grads(&self, x: &Tensor) -> Result<(f64, Vec<Tensor>)> {
        self.check_map(x)?;
        let mut tape = Tape::new();
        let pv = self.params.register(&mut tape, true);
        let xv = tape.constant(x.clone());
        let z = self.encode_var(&mut tape, &pv, xv)?;
        let y = self.decode_var(&mut tape, &pv, z)?;
        let loss = tape.mse(y, xv)?;
        let loss_val = tape.value(loss).item()? as f64;
        if !loss_val.is_finite() {
            return Err(Error::numeric("autoencoder loss diverged"));
        }
        let mut grads = tape.backward(loss)?;
        let g = pv
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect();
        Ok((loss_val, g))
    }
}

const GRAD_CLIP: f64 = 1.0;

/// Linear warmup over the first 5% of steps, then cosine decay to zero.
fn lr_at(base: f64, step: usize, total: usize) -> f64 {
    let warm = (total / 20).max(1);
    if step < warm {
        return base * (step + 1) as f64 / warm as f64;
    }
    let p = (step - warm) as f64 / (total - warm).max(1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) {
    let sq: f64 = grads.iter().flat_map(|g| g.data()).map(|&v| (v as f64) * (v as f64)).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let k = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
}

/// Trains on `[1, H, W]` maps in `[-1, 1]` with L2 reconstruction, then
/// sets the latent scale so that scaled latents have unit standard deviation
/// over `maps`. Returns the model and the per-step losses.
pub fn train_autoencoder(maps: &[Tensor], cfg: &AutoencoderConfig, seed: u64) -> Result<(Autoencoder, Vec<f64>)> {
    ensure!(!maps.is_empty(), contract, "autoencoder training needs at least one map");
    let mut ae = Autoencoder::build(cfg.clone(), seed)?;
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &ae.params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<Tensor> = (0..cfg.batch_size)
            .map(|_| maps[rng.random_range(0..maps.len())].clone())
            .collect();
        let (loss, mut grads) = ae.loss_and_grads(&Tensor::stack(&batch)?)?;
        clip_global_norm(&mut grads, GRAD_CLIP);
        adam.config.lr = lr_at(cfg.lr, step, cfg.steps);
        adam_step(&mut ae.params, &grads, &mut adam)?;
        losses.push(loss);
    }
    ae.latent_scale = latent_scale_for(&ae, maps)?;
    Ok((ae, losses))
}

/// `1 / std` of raw latents over `maps` (1 if the latents are constant).
pub fn latent_scale_for(ae: &Autoencoder, maps: &[Tensor]) -> Result<f64> {
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut n = 0usize;
    for chunk in maps.chunks(16) {
        let z = ae.encode(&Tensor::stack(chunk)?)?;
        for &v in z.data() {
            sum += v as f64;
            sq += (v as f64) * (v as f64);
        }
        n += z.len();
    }
    let mean = sum / n as f64;
    let var = (sq / n as f64 - mean * mean).max(0.0);
    Ok(if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 })
}

/// Latent super-resolution of `[N, 1, H, W]` coarse maps (model space,
/// `[-1, 1]`) given `[N, 1, H, W]` scaled DEMs. Returns decoded maps in
/// model space.
pub fn latent_pipeline<M: NoisePredictor>(
    ae: Option<&Autoencoder>,
    model: &M,
    sched: &NoiseSchedule,
    cg: &Tensor,
    dem: &Tensor,
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    let ae = ae.ok_or_else(|| Error::config("latent mode requires a trained autoencoder"))?;
    let zc = ae.encode_scaled(cg)?;
    if let StartPoint::Truncated { m: 0 } = cfg.start {
        cfg.validate(sched.timesteps())?;
        return ae.decode_scaled(&zc);
    }
    let zd = ae.encode_scaled(dem)?;
    let cond = Tensor::concat_channels(&[&zc, &zd])?;
    let z0 = sample(model, &cond, &zc, sched, cfg)?;
    ae.decode_scaled(&z0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> AutoencoderConfig {
        AutoencoderConfig {
            base_width: 4,
            ..AutoencoderConfig::default()
        }
    }

    #[test]
    fn shape_contracts() {
        let ae = Autoencoder::build(cfg(), 0).unwrap();
        let x = Tensor::zeros(vec![2, 1, 64, 64]);
        let z = ae.encode(&x).unwrap();
        assert_eq!(z.shape(), &[2, 4, 16, 16]);
        assert_eq!(ae.decode(&z).unwrap().shape(), x.shape());
    }

    #[test]
    fn indivisible_input_rejected() {
        let ae = Autoencoder::build(cfg(), 0).unwrap();
        assert!(matches!(ae.encode(&Tensor::zeros(vec![1, 1, 6, 6])), Err(Error::Contract(_))));
        assert!(matches!(ae.encode(&Tensor::zeros(vec![1, 2, 8, 8])), Err(Error::Dimension(_))));
    }

    #[test]
    fn bad_factor_rejected() {
        let c = AutoencoderConfig {
            spatial_factor: 3,
            ..cfg()
        };
        assert!(Autoencoder::build(c, 0).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = Autoencoder::build(cfg(), 5).unwrap();
        let b = Autoencoder::build(cfg(), 5).unwrap();
        assert_eq!(a.params().tensors(), b.params().tensors());
    }

    #[test]
    fn missing_autoencoder_is_config_error() {
        struct Zero;
        impl NoisePredictor for Zero {
            fn predict_noise(&self, x: &Tensor, _: &Tensor, _: &[usize]) -> Result<Tensor> {
                Ok(Tensor::zeros(x.shape().to_vec()))
            }
        }
        let sched = NoiseSchedule::new(Default::default()).unwrap();
        let x = Tensor::zeros(vec![1, 1, 8, 8]);
        let r = latent_pipeline(None, &Zero, &sched, &x, &x, &SamplerConfig::truncated(0, 0, 0));
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
