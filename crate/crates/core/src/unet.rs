//! Conditional U-Net noise predictor.
//!
//! The noisy target and the conditioning maps (upsampled coarse-grid depth and
//! DEM, or their latents) are concatenated along channels. Each resolution
//! level holds two residual blocks with timestep-embedding injection and
//! optional self-attention; levels are joined by stride-2 convolutions on the
//! way down and nearest-upsample + convolution on the way up.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoisePredictor;
use crate::error::{ensure, Error, Result};
use crate::numerics::{ParamStore, Scalar, Tape, Tensor, Var};

/// Residual blocks per resolution level, encoder and decoder alike.
pub const RES_BLOCKS_PER_LEVEL: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnetConfig {
    /// Total input channels: target channels plus conditioning channels.
    pub in_channels: usize,
    /// Predicted noise channels (1 in pixel mode, latent channels otherwise).
    pub out_channels: usize,
    pub base_width: usize,
    /// Number of resolution levels.
    pub depth: usize,
    pub attn_levels: Vec<usize>,
    pub time_embed_dim: usize,
    /// Group-normalization group count.
    #[serde(default = "default_groups")]
    pub norm_groups: usize,
}

fn default_groups() -> usize {
    8
}

impl Default for UnetConfig {
    fn default() -> Self {
        UnetConfig {
            in_channels: 3,
            out_channels: 1,
            base_width: 32,
            depth: 4,
            attn_levels: vec![2, 3],
            time_embed_dim: 128,
            norm_groups: 8,
        }
    }
}

impl UnetConfig {
    /// Channel width at resolution level `l`.
    pub fn width(&self, level: usize) -> usize {
        self.base_width * (1usize << level.min(2))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.depth >= 2, config, "unet depth must be >= 2, got {}", self.depth);
        ensure!(self.base_width >= 8, config, "unet base_width must be >= 8, got {}", self.base_width);
        ensure!(self.in_channels > self.out_channels, config, "in_channels must exceed out_channels (target + conditioning)");
        ensure!(self.out_channels >= 1, config, "out_channels must be >= 1");
        ensure!(
            self.norm_groups >= 1 && self.base_width % self.norm_groups == 0,
            config,
            "base_width {} not divisible by {} norm groups",
            self.base_width,
            self.norm_groups
        );
        ensure!(
            self.time_embed_dim >= 2 && self.time_embed_dim % 2 == 0,
            config,
            "time_embed_dim must be even"
        );
        ensure!(
            self.attn_levels.iter().all(|&l| l < self.depth),
            config,
            "attention level out of range for depth {}",
            self.depth
        );
        Ok(())
    }

    /// Required divisor of the input's spatial size.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }
}

/// Sinusoidal embedding `[sin(t·ω_k)…, cos(t·ω_k)…]`, `ω_k = 10000^(−2k/dim)`.
pub fn timestep_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    ensure!(dim % 2 == 0 && dim > 0, contract, "timestep embedding dim must be even, got {}", dim);
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half).map(|k| 10000f64.powf(-2.0 * k as f64 / dim as f64)).collect();
    let mut out = Vec::with_capacity(dim);
    out.extend(freqs.iter().map(|w| (t * w).sin()));
    out.extend(freqs.iter().map(|w| (t * w).cos()));
    Ok(out)
}

#[derive(Clone, Debug)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
    groups: usize,
}

#[derive(Clone, Debug)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    temb: Dense,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Clone, Debug)]
struct AttnBlock {
    norm: Norm,
    q: Conv,
    k: Conv,
    v: Conv,
    proj: Conv,
}

#[derive(Clone, Debug)]
struct Stage {
    blocks: Vec<(ResBlock, Option<AttnBlock>)>,
    /// Downsample (encoder) or upsample (decoder) convolution.
    resample: Option<Conv>,
}

#[derive(Clone, Debug)]
struct Layout {
    time1: Dense,
    time2: Dense,
    input: Conv,
    down: Vec<Stage>,
    mid: (ResBlock, Option<AttnBlock>, ResBlock),
    up: Vec<Stage>,
    out_norm: Norm,
    out_conv: Conv,
}

struct Builder<'a, T: Scalar> {
    ps: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    groups: usize,
}

impl<T: Scalar> Builder<'_, T> {
    fn normal(&mut self, shape: Vec<usize>, std: f64) -> Tensor<T> {
        Tensor::<T>::randn(shape, &mut self.rng).map(|x| x * T::from_f64_lossy(std))
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, zero: bool) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let w = if zero {
            Tensor::zeros(vec![cout, cin, k, k])
        } else {
            self.normal(vec![cout, cin, k, k], (1.0 / fan_in).sqrt())
        };
        Conv {
            w: self.ps.add(format!("{name}.weight"), w),
            b: self.ps.add(format!("{name}.bias"), Tensor::zeros(vec![cout])),
            stride,
            pad: k / 2,
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gamma: self.ps.add(format!("{name}.gamma"), Tensor::full(vec![c], T::one())),
            beta: self.ps.add(format!("{name}.beta"), Tensor::zeros(vec![c])),
            groups: self.groups.min(c),
        }
    }

    fn dense(&mut self, name: &str, fin: usize, fout: usize) -> Dense {
        let w = self.normal(vec![fout, fin], (1.0 / fin as f64).sqrt());
        Dense {
            w: self.ps.add(format!("{name}.weight"), w),
            b: self.ps.add(format!("{name}.bias"), Tensor::zeros(vec![fout])),
        }
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, temb: usize) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, 1, false),
            temb: self.dense(&format!("{name}.temb"), temb, cout),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, 1, true),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, 1, false)),
        }
    }

    fn attn(&mut self, name: &str, c: usize) -> AttnBlock {
        AttnBlock {
            norm: self.norm(&format!("{name}.norm"), c),
            q: self.conv(&format!("{name}.q"), c, c, 1, 1, false),
            k: self.conv(&format!("{name}.k"), c, c, 1, 1, false),
            v: self.conv(&format!("{name}.v"), c, c, 1, 1, false),
            proj: self.conv(&format!("{name}.proj"), c, c, 1, 1, true),
        }
    }
}

/// Conditional U-Net with its parameters.
#[derive(Clone, Debug)]
pub struct Unet<T: Scalar = f32> {
    config: UnetConfig,
    params: ParamStore<T>,
    layout: Layout,
}

/// Loss value plus gradients from [`Unet::loss_and_grads`].
#[derive(Debug)]
pub struct LossGrads<T: Scalar> {
    pub loss: f64,
    pub param_grads: Vec<Tensor<T>>,
    /// Gradient with respect to the conditioning tensor, when requested.
    pub cond_grad: Option<Tensor<T>>,
}

struct Ctx<'a, T: Scalar> {
    tape: &'a mut Tape<T>,
    pv: &'a [Var],
}

impl<T: Scalar> Ctx<'_, T> {
    fn conv(&mut self, c: &Conv, x: Var) -> Result<Var> {
        let y = self.tape.conv2d(x, self.pv[c.w], c.stride, c.pad)?;
        self.tape.add_bias(y, self.pv[c.b])
    }

    fn norm(&mut self, n: &Norm, x: Var) -> Result<Var> {
        self.tape.group_norm(x, self.pv[n.gamma], self.pv[n.beta], n.groups)
    }

    fn dense(&mut self, d: &Dense, x: Var) -> Result<Var> {
        self.tape.linear(x, self.pv[d.w], self.pv[d.b])
    }

    fn res(&mut self, r: &ResBlock, x: Var, temb: Var) -> Result<Var> {
        let h = self.norm(&r.norm1, x)?;
        let h = self.tape.silu(h)?;
        let h = self.conv(&r.conv1, h)?;
        let t = self.dense(&r.temb, temb)?;
        let h = self.tape.add_channel(h, t)?;
        let h = self.norm(&r.norm2, h)?;
        let h = self.tape.silu(h)?;
        let h = self.conv(&r.conv2, h)?;
        let skip = match &r.skip {
            Some(s) => self.conv(s, x)?,
            None => x,
        };
        self.tape.add(skip, h)
    }

    fn attn(&mut self, a: &AttnBlock, x: Var) -> Result<Var> {
        let h = self.norm(&a.norm, x)?;
        let q = self.conv(&a.q, h)?;
        let k = self.conv(&a.k, h)?;
        let v = self.conv(&a.v, h)?;
        let o = self.tape.attention(q, k, v)?;
        let o = self.conv(&a.proj, o)?;
        self.tape.add(x, o)
    }

    fn block(&mut self, (r, a): &(ResBlock, Option<AttnBlock>), x: Var, temb: Var) -> Result<Var> {
        let h = self.res(r, x, temb)?;
        match a {
            Some(a) => self.attn(a, h),
            None => Ok(h),
        }
    }
}

impl<T: Scalar> Unet<T> {
    /// Build a freshly initialized network; identical seeds give identical weights.
    pub fn build(config: UnetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new();
        let mut b = Builder {
            ps: &mut ps,
            rng: ChaCha8Rng::seed_from_u64(seed),
            groups: config.norm_groups,
        };
        let td = config.time_embed_dim;
        let time1 = b.dense("time.fc1", td, td);
        let time2 = b.dense("time.fc2", td, td);
        let input = b.conv("input", config.in_channels, config.width(0), 3, 1, false);
        let attn_at = |l: usize| config.attn_levels.contains(&l);

        let mut down = Vec::new();
        let mut cur = config.width(0);
        for l in 0..config.depth {
            let w = config.width(l);
            let mut blocks = Vec::new();
            for i in 0..RES_BLOCKS_PER_LEVEL {
                let rb = b.res(&format!("down{l}.res{i}"), cur, w, td);
                let at = attn_at(l).then(|| b.attn(&format!("down{l}.attn{i}"), w));
                blocks.push((rb, at));
                cur = w;
            }
            let resample = (l + 1 < config.depth).then(|| b.conv(&format!("down{l}.down"), w, w, 3, 2, false));
            down.push(Stage { blocks, resample });
        }

        let deepest = config.depth - 1;
        let mid = (
            b.res("mid.res0", cur, cur, td),
            attn_at(deepest).then(|| b.attn("mid.attn", cur)),
            b.res("mid.res1", cur, cur, td),
        );

        let mut up = Vec::new();
        for l in (0..config.depth).rev() {
            let w = config.width(l);
            let mut blocks = Vec::new();
            for i in 0..RES_BLOCKS_PER_LEVEL {
                let cin = if i == 0 { cur + w } else { w };
                let rb = b.res(&format!("up{l}.res{i}"), cin, w, td);
                let at = attn_at(l).then(|| b.attn(&format!("up{l}.attn{i}"), w));
                blocks.push((rb, at));
            }
            cur = w;
            let resample = (l > 0).then(|| {
                let next = config.width(l - 1);
                cur = next;
                b.conv(&format!("up{l}.up"), w, next, 3, 1, false)
            });
            up.push(Stage { blocks, resample });
        }

        let out_norm = b.norm("out.norm", cur);
        let out_conv = b.conv("out.conv", cur, config.out_channels, 3, 1, true);
        let layout = Layout {
            time1,
            time2,
            input,
            down,
            mid,
            up,
            out_norm,
            out_conv,
        };
        Ok(Unet {
            config,
            params: ps,
            layout,
        })
    }

    pub fn config(&self) -> &UnetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Same network in another precision.
    pub fn cast<U: Scalar>(&self) -> Unet<U> {
        Unet {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    fn check_inputs(&self, x_t: &Tensor<T>, cond: &Tensor<T>, t: &[usize]) -> Result<()> {
        let (n, c, h, w) = x_t.dims4()?;
        let (cn, cc, ch, cw) = cond.dims4()?;
        ensure!(
            n == cn && h == ch && w == cw,
            dim,
            "x_t {:?} and cond {:?} are not aligned",
            x_t.shape(),
            cond.shape()
        );
        ensure!(
            c == self.config.out_channels,
            dim,
            "x_t has {} channels, model predicts {}",
            c,
            self.config.out_channels
        );
        ensure!(
            c + cc == self.config.in_channels,
            dim,
            "{} + {} input channels, model expects {}",
            c,
            cc,
            self.config.in_channels
        );
        let m = self.config.spatial_multiple();
        ensure!(h % m == 0 && w % m == 0, dim, "spatial size {}x{} not divisible by {}", h, w, m);
        ensure!(t.len() == n, dim, "{} timesteps for batch of {}", t.len(), n);
        Ok(())
    }

    /// Record the network on `tape`; `x` already holds `[x_t, cond]`.
    pub fn forward(&self, tape: &mut Tape<T>, pv: &[Var], x: Var, t: &[usize]) -> Result<Var> {
        let lay = &self.layout;
        let td = self.config.time_embed_dim;
        let mut emb = Vec::with_capacity(t.len() * td);
        for &ti in t {
            emb.extend(timestep_embedding(ti as f64, td)?.into_iter().map(T::from_f64_lossy));
        }
        let emb = tape.constant(Tensor::new(vec![t.len(), td], emb)?);
        let mut cx = Ctx { tape, pv };
        let e = cx.dense(&lay.time1, emb)?;
        let e = cx.tape.silu(e)?;
        let e = cx.dense(&lay.time2, e)?;
        let temb = cx.tape.silu(e)?;

        let mut h = cx.conv(&lay.input, x)?;
        let mut skips = Vec::with_capacity(lay.down.len());
        for stage in &lay.down {
            for blk in &stage.blocks {
                h = cx.block(blk, h, temb)?;
            }
            skips.push(h);
            if let Some(d) = &stage.resample {
                h = cx.conv(d, h)?;
            }
        }
        let (m0, ma, m1) = &lay.mid;
        h = cx.res(m0, h, temb)?;
        if let Some(a) = ma {
            h = cx.attn(a, h)?;
        }
        h = cx.res(m1, h, temb)?;
        for stage in &lay.up {
            let skip = skips.pop().expect("one skip per level");
            h = cx.tape.concat_channels(&[h, skip])?;
            for blk in &stage.blocks {
                h = cx.block(blk, h, temb)?;
            }
            if let Some(u) = &stage.resample {
                h = cx.tape.upsample2x(h)?;
                h = cx.conv(u, h)?;
            }
        }
        let h = cx.norm(&lay.out_norm, h)?;
        let h = cx.tape.silu(h)?;
        cx.conv(&lay.out_conv, h)
    }

    /// Predicted noise for `x_t` given conditioning and per-image timesteps.
    pub fn predict(&self, x_t: &Tensor<T>, cond: &Tensor<T>, t: &[usize]) -> Result<Tensor<T>> {
        self.check_inputs(x_t, cond, t)?;
        let mut tape = Tape::new();
        let pv = self.params.register(&mut tape, false);
        let input = tape.constant(Tensor::concat_channels(&[x_t, cond])?);
        let out = self.forward(&mut tape, &pv, input, t)?;
        Ok(tape.value(out).clone())
    }

    /// Mean squared error between the prediction and `target`, with gradients.
    pub fn loss_and_grads(
        &self,
        x_t: &Tensor<T>,
        cond: &Tensor<T>,
        t: &[usize],
        target: &Tensor<T>,
        want_cond_grad: bool,
    ) -> Result<LossGrads<T>> {
        self.check_inputs(x_t, cond, t)?;
        ensure!(target.shape() == x_t.shape(), dim, "target {:?} vs x_t {:?}", target.shape(), x_t.shape());
        let mut tape = Tape::new();
        let pv = self.params.register(&mut tape, true);
        let xv = tape.constant(x_t.clone());
        let cv = tape.leaf(cond.clone().with_requires_grad(want_cond_grad));
        let input = tape.concat_channels(&[xv, cv])?;
        let out = self.forward(&mut tape, &pv, input, t)?;
        let tv = tape.constant(target.clone());
        let loss = tape.mse(out, tv)?;
        let loss_val = tape.value(loss).item()?.as_f64();
        if !loss_val.is_finite() {
            return Err(Error::numeric("non-finite training loss"));
        }
        let mut grads = tape.backward(loss)?;
        let param_grads = pv
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect();
        let cond_grad = if want_cond_grad {
            Some(grads.take(cv).unwrap_or_else(|| Tensor::zeros(cond.shape().to_vec())))
        } else {
            None
        };
        Ok(LossGrads {
            loss: loss_val,
            param_grads,
            cond_grad,
        })
    }

    /// Names of parameters belonging to the decoder path (upsampling stages and output head).
    pub fn decoder_param_indices(&self) -> Vec<usize> {
        self.params
            .names()
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with("up") || n.starts_with("out."))
            .map(|(i, _)| i)
            .collect()
    }
}

impl NoisePredictor for Unet<f32> {
    fn predict_noise(&self, x_t: &Tensor<f32>, cond: &Tensor<f32>, t: &[usize]) -> Result<Tensor<f32>> {
        self.predict(x_t, cond, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> UnetConfig {
        UnetConfig {
            in_channels: 3,
            out_channels: 1,
            base_width: 8,
            depth: 2,
            attn_levels: vec![1],
            time_embed_dim: 16,
            norm_groups: 4,
        }
    }

    #[test]
    fn embedding_zero_phase_and_formula() {
        let e = timestep_embedding(0.0, 8).unwrap();
        assert!(e[..4].iter().all(|&v| v == 0.0));
        assert!(e[4..].iter().all(|&v| v == 1.0));
        let e = timestep_embedding(1.0, 4).unwrap();
        let want = [1f64.sin(), 0.01f64.sin(), 1f64.cos(), 0.01f64.cos()];
        for (a, b) in e.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(timestep_embedding(123.0, 32).unwrap().len(), 32);
        assert!(matches!(timestep_embedding(1.0, 5), Err(Error::Contract(_))));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Unet::<f32>::build(small(), 3).unwrap();
        let b = Unet::<f32>::build(small(), 3).unwrap();
        let c = Unet::<f32>::build(small(), 4).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn zero_input_forward_is_finite_and_shape_preserving() {
        let net = Unet::<f32>::build(small(), 0).unwrap();
        let x = Tensor::zeros(vec![2, 1, 8, 8]);
        let cond = Tensor::zeros(vec![2, 2, 8, 8]);
        let y = net.predict(&x, &cond, &[1, 50]).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.all_finite());
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let net = Unet::<f32>::build(small(), 0).unwrap();
        let x = Tensor::zeros(vec![1, 1, 8, 8]);
        let cond = Tensor::zeros(vec![1, 3, 8, 8]);
        assert!(matches!(net.predict(&x, &cond, &[1]), Err(Error::Dimension(_))));
        let cond = Tensor::zeros(vec![1, 2, 5, 5]);
        let x = Tensor::zeros(vec![1, 1, 5, 5]);
        assert!(matches!(net.predict(&x, &cond, &[1]), Err(Error::Dimension(_))));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = small();
        c.depth = 1;
        assert!(Unet::<f32>::build(c, 0).is_err());
        let mut c = small();
        c.base_width = 4;
        assert!(Unet::<f32>::build(c, 0).is_err());
        let mut c = small();
        c.attn_levels = vec![5];
        assert!(Unet::<f32>::build(c, 0).is_err());
    }
}
