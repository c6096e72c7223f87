//! Diffusion mathematics: noise schedules, the closed-form forward marginal,
//! the noise-prediction training objective and ancestral reverse sampling,
//! including strided timestep subsets and truncated starts from a noised
//! coarse-grid map.
//!
//! Notation follows the usual variance-increment form: `alpha_t` is the
//! variance added at step `t` and `gamma_t = Π_{s≤t} (1 − alpha_s)` the
//! cumulative signal retention, with `gamma_0 = 1`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::Tensor;

/// Anything that predicts the noise component of `x_t`.
pub trait NoisePredictor: Sync {
    /// `x_t [N,C,H,W]`, `cond [N,Cc,H,W]`, one timestep per image.
    fn predict_noise(&self, x_t: &Tensor<f32>, cond: &Tensor<f32>, t: &[usize]) -> Result<Tensor<f32>>;
}

impl<M: NoisePredictor + ?Sized> NoisePredictor for &M {
    fn predict_noise(&self, x_t: &Tensor<f32>, cond: &Tensor<f32>, t: &[usize]) -> Result<Tensor<f32>> {
        (**self).predict_noise(x_t, cond, t)
    }
}

/// Parameters of a linear variance schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub timesteps: usize,
    pub alpha_start: f64,
    pub alpha_end: f64,
}

impl ScheduleParams {
    /// Standard 1000-step endpoints.
    pub const REFERENCE_STEPS: usize = 1000;
    pub const REFERENCE_START: f64 = 1e-4;
    pub const REFERENCE_END: f64 = 0.02;

    /// Endpoints rescaled by `1000 / timesteps` so that `gamma_T` stays close to
    /// the 1000-step reference schedule.
    pub fn rescaled(timesteps: usize) -> Self {
        let k = Self::REFERENCE_STEPS as f64 / timesteps.max(1) as f64;
        ScheduleParams {
            timesteps,
            alpha_start: Self::REFERENCE_START * k,
            alpha_end: Self::REFERENCE_END * k,
        }
    }
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self::rescaled(200)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    /// `alpha[t]` for `t = 1..=T`; `alpha[0]` is unused and zero.
    alpha: Vec<f64>,
    /// `gamma[t]` for `t = 0..=T`.
    gamma: Vec<f64>,
}

/// Linear schedule from `alpha_start` (t=1) to `alpha_end` (t=T).
pub fn linear_schedule(timesteps: usize, alpha_start: f64, alpha_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::new(ScheduleParams {
        timesteps,
        alpha_start,
        alpha_end,
    })
}

impl NoiseSchedule {
    pub fn new(params: ScheduleParams) -> Result<Self> {
        let ScheduleParams {
            timesteps,
            alpha_start,
            alpha_end,
        } = params;
        ensure!(timesteps >= 1, contract, "schedule needs at least one timestep");
        ensure!(
            0.0 < alpha_start && alpha_start <= alpha_end && alpha_end < 1.0,
            contract,
            "schedule endpoints must satisfy 0 < start <= end < 1, got {} and {}",
            alpha_start,
            alpha_end
        );
        let mut alpha = vec![0.0; timesteps + 1];
        let mut gamma = vec![1.0; timesteps + 1];
        for t in 1..=timesteps {
            alpha[t] = if timesteps == 1 {
                alpha_start
            } else {
                alpha_start + (alpha_end - alpha_start) * (t - 1) as f64 / (timesteps - 1) as f64
            };
            gamma[t] = gamma[t - 1] * (1.0 - alpha[t]);
        }
        Ok(NoiseSchedule { params, alpha, gamma })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn timesteps(&self) -> usize {
        self.params.timesteps
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma[t]
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gamma
    }

    fn check_t(&self, t: usize) -> Result<()> {
        ensure!(
            (1..=self.timesteps()).contains(&t),
            contract,
            "timestep {} outside 1..={}",
            t,
            self.timesteps()
        );
        Ok(())
    }
}

/// `sqrt(gamma_t)·x0 + sqrt(1 − gamma_t)·eps`.
pub fn q_sample(x0: &Tensor<f32>, t: usize, eps: &Tensor<f32>, sched: &NoiseSchedule) -> Result<Tensor<f32>> {
    sched.check_t(t)?;
    let g = sched.gamma(t);
    let (a, b) = (g.sqrt(), (1.0 - g).sqrt());
    x0.zip_map(eps, |x, e| (a * x as f64 + b * e as f64) as f32)
}

/// [`q_sample`] with a separate timestep for each image of the batch.
pub fn q_sample_batch(x0: &Tensor<f32>, t: &[usize], eps: &Tensor<f32>, sched: &NoiseSchedule) -> Result<Tensor<f32>> {
    ensure!(x0.shape() == eps.shape(), dim, "x0 {:?} vs eps {:?}", x0.shape(), eps.shape());
    ensure!(!x0.shape().is_empty() && x0.shape()[0] == t.len(), dim, "{} timesteps for shape {:?}", t.len(), x0.shape());
    let per = x0.len() / t.len().max(1);
    let mut out = x0.clone();
    for (b, &tb) in t.iter().enumerate() {
        sched.check_t(tb)?;
        let g = sched.gamma(tb);
        let (a, s) = (g.sqrt(), (1.0 - g).sqrt());
        let range = b * per..(b + 1) * per;
        for (o, &e) in out.data_mut()[range.clone()].iter_mut().zip(&eps.data()[range]) {
            *o = (a * *o as f64 + s * e as f64) as f32;
        }
    }
    Ok(out)
}

/// Noised training input: per-image timesteps, the noise drawn and `x_t`.
#[derive(Clone, Debug)]
pub struct TrainingDraw {
    pub t: Vec<usize>,
    pub eps: Tensor<f32>,
    pub x_t: Tensor<f32>,
}

/// Draw `t ~ U{1..T}` per image and `eps ~ N(0, I)`, then form `x_t`.
pub fn draw_training_inputs<R: Rng + ?Sized>(x0: &Tensor<f32>, sched: &NoiseSchedule, rng: &mut R) -> Result<TrainingDraw> {
    let n = *x0.shape().first().unwrap_or(&0);
    ensure!(n > 0, dim, "empty training batch");
    let t: Vec<usize> = (0..n).map(|_| rng.random_range(1..=sched.timesteps())).collect();
    let eps = Tensor::randn(x0.shape().to_vec(), rng);
    let x_t = q_sample_batch(x0, &t, &eps, sched)?;
    Ok(TrainingDraw { t, eps, x_t })
}

/// Noise-prediction objective: `mean((model(x_t, cond, t) − eps)²)`.
pub fn training_loss<M: NoisePredictor, R: Rng + ?Sized>(
    model: &M,
    fine: &Tensor<f32>,
    cond: &Tensor<f32>,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    let (n, _, h, w) = fine.dims4()?;
    let (cn, _, ch, cw) = cond.dims4()?;
    ensure!(n == cn && h == ch && w == cw, dim, "fine {:?} and cond {:?} not aligned", fine.shape(), cond.shape());
    let draw = draw_training_inputs(fine, sched, rng)?;
    let pred = model.predict_noise(&draw.x_t, cond, &draw.t)?;
    ensure!(pred.shape() == draw.eps.shape(), dim, "prediction {:?} vs noise {:?}", pred.shape(), draw.eps.shape());
    let loss = pred
        .data()
        .iter()
        .zip(draw.eps.data())
        .map(|(&p, &e)| {
            let d = p as f64 - e as f64;
            d * d
        })
        .sum::<f64>()
        / pred.len() as f64;
    if !loss.is_finite() {
        return Err(crate::Error::numeric("non-finite training loss"));
    }
    Ok(loss)
}

/// Coefficients of one reverse transition from `t` to `prev < t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepCoefficients {
    /// Effective variance increment `1 − gamma_t / gamma_prev`.
    pub alpha: f64,
    pub gamma_t: f64,
    pub gamma_prev: f64,
    /// Posterior standard deviation; zero when stepping to `prev = 0`.
    pub sigma: f64,
}

impl StepCoefficients {
    pub fn new(sched: &NoiseSchedule, t: usize, prev: usize) -> Result<Self> {
        sched.check_t(t)?;
        ensure!(prev < t, contract, "reverse step must decrease t ({} -> {})", t, prev);
        let gamma_t = sched.gamma(t);
        let gamma_prev = sched.gamma(prev);
        let alpha = 1.0 - gamma_t / gamma_prev;
        let sigma = if prev == 0 {
            0.0
        } else {
            (alpha * (1.0 - gamma_prev) / (1.0 - gamma_t)).sqrt()
        };
        Ok(StepCoefficients {
            alpha,
            gamma_t,
            gamma_prev,
            sigma,
        })
    }

    /// Posterior mean `(x_t − alpha/sqrt(1−gamma_t)·eps_hat) / sqrt(1 − alpha)`.
    pub fn mean(&self, x_t: f64, eps_hat: f64) -> f64 {
        (x_t - self.alpha / (1.0 - self.gamma_t).sqrt() * eps_hat) / (1.0 - self.alpha).sqrt()
    }
}

fn reverse_step<M: NoisePredictor, R: Rng + ?Sized>(
    model: &M,
    x_t: &Tensor<f32>,
    t: usize,
    prev: usize,
    cond: &Tensor<f32>,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    let co = StepCoefficients::new(sched, t, prev)?;
    let n = x_t.shape().first().copied().unwrap_or(0);
    let eps_hat = model.predict_noise(x_t, cond, &vec![t; n])?;
    ensure!(eps_hat.shape() == x_t.shape(), dim, "model output {:?} vs x_t {:?}", eps_hat.shape(), x_t.shape());
    let mut out = x_t.zip_map(&eps_hat, |x, e| co.mean(x as f64, e as f64) as f32)?;
    if co.sigma > 0.0 {
        let z = Tensor::<f32>::randn(x_t.shape().to_vec(), rng);
        for (o, &zz) in out.data_mut().iter_mut().zip(z.data()) {
            *o = (*o as f64 + co.sigma * zz as f64) as f32;
        }
    }
    out.check_finite("reverse diffusion step")?;
    Ok(out)
}

/// One ancestral step of the full schedule, `t → t−1`. No noise is injected at `t = 1`.
pub fn p_sample_step<M: NoisePredictor, R: Rng + ?Sized>(
    model: &M,
    x_t: &Tensor<f32>,
    t: usize,
    cond: &Tensor<f32>,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    sched.check_t(t)?;
    reverse_step(model, x_t, t, t - 1, cond, sched, rng)
}

/// Starting point `x_m` built by noising the (upsampled, normalized) coarse map.
pub fn truncated_start<R: Rng + ?Sized>(cg: &Tensor<f32>, m: usize, sched: &NoiseSchedule, rng: &mut R) -> Result<Tensor<f32>> {
    ensure!(m <= sched.timesteps(), contract, "truncation point {} beyond T = {}", m, sched.timesteps());
    if m == 0 {
        return Ok(cg.clone());
    }
    let eps = Tensor::randn(cg.shape().to_vec(), rng);
    q_sample(cg, m, &eps, sched)
}

/// `infer_steps` timesteps evenly spaced from `m` down to 1, both included.
pub fn strided_schedule(timesteps: usize, infer_steps: usize, m: usize) -> Result<Vec<usize>> {
    ensure!(
        1 <= infer_steps && infer_steps <= m && m <= timesteps,
        contract,
        "strided schedule needs 1 <= steps ({}) <= m ({}) <= T ({})",
        infer_steps,
        m,
        timesteps
    );
    if infer_steps == 1 {
        return Ok(vec![m]);
    }
    let span = m - 1;
    let div = infer_steps - 1;
    Ok((0..infer_steps)
        // m − round(i·span/div), rounding half up in integer arithmetic
        .map(|i| m - (2 * i * span + div) / (2 * div))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StartPoint {
    /// Standard normal noise at `t = T`.
    RandomNoise,
    /// Noised coarse-grid map at `t = m`.
    Truncated { m: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub start: StartPoint,
    pub infer_steps: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn full(timesteps: usize, seed: u64) -> Self {
        SamplerConfig {
            start: StartPoint::RandomNoise,
            infer_steps: timesteps,
            seed,
        }
    }

    pub fn truncated(m: usize, infer_steps: usize, seed: u64) -> Self {
        SamplerConfig {
            start: StartPoint::Truncated { m },
            infer_steps,
            seed,
        }
    }

    /// Timestep at which sampling starts.
    pub fn start_t(&self, timesteps: usize) -> usize {
        match self.start {
            StartPoint::RandomNoise => timesteps,
            StartPoint::Truncated { m } => m,
        }
    }

    pub fn validate(&self, timesteps: usize) -> Result<()> {
        let m = self.start_t(timesteps);
        ensure!(m <= timesteps, contract, "start {} beyond T = {}", m, timesteps);
        if m == 0 {
            ensure!(self.infer_steps == 0, contract, "m = 0 admits no denoising steps, got {}", self.infer_steps);
        } else {
            ensure!(
                1 <= self.infer_steps && self.infer_steps <= m,
                contract,
                "infer_steps must lie in 1..={}, got {}",
                m,
                self.infer_steps
            );
        }
        Ok(())
    }

    /// Timesteps visited by the sampler, in order.
    pub fn timesteps(&self, timesteps: usize) -> Result<Vec<usize>> {
        self.validate(timesteps)?;
        let m = self.start_t(timesteps);
        if m == 0 {
            return Ok(Vec::new());
        }
        strided_schedule(timesteps, self.infer_steps, m)
    }
}

/// Reverse diffusion from the configured start to an estimate of `x0`.
///
/// `cg` is the coarse-grid map in model space, shaped like the output; it is
/// only read for truncated starts. The result is in model space; callers
/// denormalize it.
pub fn sample<M: NoisePredictor>(
    model: &M,
    cond: &Tensor<f32>,
    cg: &Tensor<f32>,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Tensor<f32>> {
    let steps = cfg.timesteps(sched.timesteps())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = match cfg.start {
        StartPoint::RandomNoise => Tensor::randn(cg.shape().to_vec(), &mut rng),
        StartPoint::Truncated { m } => truncated_start(cg, m, sched, &mut rng)?,
    };
    for (i, &t) in steps.iter().enumerate() {
        let prev = steps.get(i + 1).copied().unwrap_or(0);
        x = reverse_step(model, &x, t, prev, cond, sched, &mut rng)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Zero;
    impl NoisePredictor for Zero {
        fn predict_noise(&self, x_t: &Tensor<f32>, _: &Tensor<f32>, _: &[usize]) -> Result<Tensor<f32>> {
            Ok(Tensor::zeros(x_t.shape().to_vec()))
        }
    }

    #[test]
    fn single_step_schedule() {
        let s = linear_schedule(1, 0.01, 0.02).unwrap();
        assert_eq!(s.gamma(1), 1.0 - 0.01);
        assert_eq!(s.gamma(0), 1.0);
    }

    #[test]
    fn schedule_bounds_enforced() {
        assert!(linear_schedule(0, 0.01, 0.02).is_err());
        assert!(linear_schedule(10, 0.0, 0.02).is_err());
        assert!(linear_schedule(10, 0.03, 0.02).is_err());
        assert!(linear_schedule(10, 0.01, 1.0).is_err());
    }

    #[test]
    fn gamma_strictly_decreasing_and_alpha_in_range() {
        let s = NoiseSchedule::new(ScheduleParams::rescaled(200)).unwrap();
        for t in 1..=200 {
            assert!(s.alpha(t) > 0.0 && s.alpha(t) < 1.0);
            assert!(s.gamma(t) < s.gamma(t - 1));
        }
    }

    #[test]
    fn q_sample_zero_noise_and_tail() {
        let s = linear_schedule(1000, 1e-4, 0.02).unwrap();
        let x0 = Tensor::from_fn(vec![1, 1, 2, 2], |i| i as f32 * 0.25);
        let zero = Tensor::zeros(vec![1, 1, 2, 2]);
        let out = q_sample(&x0, 300, &zero, &s).unwrap();
        let g = s.gamma(300).sqrt();
        for (o, x) in out.data().iter().zip(x0.data()) {
            assert!((*o as f64 - g * *x as f64).abs() < 1e-6);
        }
        let eps = Tensor::full(vec![1, 1, 2, 2], 0.7f32);
        let tail = q_sample(&x0, 1000, &eps, &s).unwrap();
        for o in tail.data() {
            assert!((o - 0.7).abs() < 0.01);
        }
        assert!(q_sample(&x0, 0, &eps, &s).is_err());
        assert!(q_sample(&x0, 5, &Tensor::zeros(vec![1, 1, 2, 3]), &s).is_err());
    }

    #[test]
    fn strided_examples() {
        assert_eq!(strided_schedule(10, 5, 5).unwrap(), vec![5, 4, 3, 2, 1]);
        assert_eq!(strided_schedule(10, 1, 7).unwrap(), vec![7]);
        let s = strided_schedule(1000, 50, 1000).unwrap();
        assert_eq!(s.len(), 50);
        assert_eq!((s[0], s[49]), (1000, 1));
        let gaps: Vec<usize> = s.windows(2).map(|w| w[0] - w[1]).collect();
        let (lo, hi) = (gaps.iter().min().unwrap(), gaps.iter().max().unwrap());
        assert!(hi - lo <= 1);
        assert!(matches!(strided_schedule(100, 20, 10), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn last_step_is_deterministic() {
        let s = NoiseSchedule::new(ScheduleParams::rescaled(50)).unwrap();
        let x = Tensor::full(vec![1, 1, 2, 2], 0.3f32);
        let c = Tensor::zeros(vec![1, 1, 2, 2]);
        let a = p_sample_step(&Zero, &x, 1, &c, &s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = p_sample_step(&Zero, &x, 1, &c, &s, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        let a = p_sample_step(&Zero, &x, 7, &c, &s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = p_sample_step(&Zero, &x, 7, &c, &s, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(a, b);
        assert_eq!(a.shape(), x.shape());
        assert!(p_sample_step(&Zero, &x, 51, &c, &s, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn m_zero_passthrough() {
        let s = NoiseSchedule::new(ScheduleParams::rescaled(50)).unwrap();
        let cg = Tensor::from_fn(vec![1, 1, 2, 2], |i| i as f32);
        let c = Tensor::zeros(vec![1, 1, 2, 2]);
        let out = sample(&Zero, &c, &cg, &s, &SamplerConfig::truncated(0, 0, 9)).unwrap();
        assert_eq!(out, cg);
        assert!(sample(&Zero, &c, &cg, &s, &SamplerConfig::truncated(0, 3, 9)).is_err());
        assert!(sample(&Zero, &c, &cg, &s, &SamplerConfig::truncated(10, 11, 9)).is_err());
    }
}
