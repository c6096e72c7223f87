use std::sync::OnceLock;

use floodsr::diffusion::{sample, NoisePredictor, NoiseSchedule, SamplerConfig, ScheduleParams};
use floodsr::latent::{latent_pipeline, train_autoencoder, Autoencoder, AutoencoderConfig};
use floodsr::numerics::Tensor;
use floodsr::terrain::{build_dataset, DatasetConfig, DepthRange, Split, TerrainParams};
use floodsr::workflow::PairSet;
use floodsr::Result;

struct Fixture {
    ae: Autoencoder,
    held_out: Vec<Tensor>,
    dem: Vec<Tensor>,
}

/// Autoencoder trained once on a small synthetic catchment.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            seed: 21,
            terrain: TerrainParams {
                size: 64,
                ..TerrainParams::default()
            },
            patch: 32,
            n_events: 3,
            steps_per_event: 8,
            relax_iters: 20,
            ..DatasetConfig::default()
        };
        build_dataset(&cfg, dir.path()).unwrap();
        let train = PairSet::load(dir.path(), Split::Train, None).unwrap();
        let test = PairSet::load(dir.path(), Split::Test, Some((train.max_depth_cm, train.dem_scaling))).unwrap();
        let mut maps: Vec<Tensor> = (0..train.len())
            .map(|i| train.fine_tensor(i, DepthRange::Symmetric).unwrap())
            .collect();
        maps.extend(train.dem.iter().cloned());
        let ae_cfg = AutoencoderConfig {
            steps: 1500,
            ..AutoencoderConfig::default()
        };
        let (ae, losses) = train_autoencoder(&maps, &ae_cfg, 5).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        let held_out = (0..test.len())
            .map(|i| test.fine_tensor(i, DepthRange::Symmetric).unwrap())
            .collect();
        Fixture {
            ae,
            held_out,
            dem: test.dem.clone(),
        }
    })
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64
}

#[test]
fn held_out_reconstruction_is_small() {
    let f = fixture();
    let x = Tensor::stack(&f.held_out).unwrap();
    let mean = x.mean_f64();
    let var = x.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / x.len() as f64;
    let err = mse(&f.ae.round_trip(&x).unwrap(), &x);
    println!("held-out reconstruction mse {err:.3e}, variance {var:.3e}");
    assert!(err < 0.02 * var, "{err} vs variance {var}");
}

#[test]
fn constant_probes() {
    let f = fixture();
    for c in [-1.0f32, -0.5, 0.0, 0.5] {
        let x = Tensor::full(vec![1, 1, 32, 32], c);
        let y = f.ae.round_trip(&x).unwrap();
        let m = y.mean_f64();
        println!("constant {c}: reconstruction mean {m:.4}");
        // 5% of the normalized range [-1, 1].
        assert!((m - c as f64).abs() <= 0.05 * 2.0, "constant {c} reconstructs to {m}");
    }
}

/// Knows the clean signal and returns the exact noise.
struct Oracle {
    x0: Tensor,
    sched: NoiseSchedule,
}

impl NoisePredictor for Oracle {
    fn predict_noise(&self, x_t: &Tensor, _: &Tensor, t: &[usize]) -> Result<Tensor> {
        let per = x_t.len() / t.len();
        let mut out = x_t.clone();
        for (i, (o, &x0)) in out.data_mut().iter_mut().zip(self.x0.data()).enumerate() {
            let g = self.sched.gamma(t[i / per]);
            *o = ((*o as f64 - g.sqrt() * x0 as f64) / (1.0 - g).sqrt()) as f32;
        }
        Ok(out)
    }
}

#[test]
fn latent_oracle_matches_pixel_oracle_up_to_reconstruction() {
    let f = fixture();
    let fine = Tensor::stack(&f.held_out[..4]).unwrap();
    let dem = Tensor::stack(&vec![f.dem[0].clone(); 4]).unwrap();
    let sched = NoiseSchedule::new(ScheduleParams::rescaled(50)).unwrap();
    let cfg = SamplerConfig::full(50, 1);

    let pixel = Oracle {
        x0: fine.clone(),
        sched: sched.clone(),
    };
    let cond = Tensor::concat_channels(&[&fine, &dem]).unwrap();
    let px = sample(&pixel, &cond, &fine, &sched, &cfg).unwrap();
    assert!(mse(&px, &fine) < 1e-8);

    let latent = Oracle {
        x0: f.ae.encode_scaled(&fine).unwrap(),
        sched: sched.clone(),
    };
    let lx = latent_pipeline(Some(&f.ae), &latent, &sched, &fine, &dem, &cfg).unwrap();
    assert_eq!(lx.shape(), fine.shape());
    let recon = mse(&f.ae.round_trip(&fine).unwrap(), &fine);
    let gap = mse(&lx, &px);
    assert!(gap <= recon * 1.01 + 1e-7, "{gap} vs reconstruction {recon}");

    let passthrough = latent_pipeline(Some(&f.ae), &latent, &sched, &fine, &dem, &SamplerConfig::truncated(0, 0, 1)).unwrap();
    assert_eq!(passthrough, f.ae.decode_scaled(&f.ae.encode_scaled(&fine).unwrap()).unwrap());
}
