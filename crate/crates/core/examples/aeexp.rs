use floodsr::latent::{train_autoencoder, AutoencoderConfig};
use floodsr::numerics::Tensor;
use floodsr::terrain::{build_dataset, DatasetConfig, DepthRange, Split, TerrainParams};
use floodsr::workflow::PairSet;

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let steps: usize = a[1].parse().unwrap();
    let lr: f64 = a[2].parse().unwrap();
    let base: usize = a[3].parse().unwrap();
    let batch: usize = a[4].parse().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig { seed: 21, terrain: TerrainParams { size: 64, ..TerrainParams::default() }, patch: 32, n_events: 3, steps_per_event: 8, relax_iters: 20, ..DatasetConfig::default() };
    build_dataset(&cfg, dir.path()).unwrap();
    let train = PairSet::load(dir.path(), Split::Train, None).unwrap();
    let test = PairSet::load(dir.path(), Split::Test, Some((train.max_depth_cm, train.dem_scaling))).unwrap();
    let mut maps: Vec<Tensor> = (0..train.len()).map(|i| train.fine_tensor(i, DepthRange::Symmetric).unwrap()).collect();
    maps.extend(train.dem.iter().cloned());
    let t0 = std::time::Instant::now();
    let (ae, losses) = train_autoencoder(&maps, &AutoencoderConfig { steps, lr, base_width: base, batch_size: batch, ..AutoencoderConfig::default() }, 5).unwrap();
    for k in (0..steps).step_by(steps / 10) { let w = &losses[k..(k + steps / 10).min(steps)]; println!("{k}: {:.3e}", w.iter().sum::<f64>() / w.len() as f64); }
    let x = Tensor::stack(&(0..test.len()).map(|i| test.fine_tensor(i, DepthRange::Symmetric).unwrap()).collect::<Vec<_>>()).unwrap();
    let m = x.mean_f64();
    let var = x.data().iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / x.len() as f64;
    let y = ae.round_trip(&x).unwrap();
    let e = x.data().iter().zip(y.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / x.len() as f64;
    println!("mse {e:.3e} var {var:.3e} ratio {:.4} time {:.0}s", e / var, t0.elapsed().as_secs_f64());
}
