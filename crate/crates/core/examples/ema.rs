use floodsr::diffusion::*;
use floodsr::terrain::*;
use floodsr::unet::*;
use floodsr::workflow::*;
use floodsr::numerics::AdamConfig;
use std::time::Instant;
fn mse(a: &DepthGrid, b: &DepthGrid) -> f64 {
    a.depths.data().iter().zip(b.depths.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.depths.len() as f64
}
fn main() {
    let a: Vec<String> = std::env::args().skip(1).collect();
    let steps: u64 = a[0].parse().unwrap();
    let decay: f32 = a[1].parse().unwrap();
    let tsteps = 100;
    let dir = std::path::PathBuf::from("/tmp/ds_128_32");
    let train = PairSet::load(&dir, Split::Train, None).unwrap();
    let test = PairSet::load(&dir, Split::Test, Some((train.max_depth_cm, train.dem_scaling))).unwrap();
    let ucfg = UnetConfig { in_channels: 3, out_channels: 1, base_width: 16, depth: 3, attn_levels: vec![2], time_embed_dim: 64, norm_groups: 8 };
    let unet = Unet::build(ucfg, 0).unwrap();
    let sched = NoiseSchedule::new(ScheduleParams::rescaled(tsteps)).unwrap();
    let model = FloodModel::new(Mode::Pixel, unet, sched, Normalization::of(&train), None, false).unwrap();
    let pairs = model.training_pairs(&train).unwrap();
    let mut tr = Trainer::new(model, AdamConfig { lr: 1e-3, ..Default::default() }, 8, 0).unwrap();
    let mut ema = tr.model.unet.params().clone();
    let s = Instant::now();
    let mut avg = 0.0;
    for k in 0..steps {
        let l = tr.train_step(&pairs).unwrap();
        let d = decay.min((1.0 + k as f32) / (10.0 + k as f32));
        for (e, p) in ema.tensors_mut().iter_mut().zip(tr.model.unet.params().tensors()) {
            for (x, y) in e.data_mut().iter_mut().zip(p.data()) { *x = d * *x + (1.0 - d) * y; }
        }
        avg = if k == 0 { l } else { 0.98 * avg + 0.02 * l };
        if (k + 1) % 500 == 0 { println!("step {} loss {:.4} ({:.0}s)", k + 1, avg, s.elapsed().as_secs_f64()); }
    }
    let idx: Vec<usize> = (0..test.len()).step_by((test.len() / 48).max(1)).collect();
    let cg: f64 = idx.iter().map(|&i| mse(&test.coarse[i], &test.fine[i])).sum::<f64>() / idx.len() as f64;
    println!("n {} CG-FG {:.2}", idx.len(), cg);
    let raw = tr.model.unet.params().clone();
    for (label, p) in [("raw", &raw), ("ema", &ema)] {
        tr.model.unet.params_mut().load_from(p).unwrap();
        for (name, sc) in [("full", SamplerConfig::full(tsteps, 1)), ("m=T/5", SamplerConfig::truncated(tsteps/5, tsteps/5, 1)), ("m=T/10", SamplerConfig::truncated(tsteps/10, tsteps/10, 1))] {
            let s = Instant::now();
            let out = tr.model.super_resolve(&test, &idx, &sc, 8).unwrap();
            let sr: f64 = idx.iter().zip(&out).map(|(&i, o)| mse(o, &test.fine[i])).sum::<f64>() / idx.len() as f64;
            println!("{label} {name}: SR-FG {:.2} ratio {:.3} ({:.1}s)", sr, sr / cg, s.elapsed().as_secs_f64());
        }
    }
}
