use floodsr::diffusion::*;
use floodsr::io::load_checkpoint;
use floodsr::numerics::Tensor;
use floodsr::terrain::*;
use floodsr::workflow::*;
use rand::SeedableRng;
fn main() {
    let ck = std::env::args().nth(1).unwrap();
    let dir = std::path::PathBuf::from("/tmp/ds_128_32");
    let train = PairSet::load(&dir, Split::Train, None).unwrap();
    let test = PairSet::load(&dir, Split::Test, Some((train.max_depth_cm, train.dem_scaling))).unwrap();
    let tr = Trainer::from_checkpoint(&load_checkpoint(std::path::Path::new(&ck)).unwrap()).unwrap();
    let m = &tr.model;
    let idx: Vec<usize> = (0..test.len()).step_by((test.len() / 48).max(1)).collect();
    let maxd = m.normalization.max_depth_cm;
    println!("max depth {maxd:.1}");
    let fg: Vec<Tensor> = idx.iter().map(|&i| test.fine_tensor(i, DepthRange::Unit).unwrap()).collect();
    let cg: Vec<Tensor> = idx.iter().map(|&i| test.coarse_tensor(i, DepthRange::Unit).unwrap()).collect();
    let dem: Vec<Tensor> = idx.iter().map(|&i| test.dem_tensor(i, false)).collect();
    let x0 = Tensor::stack(&fg).unwrap().reshape(vec![idx.len(), 1, 32, 32]).unwrap();
    let c = Tensor::stack(&cg).unwrap().reshape(vec![idx.len(), 1, 32, 32]).unwrap();
    let d = Tensor::stack(&dem).unwrap().reshape(vec![idx.len(), 1, 32, 32]).unwrap();
    let cond = Tensor::concat_channels(&[&c, &d]).unwrap();
    let cm2 = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64 * maxd).powi(2)).sum::<f64>() / a.len() as f64;
    println!("CG-FG {:.2}", cm2(&c, &x0));
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    for t in [1usize, 3, 10, 20, 35, 50, 75, 100] {
        let eps = Tensor::randn(x0.shape().to_vec(), &mut rng);
        let xt = q_sample(&x0, t, &eps, &m.schedule).unwrap();
        let e = m.unet.predict(&xt, &cond, &vec![t; idx.len()]).unwrap();
        let g = m.schedule.gamma(t);
        let x0h = xt.zip_map(&e, |x, e| ((x as f64 - (1.0 - g).sqrt() * e as f64) / g.sqrt()) as f32).unwrap();
        let eps_mse = e.data().iter().zip(eps.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / e.len() as f64;
        println!("t={t:3} gamma {g:.4} eps-mse {eps_mse:.4} x0hat-FG {:.2} cm2", cm2(&x0h, &x0));
    }
}
