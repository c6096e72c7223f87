use floodsr::numerics::{adam_step, AdamConfig, AdamState, Tensor};
use floodsr::unet::{Unet, UnetConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> UnetConfig {
    UnetConfig {
        in_channels: 3,
        out_channels: 1,
        base_width: 8,
        depth: 2,
        attn_levels: vec![],
        time_embed_dim: 32,
        norm_groups: 4,
    }
}

#[test]
fn parameter_count_golden() {
    // conv(ci, co, k) = co*ci*k*k + co, norm(c) = 2c, dense(i, o) = o*i + o.
    let layers: [(&str, usize); 14] = [
        ("time mlp: 2 x dense(32,32)", 2 * (32 * 32 + 32)),
        ("input conv(3,8,3)", 8 * 3 * 9 + 8),
        ("down0: 2 x res(8,8)", 2 * (16 + 584 + 264 + 16 + 584)),
        ("down0 stride-2 conv(8,8,3)", 584),
        ("down1.res0 res(8,16) + 1x1 skip", 16 + 1168 + 528 + 32 + 2320 + 144),
        ("down1.res1 res(16,16)", 32 + 2320 + 528 + 32 + 2320),
        ("mid: 2 x res(16,16)", 2 * 5232),
        ("up1.res0 res(32,16) + skip", 64 + 4624 + 528 + 32 + 2320 + 528),
        ("up1.res1 res(16,16)", 5232),
        ("up1 conv(16,8,3)", 8 * 16 * 9 + 8),
        ("up0.res0 res(16,8) + skip", 32 + 1160 + 264 + 16 + 584 + 136),
        ("up0.res1 res(8,8)", 1464),
        ("out norm(8)", 16),
        ("out conv(8,1,3)", 72 + 1),
    ];
    let total: usize = layers.iter().map(|(_, n)| n).sum();
    assert_eq!(total, 43_985);
    let net = Unet::<f32>::build(small(), 0).unwrap();
    assert_eq!(net.num_params(), total);
}

#[test]
fn zero_dem_channel_still_runs() {
    let net = Unet::<f32>::build(small(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn(vec![2, 1, 8, 8], &mut rng);
    let cg = Tensor::randn(vec![2, 1, 8, 8], &mut rng);
    let cond = Tensor::concat_channels(&[&cg, &Tensor::zeros(vec![2, 1, 8, 8])]).unwrap();
    for t in [1, 50, 200] {
        let out = net.predict(&x, &cond, &[t, t]).unwrap();
        assert_eq!(out.shape(), x.shape());
        assert!(out.all_finite());
    }
}

/// After a few optimizer steps the loss responds to conditioning pixels,
/// checked by finite differences against the analytic gradient.
#[test]
fn conditioning_is_live_after_training() {
    let cfg = small();
    let mut net = Unet::<f32>::build(cfg.clone(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(vec![2, 1, 8, 8], &mut rng);
    let cond = Tensor::randn(vec![2, 2, 8, 8], &mut rng);
    let target = Tensor::randn(vec![2, 1, 8, 8], &mut rng);
    let t = [10, 120];
    let adam = AdamConfig {
        lr: 1e-2,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(adam, net.params());
    for _ in 0..5 {
        let lg = net.loss_and_grads(&x, &cond, &t, &target, false).unwrap();
        adam_step(net.params_mut(), &lg.param_grads, &mut state).unwrap();
    }

    let net64: Unet<f64> = net.cast();
    let (x, cond, target) = (x.cast::<f64>(), cond.cast::<f64>(), target.cast::<f64>());
    let lg = net64.loss_and_grads(&x, &cond, &t, &target, true).unwrap();
    let g = lg.cond_grad.unwrap();
    let loss_at = |c: &Tensor<f64>| net64.loss_and_grads(&x, c, &t, &target, false).unwrap().loss;
    let mut live = 0;
    for idx in [5usize, 27, 64 + 9, 128 + 40, 192 + 63] {
        let h = 1e-4;
        let mut p = cond.clone();
        p.data_mut()[idx] += h;
        let mut m = cond.clone();
        m.data_mut()[idx] -= h;
        let fd = (loss_at(&p) - loss_at(&m)) / (2.0 * h);
        let an = g.data()[idx];
        assert!((fd - an).abs() <= 1e-6 + 1e-4 * fd.abs().max(an.abs()), "pixel {idx}: fd {fd} vs {an}");
        if an.abs() > 1e-8 {
            live += 1;
        }
    }
    assert!(live >= 4, "only {live} conditioning pixels have nonzero gradient");
}
